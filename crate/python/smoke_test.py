"""Smoke test for the leank_py extension.

Run from the repository root:  python3 python/smoke_test.py
Builds the extension with cargo when it is not importable yet.
"""
import json
import os
import shutil
import subprocess
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)


def ensure_module():
    try:
        import leank_py  # noqa: F401
        return
    except ImportError:
        pass
    subprocess.check_call(
        ["cargo", "build", "-p", "leank-py", "--release", "--features", "extension-module"],
        cwd=ROOT,
    )
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(ROOT, "target"))
    lib = os.path.join(target, "release", "libleank_py.so")
    if not os.path.exists(lib):
        lib = os.path.join(target, "release", "libleank_py.dylib")
    shutil.copy(lib, os.path.join(HERE, "leank_py.so"))
    sys.path.insert(0, HERE)


def main():
    ensure_module()
    import leank_py as lk

    cfg = lk.default_config()
    assert cfg["prune_ratio"] == 0.7

    model = lk.ToyModel.init(0)
    mc = model.config
    n_l, n_kv, d = mc["n_layers"], mc["n_kv_heads"], mc["head_dim"]
    total = n_l * n_kv * d

    sample = lk.sample_task("dense_retrieval", 64, index=1, seed=5, vocab=mc["vocab"])
    tokens = sample["ctx_tokens"] + sample["ans_tokens"]
    n_ans = len(sample["ans_tokens"])

    # unit factors give the full forward on the answer rows
    full = model.forward_full(tokens)
    scaled = model.forward_scaled(tokens, n_ans, [1.0] * total, 4, 16)
    diff = max(abs(a - b) for ra, rb in zip(full[-n_ans:], scaled) for a, b in zip(ra, rb))
    assert diff < 1e-10, diff

    alpha = [((i * 7919) % 97) / 97.0 for i in range(total)]
    mask = lk.top_s_r(alpha, n_l, n_kv, d, 0.3, 4)
    for l in range(n_l):
        for h in range(n_kv):
            assert len(mask.kept_channels(l, h)) % 4 == 0

    rep = lk.memory_report(mask, 4, 16, 1024, 2)
    assert 0.0 < rep["k_reduction_fraction"] < 1.0

    tokens_out, logits = lk.generate(model, mask, sample["ctx_tokens"], sample["ans_tokens"][:1], 3, 4, 16)
    assert len(tokens_out) == 3 and len(logits) == 4
    full_mask = lk.ChannelMask.full(n_l, n_kv, d)
    _, logits_full = lk.generate(model, full_mask, sample["ctx_tokens"], [], 2, 4, 16)
    assert len(logits_full[0]) == mc["vocab"]

    r = lk.channel_norm_ratios(model, tokens, 32)
    assert len(r) == total and all(x >= 0 for x in r)
    w = lk.high_freq_ratio(model, tokens, d // 4)
    assert len(w) == n_l * n_kv and all(0.0 <= x <= 1.0 + 1e-12 for x in w)
    assert abs(lk.pearson(r, r) - 1.0) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        p = os.path.join(tmp, "m.bin")
        model.save(p)
        again = lk.ToyModel.load(p)
        assert again.forward_full(tokens[:10]) == model.forward_full(tokens[:10])
        mp = os.path.join(tmp, "beta.bin")
        mask.save(mp)
        assert lk.ChannelMask.load(mp).bits == mask.bits

        tiny = dict(cfg)
        tiny.update(
            curriculum=[{"steps": 10, "min_len": 8, "max_len": 16}],
            steps_stage1=3, steps_stage2=2, select_samples=2,
            eval_samples=2, eval_len=32, train_min_len=16, train_max_len=32,
        )
        cj = json.dumps(tiny)
        log = lk.run_pretrain(cj, tmp)
        assert len(log["losses"]) == 1
        beta = lk.run_learn_mask(cj, tmp)
        assert len(beta.bits) == total
        report = lk.run_eval(cj, tmp, "leank")
        assert 0.0 <= report["mean_accuracy"] <= 1.0

    try:
        lk.top_s_r([0.0] * 3, 1, 1, 4, 0.5, 4)
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch not rejected")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
