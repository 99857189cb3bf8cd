mod common;

use leank::cache::{decode_step, memory_report, prefill_and_partition, CacheSettings};
use leank::io;
use leank::mask::{BinaryChannelMask, ChannelDims};
use leank::model::ToyTransformer;
use leank::pipeline::{self, CurriculumStage, EvalMode, ExperimentConfig};

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        curriculum: vec![CurriculumStage {
            steps: 12,
            min_len: 8,
            max_len: 16,
        }],
        pretrain_batch: 4,
        steps_stage1: 4,
        steps_stage2: 3,
        select_samples: 2,
        train_min_len: 16,
        train_max_len: 32,
        train_batch: 2,
        eval_len: 32,
        eval_samples: 3,
        static_samples: 2,
        staticity_lens: vec![32],
        obs_window: 16,
        ..ExperimentConfig::default()
    }
}

#[test]
fn pretrain_is_deterministic_and_creates_dirs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let root_b = b.path().join("not").join("yet");
    let c = tiny();
    let ra = pipeline::cmd_pretrain(&c, a.path()).unwrap();
    let rb = pipeline::cmd_pretrain(&c, &root_b).unwrap();
    let ca = std::fs::read(c.run_dir(a.path()).join(pipeline::CHECKPOINT_FILE)).unwrap();
    let cb = std::fs::read(c.run_dir(&root_b).join(pipeline::CHECKPOINT_FILE)).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(ra.losses[0].len(), 12);

    let model = pipeline::load_model(&c, a.path()).unwrap();
    let again = pipeline::recompute_final_loss(&c, &model, &ra).unwrap();
    assert_eq!(again.to_bits(), ra.final_loss.to_bits());

    // a checkpoint trained under another config is refused
    let mut other = c.clone();
    other.model.n_layers = 1;
    assert!(pipeline::load_model(&other, a.path()).is_err());
}

#[test]
fn resume_from_stage1_matches_paired_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny();
    pipeline::cmd_pretrain(&c, dir.path()).unwrap();
    let model = pipeline::load_model(&c, dir.path()).unwrap();
    let first = pipeline::learn_masks(&model, &c, None).unwrap();
    let resumed_cfg = ExperimentConfig { steps_stage1: 0, ..c.clone() };
    // stage 2 offsets its samples by steps_stage1, so keep the same stream
    let spec = c.train_spec();
    let (beta, alpha, _) =
        leank::mask::stage2_train(&model, &c.train_mix(), &first.alpha_stage1, c.keep_ratio(), c.r, &spec).unwrap();
    assert_eq!(beta, first.beta);
    assert_eq!(alpha, first.alpha);
    let resumed = pipeline::learn_masks(&model, &resumed_cfg, Some(first.alpha_stage1.clone())).unwrap();
    assert_eq!(resumed.alpha_stage1, first.alpha_stage1);
    assert_eq!(resumed.beta_stage1, first.beta_stage1);
    assert!(resumed.stage1.loss.is_empty());
}

#[test]
fn zero_pruning_keeps_everything() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig { prune_ratio: 0.0, ..tiny() };
    pipeline::cmd_pretrain(&c, dir.path()).unwrap();
    let out = pipeline::cmd_learn_mask(&c, dir.path()).unwrap();
    assert!(out.beta.bits.iter().all(|&b| b == 1));
    assert_eq!(out.stage2.loss[0], 0.0);

    let csv = std::fs::read_to_string(c.run_dir(dir.path()).join(pipeline::CURVES_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + c.steps_stage1 + c.steps_stage2);
    assert_eq!(csv.lines().next().unwrap(), "stage,step,loss,distill");

    let full = pipeline::cmd_eval(&c, dir.path(), EvalMode::Full, None, false).unwrap();
    let leank = pipeline::cmd_eval(&c, dir.path(), EvalMode::Leank, None, false).unwrap();
    assert_eq!(full.tasks.len(), leank.tasks.len());
    for (a, b) in full.tasks.iter().zip(&leank.tasks) {
        assert_eq!(a.scores, b.scores);
    }
}

#[test]
fn eval_report_memory_and_mask_checks() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny();
    pipeline::cmd_pretrain(&c, dir.path()).unwrap();
    let out = pipeline::cmd_learn_mask(&c, dir.path()).unwrap();
    let report = pipeline::cmd_eval(&c, dir.path(), EvalMode::Leank, None, false).unwrap();
    assert_eq!(report.tasks[0].samples, 3);
    let want = memory_report(&out.beta, c.sink, c.window, c.eval_len, c.bytes_per_element);
    assert_eq!(report.memory.as_ref().unwrap(), &want);
    let on_disk: serde_json::Value =
        io::load_json(&c.run_dir(dir.path()).join(pipeline::report_file(EvalMode::Leank))).unwrap();
    assert_eq!(on_disk["mean_accuracy"].as_f64().unwrap(), report.mean_accuracy);

    let wrong = BinaryChannelMask::full(
        ChannelDims {
            n_layers: 1,
            n_kv_heads: 2,
            head_dim: 16,
        },
        4,
    )
    .unwrap();
    assert!(pipeline::cmd_eval(&c, dir.path(), EvalMode::Leank, Some(&wrong), false).is_err());

    for mode in EvalMode::ALL {
        let r = pipeline::cmd_eval(&c, dir.path(), mode, None, false).unwrap();
        assert!((0.0..=1.0).contains(&r.mean_accuracy), "{}", mode.name());
    }
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = pipeline::cmd_learn_mask(&tiny(), dir.path()).unwrap_err();
    assert!(err.to_string().contains("pretrain"), "{err}");
}

#[test]
fn mask_files_round_trip_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = common::rng(5);
    let dims = ChannelDims {
        n_layers: 2,
        n_kv_heads: 2,
        head_dim: 8,
    };
    let beta = common::random_mask(&mut rng, dims, 2, &[(1, 0)]);
    let p = dir.path().join("beta.bin");
    io::save_beta(&p, &beta).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let back = io::load_beta(&p, Some(dims)).unwrap();
    assert_eq!(back, beta);
    io::save_beta(&p, &back).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);

    let other = ChannelDims { head_dim: 16, ..dims };
    assert!(io::load_beta(&p, Some(other)).is_err());

    // counts of 3 are not multiples of r = 2
    let mut bits = vec![0u8; dims.total()];
    for h in 0..4 {
        bits[h * 8..h * 8 + 3].fill(1);
    }
    let odd = BinaryChannelMask::new(dims, bits, 1, 0.375).unwrap();
    let raw = io::encode_beta(&odd).unwrap();
    let at = raw.windows(5).position(|w| w == b"\"r\":1").expect("r in header") + 4;
    let mut raw2 = raw.clone();
    raw2[at] = b'2';
    assert!(io::decode_beta(&raw2, None).is_err());
}

#[test]
fn stored_elements_match_memory_report() {
    let mut rng = common::rng(8);
    let cfg = common::small_config(2, 4, 2, 8);
    let model = ToyTransformer::init(cfg.clone(), 2).unwrap();
    let dims = ChannelDims::of(&cfg);
    for streaming in [vec![], vec![(0, 1)]] {
        let beta = common::random_mask(&mut rng, dims, 2, &streaming);
        let settings = CacheSettings::new(4, 8).with_migrate_every(1);
        let prompt = common::random_tokens(&mut rng, 30, cfg.vocab);
        let (mut cache, _) = prefill_and_partition(&model, &beta, &prompt, settings).unwrap();
        let rep = memory_report(&beta, 4, 8, 30, 2);
        assert_eq!(cache.stored_elements(), (rep.elements_k_pruned, rep.elements_v_pruned));
        for step in 0..10 {
            decode_step(&model, &mut cache, step % cfg.vocab).unwrap();
            let rep = memory_report(&beta, 4, 8, 31 + step, 2);
            assert_eq!(cache.stored_elements(), (rep.elements_k_pruned, rep.elements_v_pruned));
        }
    }
}
