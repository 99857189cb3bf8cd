//! Brute-force reference implementations shared by the integration tests.
//! Everything here is written with plain loops over the raw weights and
//! deliberately avoids the crate's kernels.
#![allow(dead_code)]

use leank::mask::{BinaryChannelMask, ChannelDims};
use leank::model::{ModelConfig, ToyTransformer};
use leank::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config(n_layers: usize, n_q: usize, n_kv: usize, d: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_q_heads: n_q,
        n_kv_heads: n_kv,
        head_dim: d,
        d_model: n_q * d,
        d_ff: 48,
        vocab: 64,
        rope_base: 10000.0,
        max_pos: 256,
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Random mask whose per-head counts are multiples of `r`, with the given
/// heads forced to zero.
pub fn random_mask(rng: &mut ChaCha8Rng, dims: ChannelDims, r: usize, streaming: &[(usize, usize)]) -> BinaryChannelMask {
    let d = dims.head_dim;
    let mut bits = vec![0u8; dims.total()];
    let mut kept = 0;
    for l in 0..dims.n_layers {
        for h in 0..dims.n_kv_heads {
            let n = if streaming.contains(&(l, h)) { 0 } else { r * rng.random_range(0..=d / r) };
            let mut chans: Vec<usize> = (0..d).collect();
            for i in (1..d).rev() {
                chans.swap(i, rng.random_range(0..=i));
            }
            for &c in &chans[..n] {
                bits[(l * dims.n_kv_heads + h) * d + c] = 1;
            }
            kept += n;
        }
    }
    BinaryChannelMask::new(dims, bits, r, kept as f64 / dims.total() as f64).unwrap()
}

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(rows, x.len());
    let wd = w.data();
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j] += x[i] * wd[i * cols + j];
        }
    }
    out
}

fn rms(x: &[f64], gain: &Tensor) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(gain.data()).map(|(v, g)| v * inv * g).collect()
}

fn rotate(x: &mut [f64], d: usize, pos: usize, base: f64) {
    let half = d / 2;
    for block in x.chunks_mut(d) {
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            let (a, b) = (block[i], block[i + half]);
            block[i] = a * c - b * s;
            block[i + half] = a * s + b * c;
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Post-RoPE q/k and v of one layer, row per position.
pub struct RefLayer {
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub struct RefPass {
    pub hidden: Vec<Vec<f64>>,
    pub layers: Vec<RefLayer>,
}

/// How a query at `query` (sequence length `query + 1`) sees the key at
/// `key`.
#[derive(Clone, Copy, PartialEq)]
enum Access {
    Full,
    Kept,
    Excluded,
}

/// Stateless forward over `tokens`. Positions before `n_prompt` use full
/// causal attention; later positions read keys outside sink and window
/// through `beta`'s kept channels, and streaming heads skip them.
pub fn reference_pass(
    model: &ToyTransformer,
    tokens: &[usize],
    n_prompt: usize,
    beta: Option<&BinaryChannelMask>,
    sink: usize,
    window: usize,
) -> RefPass {
    let cfg = &model.config;
    let d = cfg.head_dim;
    let group = cfg.n_q_heads / cfg.n_kv_heads;
    let t = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens.iter().map(|&tok| model.embed.row(tok).to_vec()).collect();
    let mut layers = Vec::new();
    for (l, lw) in model.layers.iter().enumerate() {
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for p in 0..t {
            let h = rms(&x[p], &lw.attn_norm);
            let mut qp = vecmat(&h, &lw.wq);
            let mut kp = vecmat(&h, &lw.wk);
            rotate(&mut qp, d, p, cfg.rope_base);
            rotate(&mut kp, d, p, cfg.rope_base);
            q.push(qp);
            k.push(kp);
            v.push(vecmat(&h, &lw.wv));
        }
        for p in 0..t {
            let mut attn = vec![0.0; cfg.n_q_heads * d];
            for hq in 0..cfg.n_q_heads {
                let g = hq / group;
                let kept: Vec<usize> = match beta {
                    Some(b) => (0..d).filter(|&c| b.bits[(l * cfg.n_kv_heads + g) * d + c] == 1).collect(),
                    None => (0..d).collect(),
                };
                let qh = &q[p][hq * d..(hq + 1) * d];
                let mut logits = Vec::new();
                let mut keys = Vec::new();
                for j in 0..=p {
                    let access = if p < n_prompt || j < sink || p - j < window {
                        Access::Full
                    } else if kept.is_empty() {
                        Access::Excluded
                    } else {
                        Access::Kept
                    };
                    let kj = &k[j][g * d..(g + 1) * d];
                    let dot: f64 = match access {
                        Access::Full => (0..d).map(|c| qh[c] * kj[c]).sum(),
                        Access::Kept => kept.iter().map(|&c| qh[c] * kj[c]).sum(),
                        Access::Excluded => continue,
                    };
                    logits.push(dot / (d as f64).sqrt());
                    keys.push(j);
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
                let s: f64 = w.iter().sum();
                for (wi, &j) in w.iter().zip(&keys) {
                    for c in 0..d {
                        attn[hq * d + c] += wi / s * v[j][g * d + c];
                    }
                }
            }
            let o = vecmat(&attn, &lw.wo);
            for (a, b) in x[p].iter_mut().zip(&o) {
                *a += b;
            }
            let h = rms(&x[p], &lw.ffn_norm);
            let gate = vecmat(&h, &lw.w_gate);
            let up = vecmat(&h, &lw.w_up);
            let mid: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
            let ff = vecmat(&mid, &lw.w_down);
            for (a, b) in x[p].iter_mut().zip(&ff) {
                *a += b;
            }
        }
        let _ = l;
        layers.push(RefLayer { q, k, v });
    }
    RefPass { hidden: x, layers }
}

pub fn reference_logits(model: &ToyTransformer, hidden: &[f64]) -> Vec<f64> {
    vecmat(&rms(hidden, &model.final_norm), &model.lm_head)
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode by full recomputation at every step. Returns the logits
/// after each fed token and the greedy tokens.
pub fn reference_generate(
    model: &ToyTransformer,
    beta: &BinaryChannelMask,
    prompt: &[usize],
    forced: &[usize],
    n_greedy: usize,
    sink: usize,
    window: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut tokens = prompt.to_vec();
    let mut logits = Vec::new();
    let mut greedy = Vec::new();
    let next = |tokens: &Vec<usize>| {
        let pass = reference_pass(model, tokens, prompt.len(), Some(beta), sink, window);
        reference_logits(model, pass.hidden.last().unwrap())
    };
    let mut last = next(&tokens);
    for &f in forced {
        tokens.push(f);
        last = next(&tokens);
        logits.push(last.clone());
    }
    for _ in 0..n_greedy {
        let t = argmax(&last);
        greedy.push(t);
        tokens.push(t);
        last = next(&tokens);
        logits.push(last.clone());
    }
    (logits, greedy)
}

/// Global top-k by value (ties to the lower index), per-head counts rounded
/// half up to a multiple of `r` and capped, then re-selected per head.
pub fn top_s_r_oracle(values: &[f64], dims: ChannelDims, keep: f64, r: usize) -> Vec<u8> {
    let d = dims.head_dim;
    let total = values.len();
    let k = (keep * total as f64 + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    let mut chosen = vec![false; total];
    for &i in &order[..k.min(total)] {
        chosen[i] = true;
    }
    let mut bits = vec![0u8; total];
    for head in 0..total / d {
        let lo = head * d;
        let c = (lo..lo + d).filter(|&i| chosen[i]).count();
        let rounded = ((c as f64 / r as f64) + 0.5).floor() as usize * r;
        let cap = (d / r) * r;
        let n = rounded.min(cap);
        let mut idx: Vec<usize> = (lo..lo + d).collect();
        idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
        for &i in &idx[..n] {
            bits[i] = 1;
        }
    }
    bits
}

/// Explicit `Q K^T` over a channel subset, as a dense matrix.
pub fn logit_matrix(q: &[Vec<f64>], k: &[Vec<f64>], channels: &[usize]) -> Vec<f64> {
    let mut m = Vec::with_capacity(q.len() * k.len());
    for qa in q {
        for kb in k {
            m.push(channels.iter().map(|&c| qa[c] * kb[c]).sum());
        }
    }
    m
}

pub fn frob(m: &[f64]) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// r_i from explicit rank-one logit contributions.
pub fn norm_ratio_oracle(q: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<f64> {
    let d = q[0].len();
    let all: Vec<usize> = (0..d).collect();
    let denom = frob(&logit_matrix(q, k, &all));
    (0..d).map(|i| frob(&logit_matrix(q, k, &[i])) / denom).collect()
}

pub fn whf_oracle(q: &[Vec<f64>], k: &[Vec<f64>], boundary: usize) -> f64 {
    let d = q[0].len();
    let all: Vec<usize> = (0..d).collect();
    let high: Vec<usize> = (0..d).filter(|&c| c % (d / 2) < boundary).collect();
    frob(&logit_matrix(q, k, &high)) / frob(&logit_matrix(q, k, &all))
}

/// Two-pass Pearson with n-1 normalisation.
pub fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
    let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    cov / (sa * sb)
}

/// Stacked query rows of the heads in KV group `g`: the last `rows`
/// positions of each head, head-major.
pub fn group_rows(layer: &RefLayer, cfg: &ModelConfig, g: usize, rows: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = cfg.head_dim;
    let group = cfg.n_q_heads / cfg.n_kv_heads;
    let t = layer.q.len();
    let rows = rows.min(t);
    let mut q = Vec::new();
    for h in g * group..(g + 1) * group {
        for p in t - rows..t {
            q.push(layer.q[p][h * d..(h + 1) * d].to_vec());
        }
    }
    let k = layer.k.iter().map(|r| r[g * d..(g + 1) * d].to_vec()).collect();
    (q, k)
}

/// Closed-form `(k_baseline, k_pruned, v_baseline, v_pruned)` element counts.
pub fn memory_oracle(beta: &BinaryChannelMask, sink: usize, window: usize, seq: usize) -> (usize, usize, usize, usize) {
    let d = beta.dims.head_dim;
    let heads = beta.dims.n_layers * beta.dims.n_kv_heads;
    let sl = (sink + window).min(seq);
    let mid = seq - sl;
    let mut kp = 0;
    let mut vp = 0;
    for head in beta.bits.chunks(d) {
        let kept = head.iter().filter(|&&b| b == 1).count();
        kp += sl * d + mid * kept;
        vp += if kept == 0 { sl * d } else { seq * d };
    }
    (heads * seq * d, kp, heads * seq * d, vp)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}
