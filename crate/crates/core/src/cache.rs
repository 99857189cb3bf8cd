//! Deployment-path decoding over a partitioned K cache.
//!
//! Per layer and KV head the cache keeps sink and local-window keys at full
//! width, middle keys gathered down to the head's kept channels, and middle
//! values only for heads that keep at least one channel. New tokens enter
//! the local window; every `migrate_every` tokens the overflow moves into
//! the pruned middle store.
//!
//! Width is decided by logical region, not storage: a key counts as full
//! width only while it is in the sink or within `window` of the query.
//! Overflow keys still waiting for migration are read through the kept
//! channels (or skipped, for streaming heads), so migration timing never
//! changes results.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mask::{BinaryChannelMask, ChannelDims};
use crate::model::{apply_rope, forward_full, ModelConfig, ToyTransformer};
use crate::tensor::{kernels, Tensor, MASKED_LOGIT};

pub const DEFAULT_MIGRATE_EVERY: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSettings {
    pub sink: usize,
    pub window: usize,
    pub migrate_every: usize,
}

impl CacheSettings {
    pub fn new(sink: usize, window: usize) -> Self {
        Self {
            sink,
            window,
            migrate_every: DEFAULT_MIGRATE_EVERY,
        }
    }

    pub fn with_migrate_every(self, migrate_every: usize) -> Self {
        Self { migrate_every, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.migrate_every == 0 {
            return Err(invalid("window and migrate_every must be positive"));
        }
        Ok(())
    }
}

/// Storage for one KV head of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadCache {
    pub kept_channels: Vec<usize>,
    /// Full-width sink and local keys, row-major `d` wide, in position order.
    pub k_sl: Vec<f64>,
    pub v_sl: Vec<f64>,
    pub sl_positions: Vec<usize>,
    /// Middle keys restricted to `kept_channels`.
    pub k_prun: Vec<f64>,
    /// Middle values; empty for streaming heads.
    pub v_mid: Vec<f64>,
    /// Middle tokens represented, including those dropped by streaming heads.
    pub n_mid: usize,
}

impl HeadCache {
    pub fn is_streaming(&self) -> bool {
        self.kept_channels.is_empty()
    }

    pub fn n_sl(&self) -> usize {
        self.sl_positions.len()
    }

    fn push_mid(&mut self, k: &[f64], v: &[f64]) {
        if !self.is_streaming() {
            self.k_prun.extend(self.kept_channels.iter().map(|&c| k[c]));
            self.v_mid.extend_from_slice(v);
        }
        self.n_mid += 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedKVCache {
    pub config: ModelConfig,
    pub settings: CacheSettings,
    /// `[layer][kv_head]`.
    pub heads: Vec<Vec<HeadCache>>,
    /// Tokens appended since the last migration.
    pub pending: usize,
    /// Total tokens represented (prompt plus decoded).
    pub len: usize,
    /// Accumulated attention seconds per layer when timing is enabled.
    pub layer_seconds: Option<Vec<f64>>,
}

/// Hidden state and logits of the newest token.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

impl StepOutput {
    /// Greedy next token, lowest id on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.logits.iter().enumerate() {
            if x > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

fn check_dims(model: &ModelConfig, beta: &BinaryChannelMask) -> Result<()> {
    if ChannelDims::of(model) != beta.dims {
        return Err(invalid(format!(
            "mask dims {:?} do not match model dims {:?}",
            beta.dims,
            ChannelDims::of(model)
        )));
    }
    Ok(())
}

fn output_for(model: &ToyTransformer, hidden: &[f64]) -> Result<StepOutput> {
    let h = Tensor::new(vec![1, hidden.len()], hidden.to_vec())?;
    let n = kernels::mul_row(&kernels::rmsnorm_rows(&h), &model.final_norm)?;
    let logits = kernels::matmul(&n, &model.lm_head)?;
    Ok(StepOutput {
        hidden: hidden.to_vec(),
        logits: logits.into_data(),
    })
}

/// Full-attention prefill, then partition the prompt's keys and values.
/// Prompts no longer than `sink + window` stay entirely full width.
pub fn prefill_and_partition(
    model: &ToyTransformer,
    beta: &BinaryChannelMask,
    tokens: &[usize],
    settings: CacheSettings,
) -> Result<(PartitionedKVCache, StepOutput)> {
    settings.validate()?;
    check_dims(&model.config, beta)?;
    let cfg = &model.config;
    let rec = forward_full(model, tokens, 0)?;
    let n = tokens.len();
    let d = cfg.head_dim;
    let sink = settings.sink.min(n);
    let local_start = n.saturating_sub(settings.window).max(sink);

    let mut heads = Vec::with_capacity(cfg.n_layers);
    for (l, acts) in rec.layers.iter().enumerate() {
        let mut row = Vec::with_capacity(cfg.n_kv_heads);
        for g in 0..cfg.n_kv_heads {
            let mut hc = HeadCache {
                kept_channels: beta.kept_channels(l, g),
                k_sl: Vec::new(),
                v_sl: Vec::new(),
                sl_positions: Vec::new(),
                k_prun: Vec::new(),
                v_mid: Vec::new(),
                n_mid: 0,
            };
            for p in 0..n {
                let k = &acts.k.row(p)[g * d..(g + 1) * d];
                let v = &acts.v.row(p)[g * d..(g + 1) * d];
                if p < sink || p >= local_start {
                    hc.k_sl.extend_from_slice(k);
                    hc.v_sl.extend_from_slice(v);
                    hc.sl_positions.push(p);
                } else {
                    hc.push_mid(k, v);
                }
            }
            row.push(hc);
        }
        heads.push(row);
    }
    let cache = PartitionedKVCache {
        config: cfg.clone(),
        settings,
        heads,
        pending: 0,
        len: n,
        layer_seconds: None,
    };
    let out = output_for(model, rec.hidden.row(n - 1))?;
    Ok((cache, out))
}

impl PartitionedKVCache {
    pub fn enable_timing(&mut self) {
        self.layer_seconds = Some(vec![0.0; self.config.n_layers]);
    }

    /// Stored `(K, V)` element counts across all heads.
    pub fn stored_elements(&self) -> (usize, usize) {
        let mut k = 0;
        let mut v = 0;
        for hc in self.heads.iter().flatten() {
            k += hc.k_sl.len() + hc.k_prun.len();
            v += hc.v_sl.len() + hc.v_mid.len();
        }
        (k, v)
    }

    /// Tokens represented by one head's storage.
    pub fn tokens_held(&self, layer: usize, head: usize) -> usize {
        let hc = &self.heads[layer][head];
        hc.n_sl() + hc.n_mid
    }

    fn is_full_width(&self, query: usize, key: usize) -> bool {
        key < self.settings.sink || query - key < self.settings.window
    }
}

/// Moves local-window overflow into the pruned middle store once
/// `pending >= migrate_every`; otherwise a no-op.
pub fn migrate_window(cache: &mut PartitionedKVCache) {
    if cache.pending < cache.settings.migrate_every {
        return;
    }
    let d = cache.config.head_dim;
    let sink = cache.settings.sink;
    let window = cache.settings.window;
    for hc in cache.heads.iter_mut().flatten() {
        let n_sink = hc.sl_positions.iter().take_while(|&&p| p < sink).count();
        let n_local = hc.n_sl() - n_sink;
        let overflow = n_local.saturating_sub(window);
        if overflow == 0 {
            continue;
        }
        let lo = n_sink;
        let hi = n_sink + overflow;
        let k_moved: Vec<f64> = hc.k_sl.drain(lo * d..hi * d).collect();
        let v_moved: Vec<f64> = hc.v_sl.drain(lo * d..hi * d).collect();
        hc.sl_positions.drain(lo..hi);
        for i in 0..overflow {
            hc.push_mid(&k_moved[i * d..(i + 1) * d], &v_moved[i * d..(i + 1) * d]);
        }
    }
    cache.pending = 0;
}

fn single_row(x: Vec<f64>) -> Tensor {
    let n = x.len();
    Tensor::new(vec![1, n], x).expect("row")
}

/// Attention of one query head over one KV head's cache. `q` is the
/// post-RoPE query slice, `pos` its position.
fn head_attention(cache: &PartitionedKVCache, hc: &HeadCache, q: &[f64], pos: usize, d: usize) -> Vec<f64> {
    let inv = 1.0 / (d as f64).sqrt();
    let n_sl = hc.n_sl();
    let kept = &hc.kept_channels;
    let q_kept: Vec<f64> = kept.iter().map(|&c| q[c]).collect();

    // logits: pruned middle rows first, then sink+local rows
    let mut logits = Vec::with_capacity(hc.n_mid + n_sl);
    if !hc.is_streaming() {
        let w = kept.len();
        for j in 0..hc.n_mid {
            let k = &hc.k_prun[j * w..(j + 1) * w];
            logits.push(inv * q_kept.iter().zip(k).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    for (i, &p) in hc.sl_positions.iter().enumerate() {
        let k = &hc.k_sl[i * d..(i + 1) * d];
        let logit = if cache.is_full_width(pos, p) {
            inv * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>()
        } else if hc.is_streaming() {
            MASKED_LOGIT
        } else {
            inv * kept.iter().zip(&q_kept).map(|(&c, a)| a * k[c]).sum::<f64>()
        };
        logits.push(logit);
    }

    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits
        .iter()
        .map(|&x| if x <= MASKED_LOGIT { 0.0 } else { (x - max).exp() })
        .collect();
    let z: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= z;
    }

    let mut out = vec![0.0; d];
    let mid_rows = if hc.is_streaming() { 0 } else { hc.n_mid };
    for j in 0..mid_rows {
        let v = &hc.v_mid[j * d..(j + 1) * d];
        for (o, x) in out.iter_mut().zip(v) {
            *o += weights[j] * x;
        }
    }
    for i in 0..n_sl {
        let w = weights[mid_rows + i];
        if w == 0.0 {
            continue;
        }
        let v = &hc.v_sl[i * d..(i + 1) * d];
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Appends `token` at the next position and returns its logits.
pub fn decode_step(model: &ToyTransformer, cache: &mut PartitionedKVCache, token: usize) -> Result<StepOutput> {
    let cfg = &model.config;
    if *cfg != cache.config {
        return Err(invalid("cache was built for a different model config"));
    }
    if token >= cfg.vocab {
        return Err(invalid(format!("token {token} outside vocabulary {}", cfg.vocab)));
    }
    let pos = cache.len;
    if pos >= cfg.max_pos {
        return Err(invalid(format!("position {pos} beyond max_pos {}", cfg.max_pos)));
    }
    let d = cfg.head_dim;
    let mut x = single_row(model.embed.row(token).to_vec());
    for (l, lw) in model.layers.iter().enumerate() {
        let h = kernels::mul_row(&kernels::rmsnorm_rows(&x), &lw.attn_norm)?;
        let q = apply_rope(&kernels::matmul(&h, &lw.wq)?, d, &[pos], cfg)?;
        let k = apply_rope(&kernels::matmul(&h, &lw.wk)?, d, &[pos], cfg)?;
        let v = kernels::matmul(&h, &lw.wv)?;
        for (g, hc) in cache.heads[l].iter_mut().enumerate() {
            hc.k_sl.extend_from_slice(&k.data()[g * d..(g + 1) * d]);
            hc.v_sl.extend_from_slice(&v.data()[g * d..(g + 1) * d]);
            hc.sl_positions.push(pos);
        }
        let started = Instant::now();
        let mut attn = Vec::with_capacity(cfg.n_q_heads * d);
        for qh in 0..cfg.n_q_heads {
            let hc = &cache.heads[l][qh / cfg.group_size()];
            attn.extend(head_attention(cache, hc, &q.data()[qh * d..(qh + 1) * d], pos, d));
        }
        if let Some(t) = cache.layer_seconds.as_mut() {
            t[l] += started.elapsed().as_secs_f64();
        }
        x = kernels::add(&x, &kernels::matmul(&single_row(attn), &lw.wo)?)?;
        let h = kernels::mul_row(&kernels::rmsnorm_rows(&x), &lw.ffn_norm)?;
        let gate = kernels::matmul(&h, &lw.w_gate)?.map(kernels::silu);
        let up = kernels::matmul(&h, &lw.w_up)?;
        x = kernels::add(&x, &kernels::matmul(&kernels::mul(&gate, &up)?, &lw.w_down)?)?;
    }
    cache.len += 1;
    cache.pending += 1;
    migrate_window(cache);
    output_for(model, x.data())
}

/// Prefill `prompt`, feed `forced` tokens, then greedily extend by
/// `n_greedy` tokens. Returns every step's output after the prompt and the
/// greedy tokens.
pub fn generate(
    model: &ToyTransformer,
    beta: &BinaryChannelMask,
    prompt: &[usize],
    forced: &[usize],
    n_greedy: usize,
    settings: CacheSettings,
) -> Result<(Vec<StepOutput>, Vec<usize>)> {
    let (mut cache, mut last) = prefill_and_partition(model, beta, prompt, settings)?;
    let mut outputs = Vec::new();
    for &t in forced {
        last = decode_step(model, &mut cache, t)?;
        outputs.push(last.clone());
    }
    let mut tokens = Vec::with_capacity(n_greedy);
    for _ in 0..n_greedy {
        let t = last.argmax();
        tokens.push(t);
        last = decode_step(model, &mut cache, t)?;
        outputs.push(last.clone());
    }
    Ok((outputs, tokens))
}

/// Copy of `beta` with the given `(layer, head)` pairs fully pruned.
pub fn with_streaming_heads(beta: &BinaryChannelMask, heads: &[(usize, usize)]) -> Result<BinaryChannelMask> {
    let mut out = beta.clone();
    for &(l, h) in heads {
        if l >= beta.dims.n_layers || h >= beta.dims.n_kv_heads {
            return Err(invalid(format!("head ({l}, {h}) out of range")));
        }
        let o = beta.dims.head_offset(l, h);
        out.bits[o..o + beta.dims.head_dim].fill(0);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadGroup {
    pub layer: usize,
    pub retained_count: usize,
    pub members: Vec<(usize, usize)>,
}

/// Heads of each layer grouped by retained channel count; layers in order,
/// counts descending within a layer.
pub fn group_heads(beta: &BinaryChannelMask) -> Vec<HeadGroup> {
    let mut out = Vec::new();
    for l in 0..beta.dims.n_layers {
        let counts: Vec<usize> = (0..beta.dims.n_kv_heads).map(|h| beta.head_count(l, h)).collect();
        let mut distinct = counts.clone();
        distinct.sort_unstable_by(|a, b| b.cmp(a));
        distinct.dedup();
        for c in distinct {
            out.push(HeadGroup {
                layer: l,
                retained_count: c,
                members: (0..counts.len()).filter(|&h| counts[h] == c).map(|h| (l, h)).collect(),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub seq_len: usize,
    pub bytes_per_element: usize,
    pub elements_k_baseline: usize,
    pub elements_k_pruned: usize,
    pub elements_v_baseline: usize,
    pub elements_v_pruned: usize,
    pub bytes_k_baseline: usize,
    pub bytes_k_pruned: usize,
    pub bytes_v_baseline: usize,
    pub bytes_v_pruned: usize,
    pub k_reduction_fraction: f64,
    pub v_reduction_fraction: f64,
    pub streaming_heads: usize,
}

/// Closed-form cache footprint for `seq_len` tokens under `beta`.
pub fn memory_report(
    beta: &BinaryChannelMask,
    sink: usize,
    window: usize,
    seq_len: usize,
    bytes_per_element: usize,
) -> MemoryReport {
    let dims = beta.dims;
    let d = dims.head_dim;
    let full_tokens = (sink + window).min(seq_len);
    let mid = seq_len - full_tokens;
    let baseline = dims.n_heads() * seq_len * d;
    let mut k = 0;
    let mut v = 0;
    let mut streaming = 0;
    for l in 0..dims.n_layers {
        for h in 0..dims.n_kv_heads {
            let kept = beta.head_count(l, h);
            k += full_tokens * d + mid * kept;
            if kept == 0 {
                streaming += 1;
                v += full_tokens * d;
            } else {
                v += seq_len * d;
            }
        }
    }
    let frac = |pruned: usize| {
        if baseline == 0 {
            0.0
        } else {
            baseline.saturating_sub(pruned) as f64 / baseline as f64
        }
    };
    MemoryReport {
        seq_len,
        bytes_per_element,
        elements_k_baseline: baseline,
        elements_k_pruned: k,
        elements_v_baseline: baseline,
        elements_v_pruned: v,
        bytes_k_baseline: baseline * bytes_per_element,
        bytes_k_pruned: k * bytes_per_element,
        bytes_v_baseline: baseline * bytes_per_element,
        bytes_v_pruned: v * bytes_per_element,
        k_reduction_fraction: frac(k),
        v_reduction_fraction: frac(v),
        streaming_heads: streaming,
    }
}

/// Wall-clock decode timing of the full cache against `beta`'s pruned
/// cache on the same prompt. Not deterministic; kept out of reports that
/// must be byte-stable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub prompt_len: usize,
    pub decoded: usize,
    pub baseline_layer_seconds: Vec<f64>,
    pub pruned_layer_seconds: Vec<f64>,
    pub baseline_total_seconds: f64,
    pub pruned_total_seconds: f64,
}

pub fn time_decode(
    model: &ToyTransformer,
    beta: &BinaryChannelMask,
    prompt: &[usize],
    n_tokens: usize,
    settings: CacheSettings,
) -> Result<TimingSample> {
    let full = BinaryChannelMask::full(beta.dims, 1)?;
    let run = |mask: &BinaryChannelMask| -> Result<(Vec<f64>, f64)> {
        let (mut cache, mut last) = prefill_and_partition(model, mask, prompt, settings)?;
        cache.enable_timing();
        let started = Instant::now();
        for _ in 0..n_tokens {
            let t = last.argmax();
            last = decode_step(model, &mut cache, t)?;
        }
        Ok((cache.layer_seconds.unwrap_or_default(), started.elapsed().as_secs_f64()))
    };
    let (bl, bt) = run(&full)?;
    let (pl, pt) = run(beta)?;
    Ok(TimingSample {
        prompt_len: prompt.len(),
        decoded: n_tokens,
        baseline_layer_seconds: bl,
        pruned_layer_seconds: pl,
        baseline_total_seconds: bt,
        pruned_total_seconds: pt,
    })
}
