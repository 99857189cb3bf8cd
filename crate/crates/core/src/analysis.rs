//! Channel importance measurements: norm ratios and their staticity,
//! norm-based baseline masks, channel-pair frequency profiles and the
//! per-head high-frequency ratio.
//!
//! Matrix norms are Frobenius. For GQA the queries of every head sharing a
//! KV head are stacked, so each KV head gets one score per channel.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mask::{top_s_r, BinaryChannelMask, ChannelDims, ScalingFactors};
use crate::model::{forward_full, ForwardRecord, ModelConfig, ToyTransformer};
use crate::tensor::{kernels, Tensor};

pub const DEFAULT_OBS_WINDOW: usize = 64;

/// Per-channel norm ratios, flat in `(layer, head, channel)` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNormVector {
    pub dims: ChannelDims,
    pub values: Vec<f64>,
    pub obs_window: usize,
    /// Set when some head had an all-zero logit matrix.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadFreqProfile {
    pub dims: ChannelDims,
    /// One ratio per `(layer, head)`.
    pub w_hf: Vec<f64>,
    /// Channel pairs `0..high_boundary` count as high frequency.
    pub high_boundary: usize,
    pub degenerate: bool,
}

/// Gram matrix `X^T X` restricted to `channels`.
fn gram(x: &Tensor, channels: &[usize]) -> Vec<f64> {
    let n = channels.len();
    let mut g = vec![0.0; n * n];
    for r in 0..x.rows() {
        let row = x.row(r);
        for (a, &ca) in channels.iter().enumerate() {
            let xa = row[ca];
            for (b, &cb) in channels.iter().enumerate() {
                g[a * n + b] += xa * row[cb];
            }
        }
    }
    g
}

/// `||Q_S K_S^T||_F^2` via `tr((Q_S^T Q_S)(K_S^T K_S))`.
fn logit_norm_sq(q: &Tensor, k: &Tensor, channels: &[usize]) -> f64 {
    let gq = gram(q, channels);
    let gk = gram(k, channels);
    gq.iter().zip(&gk).map(|(a, b)| a * b).sum()
}

fn col_norm(x: &Tensor, c: usize) -> f64 {
    (0..x.rows()).map(|r| x.at2(r, c).powi(2)).sum::<f64>().sqrt()
}

/// `r_i = ||Q_i K_i^T|| / ||Q K^T||` for every column `i`; the rank-one
/// numerator factors as `||Q_i|| ||K_i||`. Zero denominators give zeros and
/// `true` in the flag.
pub fn norm_ratios_qk(q: &Tensor, k: &Tensor) -> Result<(Vec<f64>, bool)> {
    if q.cols() != k.cols() {
        return Err(invalid(format!("query width {} != key width {}", q.cols(), k.cols())));
    }
    let all: Vec<usize> = (0..q.cols()).collect();
    let denom = logit_norm_sq(q, k, &all).sqrt();
    if denom == 0.0 {
        return Ok((vec![0.0; q.cols()], true));
    }
    Ok((all.iter().map(|&i| col_norm(q, i) * col_norm(k, i) / denom).collect(), false))
}

/// Channels of the high-frequency half: pairs `j < boundary`, both members.
pub fn high_channels(head_dim: usize, boundary: usize) -> Vec<usize> {
    let half = head_dim / 2;
    (0..boundary).chain(half..half + boundary).collect()
}

/// `||Q_H K_H^T|| / ||Q K^T||` over high-frequency channels `H`.
pub fn whf_qk(q: &Tensor, k: &Tensor, boundary: usize) -> Result<(f64, bool)> {
    let d = q.cols();
    if d != k.cols() || d % 2 != 0 {
        return Err(invalid("whf needs equal, even query and key widths"));
    }
    if boundary == 0 || boundary >= d / 2 {
        return Err(invalid(format!("high boundary {boundary} must lie in 1..{}", d / 2)));
    }
    let all: Vec<usize> = (0..d).collect();
    let denom = logit_norm_sq(q, k, &all);
    if denom == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((logit_norm_sq(q, k, &high_channels(d, boundary)) / denom).sqrt(), false))
}

/// Last `rows` query rows of every head in KV group `g`, stacked.
fn group_queries(rec: &ForwardRecord, cfg: &ModelConfig, layer: usize, g: usize, rows: usize) -> Result<Tensor> {
    let d = cfg.head_dim;
    let q = &rec.layers[layer].q;
    let t = q.rows();
    let rows = rows.min(t);
    let tail = kernels::slice_rows(q, t - rows, rows)?;
    let parts: Vec<Tensor> = (g * cfg.group_size()..(g + 1) * cfg.group_size())
        .map(|h| kernels::slice_cols(&tail, h * d, d))
        .collect::<Result<_>>()?;
    kernels::concat_rows(&parts.iter().collect::<Vec<_>>())
}

fn group_keys(rec: &ForwardRecord, cfg: &ModelConfig, layer: usize, g: usize) -> Result<Tensor> {
    kernels::slice_cols(&rec.layers[layer].k, g * cfg.head_dim, cfg.head_dim)
}

/// Channel norm ratios from the last `obs_window` queries of `tokens`
/// against all of its keys.
pub fn channel_norm_ratios(model: &ToyTransformer, tokens: &[usize], obs_window: usize) -> Result<ChannelNormVector> {
    if obs_window == 0 {
        return Err(invalid("obs_window must be positive"));
    }
    let cfg = &model.config;
    let rec = forward_full(model, tokens, 0)?;
    let mut values = Vec::with_capacity(cfg.n_channels());
    let mut degenerate = false;
    for l in 0..cfg.n_layers {
        for g in 0..cfg.n_kv_heads {
            let q = group_queries(&rec, cfg, l, g, obs_window)?;
            let k = group_keys(&rec, cfg, l, g)?;
            let (r, deg) = norm_ratios_qk(&q, &k)?;
            degenerate |= deg;
            values.extend(r);
        }
    }
    if degenerate {
        log::warn!("zero logit matrix while computing channel norm ratios");
    }
    Ok(ChannelNormVector {
        dims: ChannelDims::of(cfg),
        values,
        obs_window,
        degenerate,
    })
}

/// How many trailing query positions feed the high-frequency ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Last,
    Window(usize),
}

pub fn high_freq_ratio(
    model: &ToyTransformer,
    tokens: &[usize],
    high_boundary: usize,
    mode: QueryMode,
) -> Result<HeadFreqProfile> {
    let cfg = &model.config;
    let rows = match mode {
        QueryMode::Last => 1,
        QueryMode::Window(0) => return Err(invalid("query window must be positive")),
        QueryMode::Window(w) => w,
    };
    let rec = forward_full(model, tokens, 0)?;
    let mut w_hf = Vec::with_capacity(cfg.n_layers * cfg.n_kv_heads);
    let mut degenerate = false;
    for l in 0..cfg.n_layers {
        for g in 0..cfg.n_kv_heads {
            let q = group_queries(&rec, cfg, l, g, rows)?;
            let k = group_keys(&rec, cfg, l, g)?;
            let (w, deg) = whf_qk(&q, &k, high_boundary)?;
            degenerate |= deg;
            w_hf.push(w);
        }
    }
    if degenerate {
        log::warn!("zero logit matrix while computing high-frequency ratios");
    }
    Ok(HeadFreqProfile {
        dims: ChannelDims::of(cfg),
        w_hf,
        high_boundary,
        degenerate,
    })
}

/// Pair-index profile of per-channel values: entry `j` is the mean of
/// channels `j` and `j + d/2` over every layer and head.
pub fn freq_profile(dims: ChannelDims, values: &[f64]) -> Result<Vec<f64>> {
    let d = dims.head_dim;
    if d % 2 != 0 {
        return Err(invalid(format!("head_dim {d} is odd")));
    }
    if values.len() != dims.total() {
        return Err(invalid(format!("{} values for dims {dims:?}", values.len())));
    }
    let half = d / 2;
    let mut out = vec![0.0; half];
    for head in values.chunks_exact(d) {
        for j in 0..half {
            out[j] += head[j] + head[j + half];
        }
    }
    let n = (2 * dims.n_heads()) as f64;
    Ok(out.into_iter().map(|x| x / n).collect())
}

/// Retained ratio per channel-pair index.
pub fn freq_profile_mask(beta: &BinaryChannelMask) -> Result<Vec<f64>> {
    let v: Vec<f64> = beta.bits.iter().map(|&b| b as f64).collect();
    freq_profile(beta.dims, &v)
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid("pearson needs two equal-length vectors of length >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(invalid("pearson undefined for a zero-variance vector"));
    }
    // sqrt of the product keeps the identical-vector case exactly 1
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Averages norm ratios over `samples` and selects with the same global
/// top plus per-head alignment rule as the learned mask.
pub fn static_norm_mask(
    model: &ToyTransformer,
    samples: &[Vec<usize>],
    keep_ratio: f64,
    r: usize,
    obs_window: usize,
) -> Result<BinaryChannelMask> {
    if samples.is_empty() {
        return Err(invalid("static norm mask needs at least one sample"));
    }
    let dims = ChannelDims::of(&model.config);
    let mut mean = vec![0.0; dims.total()];
    for s in samples {
        let v = channel_norm_ratios(model, s, obs_window)?;
        for (m, x) in mean.iter_mut().zip(&v.values) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= samples.len() as f64;
    }
    static_mask_from_scores(dims, &mean, keep_ratio, r)
}

pub fn static_mask_from_scores(dims: ChannelDims, scores: &[f64], keep_ratio: f64, r: usize) -> Result<BinaryChannelMask> {
    let f = ScalingFactors::from_tensor(Tensor::new(dims.shape().to_vec(), scores.to_vec())?)?;
    top_s_r(&f, keep_ratio, r)
}

/// Per-head channel budget of a dynamic mask.
#[derive(Clone, Debug, PartialEq)]
pub enum Budget {
    /// `round(keep_ratio * d)` channels in every head.
    Uniform(f64),
    /// Explicit counts in `(layer, head)` order, e.g. from a learned mask.
    PerHead(Vec<usize>),
}

/// Keeps the top `counts[h]` channels of each head by score (ties to the
/// lower index). The result has alignment 1.
pub fn mask_from_head_budgets(dims: ChannelDims, scores: &[f64], counts: &[usize], keep_ratio: f64) -> Result<BinaryChannelMask> {
    if scores.len() != dims.total() || counts.len() != dims.n_heads() {
        return Err(invalid("scores or budgets do not match dims"));
    }
    let d = dims.head_dim;
    let mut bits = vec![0u8; dims.total()];
    for (h, &c) in counts.iter().enumerate() {
        if c > d {
            return Err(invalid(format!("budget {c} exceeds head_dim {d}")));
        }
        let base = h * d;
        let mut idx: Vec<usize> = (base..base + d).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for &i in &idx[..c] {
            bits[i] = 1;
        }
    }
    BinaryChannelMask::new(dims, bits, 1, keep_ratio)
}

/// Per-input mask scored from the last `q_window` queries of `tokens` only.
pub fn dynamic_norm_mask(model: &ToyTransformer, tokens: &[usize], budget: &Budget, q_window: usize) -> Result<BinaryChannelMask> {
    let scores = channel_norm_ratios(model, tokens, q_window)?;
    let dims = scores.dims;
    let (counts, keep) = match budget {
        Budget::Uniform(keep) => {
            if !(0.0..=1.0).contains(keep) {
                return Err(invalid(format!("keep_ratio {keep} outside [0, 1]")));
            }
            let c = ((keep * dims.head_dim as f64 + 0.5).floor() as usize).min(dims.head_dim);
            (vec![c; dims.n_heads()], *keep)
        }
        Budget::PerHead(c) => {
            let kept: usize = c.iter().sum();
            (c.clone(), kept as f64 / dims.total() as f64)
        }
    };
    mask_from_head_budgets(dims, &scores.values, &counts, keep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamingOrder {
    Highest,
    Lowest,
    Random(u64),
}

impl StreamingOrder {
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        match s {
            "highest" => Ok(Self::Highest),
            "lowest" => Ok(Self::Lowest),
            "random" => Ok(Self::Random(seed)),
            _ => Err(invalid(format!("unknown streaming order '{s}' (highest|lowest|random)"))),
        }
    }
}

/// Picks `round(fraction * heads)` heads by w_hf order and returns them as
/// `(layer, head)` pairs in index order.
pub fn convert_streaming_by_whf(profile: &HeadFreqProfile, fraction: f64, order: StreamingOrder) -> Result<Vec<(usize, usize)>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(format!("fraction {fraction} outside [0, 1]")));
    }
    let w = &profile.w_hf;
    let n = ((fraction * w.len() as f64 + 0.5).floor() as usize).min(w.len());
    let mut idx: Vec<usize> = (0..w.len()).collect();
    match order {
        StreamingOrder::Highest => idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b))),
        StreamingOrder::Lowest => idx.sort_by(|&a, &b| w[a].total_cmp(&w[b]).then(a.cmp(&b))),
        StreamingOrder::Random(seed) => idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    let mut chosen: Vec<usize> = idx[..n].to_vec();
    chosen.sort_unstable();
    let h = profile.dims.n_kv_heads;
    Ok(chosen.into_iter().map(|i| (i / h, i % h)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticityReport {
    pub labels: Vec<String>,
    pub vectors: Vec<ChannelNormVector>,
    /// `matrix[i][j] = pearson(vectors[i], vectors[j])`.
    pub matrix: Vec<Vec<f64>>,
}

pub fn staticity(model: &ToyTransformer, inputs: &[(String, Vec<usize>)], obs_window: usize) -> Result<StaticityReport> {
    let vectors = inputs
        .iter()
        .map(|(_, t)| channel_norm_ratios(model, t, obs_window))
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = vec![vec![0.0; vectors.len()]; vectors.len()];
    for i in 0..vectors.len() {
        for j in 0..vectors.len() {
            matrix[i][j] = pearson(&vectors[i].values, &vectors[j].values)?;
        }
    }
    Ok(StaticityReport {
        labels: inputs.iter().map(|(l, _)| l.clone()).collect(),
        vectors,
        matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_channel_ratio_is_one() {
        let q = Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let k = Tensor::new(vec![2, 1], vec![1.5, 0.3]).unwrap();
        let (r, deg) = norm_ratios_qk(&q, &k).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-15);
        assert!(!deg);
    }

    #[test]
    fn zero_key_column_and_zero_logits() {
        let q = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let (r, _) = norm_ratios_qk(&q, &k).unwrap();
        assert_eq!(r[1], 0.0);
        let (z, deg) = norm_ratios_qk(&q, &Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        assert!(deg);
    }

    #[test]
    fn pearson_hand_values() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 5.0, 9.0];
        // means 2.5, 5; deviations (-1.5,-.5,.5,1.5) and (-3,-1,0,4)
        let expected = 11.0 / (5.0f64.sqrt() * 26.0f64.sqrt());
        assert!((pearson(&a, &b).unwrap() - expected).abs() < 1e-15);
        assert_eq!(pearson(&a, &a).unwrap(), 1.0);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_eq!(pearson(&a, &neg).unwrap(), -1.0);
        assert!(pearson(&a, &[1.0; 4]).is_err());
    }

    #[test]
    fn whf_extremes() {
        // d = 8, boundary 2: high channels {0, 1, 4, 5}
        let q = Tensor::new(vec![1, 8], (1..=8).map(|x| x as f64).collect()).unwrap();
        let k_high = Tensor::new(vec![1, 8], vec![1., 1., 0., 0., 1., 1., 0., 0.]).unwrap();
        assert!((whf_qk(&q, &k_high, 2).unwrap().0 - 1.0).abs() < 1e-15);
        let k_low = Tensor::new(vec![1, 8], vec![0., 0., 1., 1., 0., 0., 1., 1.]).unwrap();
        assert_eq!(whf_qk(&q, &k_low, 2).unwrap().0, 0.0);
        assert!(whf_qk(&q, &k_low, 4).is_err());
    }

    #[test]
    fn profile_steps_and_conservation() {
        let dims = ChannelDims {
            n_layers: 2,
            n_kv_heads: 1,
            head_dim: 8,
        };
        let head = [0., 0., 1., 1., 0., 0., 1., 1.];
        let v: Vec<f64> = head.iter().chain(head.iter()).cloned().collect();
        assert_eq!(freq_profile(dims, &v).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
        let odd = ChannelDims { head_dim: 3, ..dims };
        assert!(freq_profile(odd, &[0.0; 6]).is_err());
    }

    #[test]
    fn streaming_selection() {
        let p = HeadFreqProfile {
            dims: ChannelDims {
                n_layers: 2,
                n_kv_heads: 2,
                head_dim: 8,
            },
            w_hf: vec![0.3, 0.9, 0.1, 0.9],
            high_boundary: 2,
            degenerate: false,
        };
        assert!(convert_streaming_by_whf(&p, 0.0, StreamingOrder::Highest).unwrap().is_empty());
        assert_eq!(convert_streaming_by_whf(&p, 1.0, StreamingOrder::Lowest).unwrap().len(), 4);
        assert_eq!(convert_streaming_by_whf(&p, 0.25, StreamingOrder::Highest).unwrap(), vec![(0, 1)]);
        assert_eq!(convert_streaming_by_whf(&p, 0.5, StreamingOrder::Lowest).unwrap(), vec![(0, 0), (1, 0)]);
        let r1 = convert_streaming_by_whf(&p, 0.5, StreamingOrder::Random(3)).unwrap();
        assert_eq!(r1, convert_streaming_by_whf(&p, 0.5, StreamingOrder::Random(3)).unwrap());
    }

    #[test]
    fn budgets_respected() {
        let dims = ChannelDims {
            n_layers: 1,
            n_kv_heads: 2,
            head_dim: 4,
        };
        let scores = [0.1, 0.4, 0.3, 0.2, 0.9, 0.8, 0.7, 0.6];
        let m = mask_from_head_budgets(dims, &scores, &[2, 0], 0.25).unwrap();
        assert_eq!(m.bits, vec![0, 1, 1, 0, 0, 0, 0, 0]);
    }
}
