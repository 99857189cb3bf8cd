//! Channel scaling factors, their Top-s%,r binarization, and the two
//! distillation stages that learn them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{build_masks, forward_full, forward_scaled, forward_scaled_graph, ModelConfig, ToyTransformer};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tasks::{TaskMix, TaskSample, TokenLayout};
use crate::tensor::{kernels, Graph, Tensor};

/// Values from the original training recipe. The toy defaults keep the
/// rates and shorten both stages.
pub const RECIPE_LAMBDA: f64 = 0.06;
pub const RECIPE_STEPS_STAGE1: usize = 2000;
pub const RECIPE_STEPS_STAGE2: usize = 200;
pub const RECIPE_LR_STAGE1: f64 = 0.02;

/// `(L, n_kv, d)` layout shared by factors and masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelDims {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl ChannelDims {
    pub fn of(config: &ModelConfig) -> Self {
        Self {
            n_layers: config.n_layers,
            n_kv_heads: config.n_kv_heads,
            head_dim: config.head_dim,
        }
    }

    pub fn total(&self) -> usize {
        self.n_layers * self.n_kv_heads * self.head_dim
    }

    pub fn n_heads(&self) -> usize {
        self.n_layers * self.n_kv_heads
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n_layers, self.n_kv_heads, self.head_dim]
    }

    /// Flat offset of the first channel of `(layer, head)`.
    pub fn head_offset(&self, layer: usize, head: usize) -> usize {
        (layer * self.n_kv_heads + head) * self.head_dim
    }

    fn from_shape(shape: &[usize]) -> Result<Self> {
        match shape {
            &[n_layers, n_kv_heads, head_dim] => Ok(Self {
                n_layers,
                n_kv_heads,
                head_dim,
            }),
            _ => Err(invalid(format!("expected an L x n_kv x d shape, got {shape:?}"))),
        }
    }
}

/// Continuous per-channel key scaling, `L x n_kv x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFactors {
    pub values: Tensor,
    pub trainable: bool,
}

impl ScalingFactors {
    pub fn ones(dims: ChannelDims) -> Self {
        Self {
            values: Tensor::ones(&dims.shape()),
            trainable: true,
        }
    }

    pub fn from_tensor(values: Tensor) -> Result<Self> {
        ChannelDims::from_shape(values.shape())?;
        if !values.all_finite() {
            return Err(invalid("scaling factors must be finite"));
        }
        Ok(Self {
            values,
            trainable: true,
        })
    }

    pub fn dims(&self) -> ChannelDims {
        ChannelDims::from_shape(self.values.shape()).expect("validated on construction")
    }

    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        let dims = self.dims();
        let o = dims.head_offset(layer, head);
        &self.values.data()[o..o + dims.head_dim]
    }

    pub fn mean_abs(&self) -> f64 {
        kernels::l1_norm(&self.values) / self.values.numel() as f64
    }
}

/// Channel-wise keep/prune mask, `L x n_kv x d` bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryChannelMask {
    pub dims: ChannelDims,
    pub bits: Vec<u8>,
    /// Alignment every per-head count is a multiple of.
    pub r: usize,
    /// Target kept fraction the mask was built for.
    pub keep_ratio: f64,
}

impl BinaryChannelMask {
    pub fn new(dims: ChannelDims, bits: Vec<u8>, r: usize, keep_ratio: f64) -> Result<Self> {
        let m = Self {
            dims,
            bits,
            r,
            keep_ratio,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn full(dims: ChannelDims, r: usize) -> Result<Self> {
        Self::new(dims, vec![1; dims.total()], r, 1.0)
    }

    pub fn empty(dims: ChannelDims, r: usize) -> Result<Self> {
        Self::new(dims, vec![0; dims.total()], r, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(invalid("alignment r must be positive"));
        }
        if self.bits.len() != self.dims.total() {
            return Err(invalid(format!(
                "mask holds {} bits, dims {:?} need {}",
                self.bits.len(),
                self.dims,
                self.dims.total()
            )));
        }
        if let Some(b) = self.bits.iter().find(|&&b| b > 1) {
            return Err(invalid(format!("mask bit {b} is not 0 or 1")));
        }
        let kr = self.keep_ratio;
        if !(0.0..=1.0).contains(&kr) {
            return Err(invalid(format!("keep_ratio {kr} outside [0, 1]")));
        }
        for l in 0..self.dims.n_layers {
            for h in 0..self.dims.n_kv_heads {
                let c = self.head_count(l, h);
                if c % self.r != 0 {
                    return Err(invalid(format!(
                        "head ({l}, {h}) keeps {c} channels, not a multiple of r={}",
                        self.r
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn head_bits(&self, layer: usize, head: usize) -> &[u8] {
        let o = self.dims.head_offset(layer, head);
        &self.bits[o..o + self.dims.head_dim]
    }

    pub fn head_count(&self, layer: usize, head: usize) -> usize {
        self.head_bits(layer, head).iter().map(|&b| b as usize).sum()
    }

    /// Kept channel indices of a head, ascending.
    pub fn kept_channels(&self, layer: usize, head: usize) -> Vec<usize> {
        self.head_bits(layer, head)
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_streaming(&self, layer: usize, head: usize) -> bool {
        self.head_count(layer, head) == 0
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// The mask as 0/1 scaling factors.
    pub fn as_factors(&self) -> Tensor {
        Tensor::new(
            self.dims.shape().to_vec(),
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("dims match")
    }
}

/// Nearest multiple of `r`, exact halves rounding up.
pub fn round_to_multiple(n: usize, r: usize) -> usize {
    r * ((2 * n + r) / (2 * r))
}

/// Binarize `alpha`: keep the global top `keep_ratio` fraction by value
/// (ties to the lower flat index), round each head's count to the nearest
/// multiple of `r`, then keep that many of the head's largest channels.
pub fn top_s_r(alpha: &ScalingFactors, keep_ratio: f64, r: usize) -> Result<BinaryChannelMask> {
    if !(0.0..=1.0).contains(&keep_ratio) {
        return Err(invalid(format!("keep_ratio {keep_ratio} outside [0, 1]")));
    }
    let dims = alpha.dims();
    let d = dims.head_dim;
    if r == 0 || r > d {
        return Err(invalid(format!("alignment r={r} must lie in 1..={d}")));
    }
    let vals = alpha.values.data();
    if vals.iter().any(|v| v.is_nan()) {
        return Err(invalid("scaling factors contain NaN"));
    }
    let total = dims.total();
    let k = ((keep_ratio * total as f64 + 0.5).floor() as usize).min(total);

    // partial_cmp so that -0.0 and 0.0 tie; NaN was rejected above
    let by_value = |a: &usize, b: &usize| vals[*b].partial_cmp(&vals[*a]).expect("no NaN").then(a.cmp(b));
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(by_value);
    let mut provisional = vec![0usize; dims.n_heads()];
    for &i in &order[..k] {
        provisional[i / d] += 1;
    }

    let cap = r * (d / r);
    let mut bits = vec![0u8; total];
    for (head, &n) in provisional.iter().enumerate() {
        let keep = round_to_multiple(n, r).min(cap);
        let base = head * d;
        let mut local: Vec<usize> = (base..base + d).collect();
        local.sort_by(by_value);
        for &i in &local[..keep] {
            bits[i] = 1;
        }
    }
    BinaryChannelMask::new(dims, bits, r, keep_ratio)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    /// Retained channels per `[layer][head]`.
    pub counts: Vec<Vec<usize>>,
    pub streaming: Vec<(usize, usize)>,
    pub fraction: f64,
}

pub fn mask_stats(beta: &BinaryChannelMask) -> MaskStats {
    let dims = beta.dims;
    let counts: Vec<Vec<usize>> = (0..dims.n_layers)
        .map(|l| (0..dims.n_kv_heads).map(|h| beta.head_count(l, h)).collect())
        .collect();
    let streaming = counts
        .iter()
        .enumerate()
        .flat_map(|(l, row)| row.iter().enumerate().filter(|(_, &c)| c == 0).map(move |(h, _)| (l, h)))
        .collect();
    MaskStats {
        counts,
        streaming,
        fraction: beta.kept() as f64 / dims.total() as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub lambda: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub sink: usize,
    pub window: usize,
    pub seq_len_range: (usize, usize),
    pub batch: usize,
    pub seed: u64,
    /// Held-out samples used to pick the deployed stage-2 mask among the
    /// masks visited during training. 0 keeps the final-step mask.
    #[serde(default)]
    pub select_samples: usize,
}

/// First sample index of the held-out selection set within the stream.
pub const SELECT_OFFSET: u64 = 1 << 40;

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            lambda: RECIPE_LAMBDA,
            lr_stage1: RECIPE_LR_STAGE1,
            lr_stage2: RECIPE_LR_STAGE1 / 2.0,
            steps_stage1: RECIPE_STEPS_STAGE1 / 10,
            steps_stage2: RECIPE_STEPS_STAGE2 / 5,
            sink: 4,
            window: 16,
            seq_len_range: (256, 2048),
            batch: 1,
            seed: 0,
            select_samples: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.lr_stage1 > 0.0) || !(self.lr_stage2 > 0.0) {
            return Err(invalid("lambda must be non-negative and learning rates positive"));
        }
        if self.batch == 0 || self.window == 0 {
            return Err(invalid("batch and window must be positive"));
        }
        if self.seq_len_range.0 > self.seq_len_range.1 {
            return Err(invalid("seq_len_range is inverted"));
        }
        Ok(())
    }

    /// The training stream: `base` task kinds resampled over this spec's
    /// length range and seed.
    pub fn stream(&self, base: &TaskMix) -> TaskMix {
        TaskMix {
            seq_len_range: self.seq_len_range,
            seed: self.seed,
            ..base.clone()
        }
    }
}

/// `||h_full - h_scaled||^2 + lambda * ||alpha||_1`.
pub fn stage1_loss(h_full: &Tensor, h_scaled: &Tensor, alpha: &Tensor, lambda: f64) -> Result<f64> {
    let diff = kernels::sub(h_full, h_scaled)?;
    let sq: f64 = diff.data().iter().map(|x| x * x).sum();
    Ok(sq + lambda * kernels::l1_norm(alpha))
}

/// Per-step losses of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    /// Total objective.
    pub loss: Vec<f64>,
    /// Distillation term alone.
    pub distill: Vec<f64>,
    /// Step whose mask was kept, when selection ran.
    #[serde(default)]
    pub selected_step: Option<usize>,
}

/// Distillation loss and its gradient w.r.t. the `[L, n_kv*d]` factors for
/// one sample.
pub(crate) fn distill_grad(
    model: &ToyTransformer,
    sample: &TaskSample,
    factors: &Tensor,
    sink: usize,
    window: usize,
) -> Result<(f64, Tensor)> {
    let cfg = &model.config;
    let tokens = sample.tokens();
    let n_ctx = sample.ctx_tokens.len();
    let masks = build_masks(n_ctx, sample.ans_tokens.len(), sink.min(n_ctx), window)?;
    let full = forward_full(model, &tokens, masks.n_ans)?;
    let g = Graph::new();
    let f = g.param(factors.clone().reshape(&[cfg.n_layers, cfg.kv_width()])?);
    let h = forward_scaled_graph(&g, model, &full, &tokens, f, &masks)?;
    let target = g.leaf(full.h_last(), false);
    let diff = g.sub(h, target)?;
    let loss = g.sum(g.mul(diff, diff)?)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let grad = grads
        .take(f)
        .unwrap_or_else(|| Tensor::zeros(&[cfg.n_layers, cfg.kv_width()]))
        .reshape(factors.shape())?;
    Ok((value, grad))
}

/// Stage-1 objective on one sample and its gradient w.r.t. `alpha`. The L1
/// term uses the sign subgradient, which is exact away from zero.
pub fn stage1_gradient(
    model: &ToyTransformer,
    sample: &TaskSample,
    alpha: &ScalingFactors,
    lambda: f64,
    sink: usize,
    window: usize,
) -> Result<(f64, Tensor)> {
    let (distill, mut grad) = distill_grad(model, sample, &alpha.values, sink, window)?;
    for (g, a) in grad.data_mut().iter_mut().zip(alpha.values.data()) {
        *g += lambda * kernels::sign(*a);
    }
    Ok((distill + lambda * kernels::l1_norm(&alpha.values), grad))
}

/// Mean distillation loss of `factors` over `samples`, without gradients.
pub fn distill_loss(model: &ToyTransformer, samples: &[TaskSample], factors: &Tensor, sink: usize, window: usize) -> Result<f64> {
    use rayon::prelude::*;
    if samples.is_empty() {
        return Err(invalid("distill_loss needs at least one sample"));
    }
    let losses = samples
        .par_iter()
        .map(|s| {
            let tokens = s.tokens();
            let n_ctx = s.ctx_tokens.len();
            let masks = build_masks(n_ctx, s.ans_tokens.len(), sink.min(n_ctx), window)?;
            let full = forward_full(model, &tokens, masks.n_ans)?;
            let h = forward_scaled(model, &tokens, factors, &masks)?;
            stage1_loss(&full.h_last(), &h, &Tensor::zeros(&[1]), 0.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn batch_distill(
    model: &ToyTransformer,
    stream: &TaskMix,
    layout: &TokenLayout,
    step: usize,
    spec: &TrainSpec,
    factors: &Tensor,
) -> Result<(f64, Tensor)> {
    use rayon::prelude::*;
    let base = (step * spec.batch) as u64;
    let parts = (0..spec.batch as u64)
        .into_par_iter()
        .map(|i| {
            let s = stream.sample(base + i, layout)?;
            distill_grad(model, &s, factors, spec.sink, spec.window)
        })
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / spec.batch as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(factors.shape());
    for (l, g) in &parts {
        loss += l * inv;
        for (a, x) in grad.data_mut().iter_mut().zip(g.data()) {
            *a += x * inv;
        }
    }
    Ok((loss, grad))
}

/// Learns continuous factors with distillation plus L1 shrinkage. Model
/// weights stay frozen; only alpha is updated.
pub fn stage1_train(model: &ToyTransformer, tasks: &TaskMix, spec: &TrainSpec) -> Result<(ScalingFactors, TrainCurve)> {
    spec.validate()?;
    let layout = TokenLayout::for_vocab(model.config.vocab)?;
    let stream = spec.stream(tasks);
    let mut alpha = ScalingFactors::ones(ChannelDims::of(&model.config));
    let mut state = AdamState::new(alpha.values.numel());
    let adam = AdamConfig::with_lr(spec.lr_stage1);
    let mut curve = TrainCurve::default();
    for step in 0..spec.steps_stage1 {
        let (distill, mut grad) = batch_distill(model, &stream, &layout, step, spec, &alpha.values)?;
        let loss = distill + spec.lambda * kernels::l1_norm(&alpha.values);
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        for (g, a) in grad.data_mut().iter_mut().zip(alpha.values.data()) {
            *g += spec.lambda * kernels::sign(*a);
        }
        adam_step(alpha.values.data_mut(), grad.data(), &mut state, &adam)?;
        curve.loss.push(loss);
        curve.distill.push(distill);
        if step % 20 == 0 {
            log::info!("stage1 step {step}: loss {loss:.5} distill {distill:.5}");
        }
    }
    Ok((alpha, curve))
}

/// Refines alpha under its own binarization: each step distills through
/// `beta = top_s_r(alpha)` and applies the beta gradient to alpha directly.
///
/// With `select_samples > 0` the returned mask is, among the masks used at
/// steps 1..=steps_stage2 and the final one, the one with the lowest
/// held-out distillation loss. Ties go to the later mask.
pub fn stage2_train(
    model: &ToyTransformer,
    tasks: &TaskMix,
    alpha: &ScalingFactors,
    keep_ratio: f64,
    r: usize,
    spec: &TrainSpec,
) -> Result<(BinaryChannelMask, ScalingFactors, TrainCurve)> {
    spec.validate()?;
    let layout = TokenLayout::for_vocab(model.config.vocab)?;
    let stream = spec.stream(tasks);
    let held = (0..spec.select_samples as u64)
        .map(|i| stream.sample(SELECT_OFFSET + i, &layout))
        .collect::<Result<Vec<_>>>()?;
    let mut alpha = alpha.clone();
    let mut state = AdamState::new(alpha.values.numel());
    let adam = AdamConfig::with_lr(spec.lr_stage2);
    let mut curve = TrainCurve::default();
    let mut seen: Vec<(Vec<u8>, f64)> = Vec::new();
    let mut best: Option<(f64, usize, BinaryChannelMask)> = None;
    let mut consider = |beta: &BinaryChannelMask, step: usize| -> Result<()> {
        if held.is_empty() {
            return Ok(());
        }
        let loss = match seen.iter().find(|(b, _)| *b == beta.bits) {
            Some(&(_, l)) => l,
            None => {
                let l = distill_loss(model, &held, &beta.as_factors(), spec.sink, spec.window)?;
                seen.push((beta.bits.clone(), l));
                l
            }
        };
        if best.as_ref().is_none_or(|(b, _, _)| loss <= *b) {
            best = Some((loss, step, beta.clone()));
        }
        Ok(())
    };
    // offset so stage 2 does not replay stage 1's samples
    let offset = spec.steps_stage1;
    for step in 0..spec.steps_stage2 {
        let beta = top_s_r(&alpha, keep_ratio, r)?;
        if step > 0 {
            consider(&beta, step)?;
        }
        let (loss, grad) = batch_distill(model, &stream, &layout, offset + step, spec, &beta.as_factors())?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        adam_step(alpha.values.data_mut(), grad.data(), &mut state, &adam)?;
        curve.loss.push(loss);
        curve.distill.push(loss);
        if step % 20 == 0 {
            log::info!("stage2 step {step}: distill {loss:.5}");
        }
    }
    let last = top_s_r(&alpha, keep_ratio, r)?;
    consider(&last, spec.steps_stage2)?;
    let beta = match best {
        Some((_, step, b)) => {
            curve.selected_step = Some(step);
            b
        }
        None => last,
    };
    Ok((beta, alpha, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(l: usize, h: usize, d: usize) -> ChannelDims {
        ChannelDims {
            n_layers: l,
            n_kv_heads: h,
            head_dim: d,
        }
    }

    fn factors(d: ChannelDims, v: Vec<f64>) -> ScalingFactors {
        ScalingFactors::from_tensor(Tensor::new(d.shape().to_vec(), v).unwrap()).unwrap()
    }

    #[test]
    fn rounding_halves_up() {
        assert_eq!(round_to_multiple(0, 4), 0);
        assert_eq!(round_to_multiple(1, 4), 0);
        assert_eq!(round_to_multiple(2, 4), 4);
        assert_eq!(round_to_multiple(5, 4), 4);
        assert_eq!(round_to_multiple(6, 4), 8);
        assert_eq!(round_to_multiple(24, 16), 32);
        assert_eq!(round_to_multiple(23, 16), 16);
    }

    #[test]
    fn two_head_example() {
        let d = dims(1, 2, 8);
        let a = factors(
            d,
            vec![8., 7., 6., 5., 4., 3., 2., 1., 16., 15., 14., 13., 0.4, 0.3, 0.2, 0.1],
        );
        let m = top_s_r(&a, 0.5, 4).unwrap();
        assert_eq!(m.kept_channels(0, 0), vec![0, 1, 2, 3]);
        assert_eq!(m.kept_channels(0, 1), vec![0, 1, 2, 3]);
        let s = mask_stats(&m);
        assert_eq!(s.counts, vec![vec![4, 4]]);
        assert!(s.streaming.is_empty());
        assert_eq!(s.fraction, 0.5);
    }

    #[test]
    fn extremes() {
        let d = dims(2, 2, 8);
        let a = factors(d, (0..32).map(|i| (i as f64 * 0.7).cos()).collect());
        let all = top_s_r(&a, 1.0, 4).unwrap();
        assert!(all.bits.iter().all(|&b| b == 1));
        let none = top_s_r(&a, 0.0, 4).unwrap();
        assert!(none.bits.iter().all(|&b| b == 0));
        let s = mask_stats(&none);
        assert_eq!(s.streaming.len(), 4);
        assert_eq!(s.fraction, 0.0);
        assert!(top_s_r(&a, 1.5, 4).is_err());
        assert!(top_s_r(&a, 0.5, 9).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let d = dims(1, 2, 4);
        let a = factors(d, vec![1.0; 8]);
        let m = top_s_r(&a, 0.5, 1).unwrap();
        assert_eq!(m.bits, vec![1, 1, 1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn non_multiple_count_rejected() {
        let d = dims(1, 1, 4);
        assert!(BinaryChannelMask::new(d, vec![1, 0, 0, 0], 2, 0.25).is_err());
        assert!(BinaryChannelMask::new(d, vec![1, 2, 0, 0], 1, 0.5).is_err());
    }

    #[test]
    fn stage1_loss_arithmetic() {
        let h = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        assert_eq!(stage1_loss(&h, &h, &Tensor::zeros(&[2, 2, 4]), 0.06).unwrap(), 0.0);
        let ones = Tensor::ones(&[2, 2, 4]);
        assert!((stage1_loss(&h, &h, &ones, 0.06).unwrap() - 0.06 * 16.0).abs() < 1e-15);
        let h2 = Tensor::new(vec![2, 3], vec![0.0, 0.2, 0.5, -0.4, 0.5, 0.0]).unwrap();
        let expected = 0.01 + 0.04 + 0.36 + 0.06 * 16.0;
        assert!((stage1_loss(&h, &h2, &ones, 0.06).unwrap() - expected).abs() < 1e-14);
        assert!(stage1_loss(&h, &Tensor::zeros(&[3, 2]), &ones, 0.0).is_err());
    }
}
