use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{forward_generic, logits_for, ModelView};
use super::ToyTransformer;
use crate::error::{invalid, Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tasks::{TaskMix, TaskSample, TokenLayout};
use crate::tensor::{kernels, Backend, Eager, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Linear warmup length; the rate then follows a cosine down to 10%.
    pub warmup: usize,
    /// Global gradient norm clip, 0 disables.
    pub clip: f64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 3e-3,
            batch: 16,
            warmup: 100,
            clip: 1.0,
        }
    }
}

impl PretrainSpec {
    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup).max(1) as f64;
        let t = (step - self.warmup) as f64 / span;
        self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean per-target cross-entropy of each step's batch.
    pub losses: Vec<f64>,
}

/// Answer-row logits and the targets re-indexed into them.
fn answer_logits<B: Backend>(
    b: &B,
    view: &ModelView<B::T>,
    model: &ToyTransformer,
    sample: &TaskSample,
) -> Result<(B::T, Vec<(usize, usize)>)> {
    let tokens = sample.tokens();
    let n_ctx = sample.ctx_tokens.len();
    let targets: Vec<(usize, usize)> = sample.answer_targets().into_iter().map(|(r, t)| (r - n_ctx, t)).collect();
    if targets.is_empty() {
        return Err(invalid("sample has no answer targets"));
    }
    let (h, _) = forward_generic(b, view, &model.config, &tokens, false)?;
    let h_ans = b.slice_rows(&h, n_ctx, targets.len())?;
    Ok((logits_for(b, view, &h_ans)?, targets))
}

/// Summed answer-token cross-entropy and the number of targets.
pub fn answer_loss(model: &ToyTransformer, sample: &TaskSample) -> Result<(f64, usize)> {
    let view = ModelView::build(model, Tensor::clone);
    let (logits, targets) = answer_logits(&Eager, &view, model, sample)?;
    let (loss, _) = kernels::cross_entropy(&logits, &targets)?;
    Ok((loss, targets.len()))
}

fn sample_gradients(model: &ToyTransformer, sample: &TaskSample) -> Result<(f64, usize, Vec<Tensor>)> {
    let g = Graph::new();
    let view = ModelView::build(model, |t| g.param(t.clone()));
    let (logits, targets) = answer_logits(&g, &view, model, sample)?;
    let loss = g.cross_entropy(logits, &targets)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let out = view
        .flat()
        .into_iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(&g.value(v).shape().to_vec())))
        .collect();
    Ok((value, targets.len(), out))
}

/// Next-token training on answer tokens only. Samples are drawn from `mix`
/// by index, so the run is a pure function of the model, mix and spec.
pub fn pretrain(model: &ToyTransformer, mix: &TaskMix, spec: &PretrainSpec) -> Result<(ToyTransformer, PretrainLog)> {
    if spec.steps > 0 && (spec.batch == 0 || !(spec.lr > 0.0)) {
        return Err(invalid("pretraining needs a positive batch size and learning rate"));
    }
    let layout = TokenLayout::for_vocab(model.config.vocab)?;
    let mut model = model.clone();
    let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(spec.lr), &sizes);
    let mut log = PretrainLog::default();

    for step in 0..spec.steps {
        let base = (step * spec.batch) as u64;
        let results = (0..spec.batch as u64)
            .into_par_iter()
            .map(|i| {
                let sample = mix.sample(base + i, &layout)?;
                sample_gradients(&model, &sample)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut total_loss = 0.0;
        let mut n_targets = 0;
        let mut grads: Vec<Tensor> = sizes.iter().map(|&n| Tensor::zeros(&[n])).collect();
        for (loss, n, gs) in &results {
            total_loss += loss;
            n_targets += n;
            for (acc, g) in grads.iter_mut().zip(gs) {
                for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
        }
        let mean_loss = total_loss / n_targets as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        let inv = 1.0 / n_targets as f64;
        let mut norm_sq = 0.0;
        for g in &mut grads {
            for x in g.data_mut() {
                *x *= inv;
                norm_sq += *x * *x;
            }
        }
        if spec.clip > 0.0 && norm_sq.sqrt() > spec.clip {
            let c = spec.clip / norm_sq.sqrt();
            for g in &mut grads {
                for x in g.data_mut() {
                    *x *= c;
                }
            }
        }

        adam.config.lr = spec.lr_at(step);
        let grad_slices: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
        let mut params: Vec<&mut [f64]> = model.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
        adam.step(&mut params, &grad_slices)?;
        log.losses.push(mean_loss);
        if step % 50 == 0 || step + 1 == spec.steps {
            log::info!("pretrain step {step}: loss {mean_loss:.4}");
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::TaskKind;

    fn tiny() -> ToyTransformer {
        let cfg = ModelConfig {
            n_layers: 1,
            n_q_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
            d_model: 8,
            d_ff: 12,
            vocab: 32,
            rope_base: 10000.0,
            max_pos: 64,
        };
        ToyTransformer::init(cfg, 3).unwrap()
    }

    #[test]
    fn zero_steps_is_identity() {
        let m = tiny();
        let mix = TaskMix::only(TaskKind::DenseRetrieval, (12, 16), 1);
        let spec = PretrainSpec {
            steps: 0,
            ..PretrainSpec::default()
        };
        let (trained, log) = pretrain(&m, &mix, &spec).unwrap();
        assert_eq!(trained, m);
        assert!(log.losses.is_empty());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let m = tiny();
        let layout = TokenLayout::for_vocab(32).unwrap();
        let mix = TaskMix::only(TaskKind::MultiValue, (16, 16), 2);
        let sample = mix.sample(0, &layout).unwrap();
        let (_, _, grads) = sample_gradients(&m, &sample).unwrap();
        // probe a few entries of wk (index 3 in checkpoint order)
        for idx in [0usize, 5, 17] {
            let eps = 1e-5;
            let mut plus = m.clone();
            plus.layers[0].wk.data_mut()[idx] += eps;
            let mut minus = m.clone();
            minus.layers[0].wk.data_mut()[idx] -= eps;
            let fd = (answer_loss(&plus, &sample).unwrap().0 - answer_loss(&minus, &sample).unwrap().0) / (2.0 * eps);
            let an = grads[3].data()[idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "fd {fd} vs {an}");
        }
    }

    #[test]
    fn deterministic_and_loss_drops() {
        let m = tiny();
        let mix = TaskMix::only(TaskKind::DenseRetrieval, (12, 16), 4);
        let spec = PretrainSpec {
            steps: 30,
            lr: 1e-2,
            batch: 4,
            warmup: 5,
            clip: 1.0,
        };
        let (a, la) = pretrain(&m, &mix, &spec).unwrap();
        let (b, lb) = pretrain(&m, &mix, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let head: f64 = la.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = la.losses[25..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }
}
