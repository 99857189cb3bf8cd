//! Small frozen GQA transformer with rotate-half RoPE, RMSNorm and a SiLU
//! gated feedforward.

mod forward;
mod masks;
mod pretrain;

pub use forward::{
    attention_probs, forward_full, forward_scaled, forward_scaled_graph, logits_for, ForwardRecord,
    LayerActivations, LayerView, ModelView,
};
pub use masks::{build_masks, AttentionRegionMasks};
pub use pretrain::{answer_loss, pretrain, PretrainLog, PretrainSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub rope_base: f64,
    pub max_pos: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_q_heads: 8,
            n_kv_heads: 4,
            head_dim: 16,
            d_model: 128,
            d_ff: 256,
            vocab: 512,
            rope_base: 10000.0,
            max_pos: 2048,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(invalid(format!("head_dim must be even, got {}", self.head_dim)));
        }
        if self.n_kv_heads == 0 || self.n_q_heads % self.n_kv_heads != 0 {
            return Err(invalid(format!(
                "n_q_heads {} not divisible by n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.d_model != self.n_q_heads * self.head_dim {
            return Err(invalid(format!(
                "d_model {} != n_q_heads * head_dim = {}",
                self.d_model,
                self.n_q_heads * self.head_dim
            )));
        }
        if self.n_layers == 0 || self.vocab == 0 || self.d_ff == 0 || self.max_pos == 0 {
            return Err(invalid("layer count, vocab, d_ff and max_pos must be positive"));
        }
        Ok(())
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Total number of key channels, `L * n_kv * d`.
    pub fn n_channels(&self) -> usize {
        self.n_layers * self.kv_width()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl LayerWeights {
    const NAMES: [&'static str; 9] = [
        "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
    ];

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTransformer {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("consistent")
}

impl ToyTransformer {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let dm = c.d_model;
        let proj = (dm as f64).powf(-0.5);
        let resid = proj / (2.0 * c.n_layers as f64).sqrt();
        let embed = normal(&mut rng, &[c.vocab, dm], 1.0);
        let layers = (0..c.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::ones(&[dm]),
                wq: normal(&mut rng, &[dm, c.n_q_heads * c.head_dim], proj),
                wk: normal(&mut rng, &[dm, c.kv_width()], proj),
                wv: normal(&mut rng, &[dm, c.kv_width()], proj),
                wo: normal(&mut rng, &[c.n_q_heads * c.head_dim, dm], resid),
                ffn_norm: Tensor::ones(&[dm]),
                w_gate: normal(&mut rng, &[dm, c.d_ff], proj),
                w_up: normal(&mut rng, &[dm, c.d_ff], proj),
                w_down: normal(&mut rng, &[c.d_ff, dm], (c.d_ff as f64).powf(-0.5) / (2.0 * c.n_layers as f64).sqrt()),
            })
            .collect();
        Ok(Self {
            embed,
            layers,
            final_norm: Tensor::ones(&[dm]),
            lm_head: normal(&mut rng, &[dm, c.vocab], proj),
            config,
        })
    }

    /// Weight tensors under stable names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LayerWeights::NAMES.iter().zip(l.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Expected shapes under the same names as [`Self::named_tensors`].
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let c = config;
        let dm = c.d_model;
        let qw = c.n_q_heads * c.head_dim;
        let mut out = vec![("embed".to_string(), vec![c.vocab, dm])];
        for i in 0..c.n_layers {
            let shapes = [
                vec![dm],
                vec![dm, qw],
                vec![dm, c.kv_width()],
                vec![dm, c.kv_width()],
                vec![qw, dm],
                vec![dm],
                vec![dm, c.d_ff],
                vec![dm, c.d_ff],
                vec![c.d_ff, dm],
            ];
            for (name, s) in LayerWeights::NAMES.iter().zip(shapes) {
                out.push((format!("layers.{i}.{name}"), s));
            }
        }
        out.push(("final_norm".to_string(), vec![dm]));
        out.push(("lm_head".to_string(), vec![dm, c.vocab]));
        out
    }

    /// Rebuilds a model from tensors in [`Self::named_tensors`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        if expected.len() != tensors.len() {
            return Err(invalid(format!(
                "expected {} weight tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&tensors) {
            if en != n || es.as_slice() != t.shape() {
                return Err(invalid(format!(
                    "weight {n} {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("length checked");
        let embed = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = next();
        let lm_head = next();
        Ok(Self {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// RoPE on `[T, n*head_dim]` activations at the given absolute positions.
pub fn apply_rope(x: &Tensor, head_dim: usize, positions: &[usize], config: &ModelConfig) -> Result<Tensor> {
    if let Some(&p) = positions.iter().find(|&&p| p >= config.max_pos) {
        return Err(invalid(format!("position {p} beyond max_pos {}", config.max_pos)));
    }
    kernels::rope(x, head_dim, positions, config.rope_base, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().group_size(), 2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let odd = ModelConfig {
            head_dim: 15,
            d_model: 120,
            ..ModelConfig::default()
        };
        assert!(odd.validate().is_err());
        let bad_group = ModelConfig {
            n_kv_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad_group.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_shapes_match() {
        let cfg = ModelConfig {
            n_layers: 2,
            ..ModelConfig::default()
        };
        let a = ToyTransformer::init(cfg.clone(), 5).unwrap();
        let b = ToyTransformer::init(cfg.clone(), 5).unwrap();
        assert_eq!(a, b);
        let expected = ToyTransformer::expected_shapes(&cfg);
        for ((n, t), (en, es)) in a.named_tensors().iter().zip(&expected) {
            assert_eq!(n, en);
            assert_eq!(t.shape(), es.as_slice());
        }
        let rebuilt = ToyTransformer::from_tensors(
            cfg,
            a.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        )
        .unwrap();
        assert_eq!(rebuilt, a);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let cfg = ModelConfig::default();
        let d = 8;
        let x = Tensor::new(vec![3, 16], (0..48).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y = apply_rope(&x, d, &[0, 17, 1999], &cfg).unwrap();
        for r in 0..3 {
            for blk in 0..2 {
                for i in 0..d / 2 {
                    let a = blk * d + i;
                    let b = a + d / 2;
                    let n0 = x.at2(r, a).hypot(x.at2(r, b));
                    let n1 = y.at2(r, a).hypot(y.at2(r, b));
                    assert!((n0 - n1).abs() < 1e-12);
                }
            }
        }
        assert!(apply_rope(&x, d, &[0, 1, 2048], &cfg).is_err());
    }

    #[test]
    fn rope_inner_product_is_relative() {
        // single pair: <R(p1) q, R(p2) k> = q^T R(p2 - p1) k
        let cfg = ModelConfig::default();
        let q = Tensor::new(vec![1, 2], vec![0.3, -1.1]).unwrap();
        let k = Tensor::new(vec![1, 2], vec![0.8, 0.5]).unwrap();
        let theta = 1.0; // pair 0 frequency
        for (p1, p2) in [(3usize, 10usize), (50, 57), (0, 7)] {
            let rq = apply_rope(&q, 2, &[p1], &cfg).unwrap();
            let rk = apply_rope(&k, 2, &[p2], &cfg).unwrap();
            let dot = rq.data()[0] * rk.data()[0] + rq.data()[1] * rk.data()[1];
            let a = (p2 as f64 - p1 as f64) * theta;
            let (s, c) = a.sin_cos();
            let rotated = [c * 0.8 - s * 0.5, s * 0.8 + c * 0.5];
            let oracle = 0.3 * rotated[0] + -1.1 * rotated[1];
            assert!((dot - oracle).abs() < 1e-12);
        }
    }
}
