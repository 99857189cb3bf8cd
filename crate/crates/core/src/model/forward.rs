use super::{AttentionRegionMasks, ModelConfig, ToyTransformer};
use crate::error::{invalid, Error, Result};
use crate::tensor::{kernels, Backend, Eager, Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct LayerView<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ffn_norm: T,
    pub w_gate: T,
    pub w_up: T,
    pub w_down: T,
}

/// The model's weights lifted into some backend's value type.
#[derive(Clone, Debug)]
pub struct ModelView<T> {
    pub embed: T,
    pub layers: Vec<LayerView<T>>,
    pub final_norm: T,
    pub lm_head: T,
}

impl<T> ModelView<T> {
    pub fn build(model: &ToyTransformer, mut f: impl FnMut(&Tensor) -> T) -> Self {
        Self {
            embed: f(&model.embed),
            layers: model
                .layers
                .iter()
                .map(|l| LayerView {
                    attn_norm: f(&l.attn_norm),
                    wq: f(&l.wq),
                    wk: f(&l.wk),
                    wv: f(&l.wv),
                    wo: f(&l.wo),
                    ffn_norm: f(&l.ffn_norm),
                    w_gate: f(&l.w_gate),
                    w_up: f(&l.w_up),
                    w_down: f(&l.w_down),
                })
                .collect(),
            final_norm: f(&model.final_norm),
            lm_head: f(&model.lm_head),
        }
    }

    /// Weights in the model's `named_tensors` order.
    pub fn flat(&self) -> Vec<&T> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.extend([
                &l.attn_norm,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }
}

/// Post-RoPE queries and keys plus values of one layer, `[T, heads*d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Result of a full-attention forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord {
    /// Last-block output for every position, `[T, d_model]`.
    pub hidden: Tensor,
    pub n_ans: usize,
    pub layers: Vec<LayerActivations>,
}

impl ForwardRecord {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hidden states of the answer tokens, `[n_ans, d_model]`.
    pub fn h_last(&self) -> Tensor {
        kernels::slice_rows(&self.hidden, self.len() - self.n_ans, self.n_ans).expect("n_ans <= len")
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(invalid("empty token sequence"));
    }
    if tokens.len() > cfg.max_pos {
        return Err(invalid(format!(
            "sequence of {} tokens exceeds max_pos {}",
            tokens.len(),
            cfg.max_pos
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(invalid(format!("token {t} outside vocabulary {}", cfg.vocab)));
    }
    Ok(())
}

fn norm<B: Backend>(b: &B, x: &B::T, gain: &B::T) -> Result<B::T> {
    let n = b.rmsnorm(x)?;
    b.mul_row(&n, gain)
}

fn qkv<B: Backend>(
    b: &B,
    lw: &LayerView<B::T>,
    x: &B::T,
    positions: &[usize],
    cfg: &ModelConfig,
) -> Result<(B::T, B::T, B::T)> {
    let h = norm(b, x, &lw.attn_norm)?;
    let q = b.rope(&b.matmul(&h, &lw.wq)?, cfg.head_dim, positions, cfg.rope_base)?;
    let k = b.rope(&b.matmul(&h, &lw.wk)?, cfg.head_dim, positions, cfg.rope_base)?;
    let v = b.matmul(&h, &lw.wv)?;
    Ok((q, k, v))
}

fn feedforward<B: Backend>(b: &B, lw: &LayerView<B::T>, x: &B::T) -> Result<B::T> {
    let h = norm(b, x, &lw.ffn_norm)?;
    let gate = b.silu(&b.matmul(&h, &lw.w_gate)?)?;
    let up = b.matmul(&h, &lw.w_up)?;
    let ff = b.matmul(&b.mul(&gate, &up)?, &lw.w_down)?;
    b.add(x, &ff)
}

/// Channel scaling applied to the middle region of answer rows.
struct MidScaling<'a, T> {
    full_width: &'a [bool],
    /// `[1, d]` factor row per KV head of this layer.
    factors: Vec<T>,
}

/// Multi-head GQA attention of `q` rows against all `k`/`v` rows. With
/// `scaling`, logits outside `full_width` use keys multiplied channelwise
/// by the KV head's factor row.
fn attend<B: Backend>(
    b: &B,
    q: &B::T,
    k: &B::T,
    v: &B::T,
    mask: &Tensor,
    cfg: &ModelConfig,
    scaling: Option<&MidScaling<'_, B::T>>,
) -> Result<B::T> {
    let d = cfg.head_dim;
    let inv = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_q_heads);
    for g in 0..cfg.n_kv_heads {
        let kg = b.slice_cols(k, g * d, d)?;
        let vg = b.slice_cols(v, g * d, d)?;
        let kg_scaled = match scaling {
            Some(s) => Some(b.mul_row(&kg, &s.factors[g])?),
            None => None,
        };
        for h in g * cfg.group_size()..(g + 1) * cfg.group_size() {
            let qh = b.slice_cols(q, h * d, d)?;
            let mut logits = b.matmul_nt(&qh, &kg)?;
            if let (Some(s), Some(ks)) = (scaling, &kg_scaled) {
                let scaled = b.matmul_nt(&qh, ks)?;
                logits = b.select(s.full_width, &logits, &scaled)?;
            }
            let p = b.softmax(&b.scale(&logits, inv)?, Some(mask))?;
            heads.push(b.matmul(&p, &vg)?);
        }
    }
    b.concat_cols(&heads)
}

/// Full causal forward on any backend. Returns the last-block hidden states
/// and, when `keep_activations`, the per-layer post-RoPE q/k and v.
pub(crate) fn forward_generic<B: Backend>(
    b: &B,
    view: &ModelView<B::T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    keep_activations: bool,
) -> Result<(B::T, Vec<(B::T, B::T, B::T)>)> {
    check_tokens(cfg, tokens)?;
    let t = tokens.len();
    let positions: Vec<usize> = (0..t).collect();
    let causal = kernels::additive_mask(t, t, |q, k| k <= q);
    let mut x = b.embedding(&view.embed, tokens)?;
    let mut acts = Vec::new();
    for lw in &view.layers {
        let (q, k, v) = qkv(b, lw, &x, &positions, cfg)?;
        let attn = attend(b, &q, &k, &v, &causal, cfg, None)?;
        x = b.add(&x, &b.matmul(&attn, &lw.wo)?)?;
        x = feedforward(b, lw, &x)?;
        if keep_activations {
            acts.push((q, k, v));
        }
    }
    Ok((x, acts))
}

/// Standard full attention over `tokens`, whose last `n_ans` are answers.
pub fn forward_full(model: &ToyTransformer, tokens: &[usize], n_ans: usize) -> Result<ForwardRecord> {
    if n_ans > tokens.len() {
        return Err(invalid(format!("n_ans {n_ans} exceeds sequence length {}", tokens.len())));
    }
    let view = ModelView::build(model, Tensor::clone);
    let (hidden, acts) = forward_generic(&Eager, &view, &model.config, tokens, true)?;
    Ok(ForwardRecord {
        hidden,
        n_ans,
        layers: acts.into_iter().map(|(q, k, v)| LayerActivations { q, k, v }).collect(),
    })
}

/// Output logits for hidden rows, `[rows, vocab]`.
pub fn logits_for<B: Backend>(b: &B, view: &ModelView<B::T>, hidden: &B::T) -> Result<B::T> {
    let h = norm(b, hidden, &view.final_norm)?;
    b.matmul(&h, &view.lm_head)
}

/// Attention weights of one query head in one layer, recomputed from the
/// record's activations, `[T, T]`.
pub fn attention_probs(record: &ForwardRecord, cfg: &ModelConfig, layer: usize, q_head: usize) -> Result<Tensor> {
    let acts = record
        .layers
        .get(layer)
        .ok_or_else(|| invalid(format!("layer {layer} out of range")))?;
    let d = cfg.head_dim;
    let g = q_head / cfg.group_size();
    let q = kernels::slice_cols(&acts.q, q_head * d, d)?;
    let k = kernels::slice_cols(&acts.k, g * d, d)?;
    let t = q.rows();
    let logits = kernels::scale(&kernels::matmul_nt(&q, &k)?, 1.0 / (d as f64).sqrt());
    kernels::softmax_rows(&logits, Some(&kernels::additive_mask(t, t, |a, b| b <= a)))
}

fn check_factors(cfg: &ModelConfig, shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != cfg.n_channels() {
        return Err(Error::ShapeMismatch {
            op: "forward_scaled",
            left: shape.to_vec(),
            right: vec![cfg.n_layers, cfg.n_kv_heads, cfg.head_dim],
        });
    }
    Ok(())
}

/// Answer-row hidden states under region-scaled attention. Context rows are
/// identical to the full pass (they never see answer keys), so their keys
/// and values are taken from `full` as constants and only the answer rows
/// are evaluated on `b`. `factors` must be `[L, n_kv*d]`.
pub(crate) fn scaled_answer_rows<B: Backend>(
    b: &B,
    view: &ModelView<B::T>,
    cfg: &ModelConfig,
    full: &ForwardRecord,
    tokens: &[usize],
    masks: &AttentionRegionMasks,
    factors: &B::T,
) -> Result<B::T> {
    check_tokens(cfg, tokens)?;
    check_factors(cfg, &b.shape(factors))?;
    if masks.len() != tokens.len() || full.len() != tokens.len() {
        return Err(invalid(format!(
            "masks cover {} positions, record {}, tokens {}",
            masks.len(),
            full.len(),
            tokens.len()
        )));
    }
    if masks.n_ans == 0 {
        return Err(invalid("scaled attention needs at least one answer token"));
    }
    let n_ctx = masks.n_ctx;
    let n_ans = masks.n_ans;
    let d = cfg.head_dim;
    let positions: Vec<usize> = (n_ctx..n_ctx + n_ans).collect();
    let full_width = masks.answer_full_width();
    let causal = masks.answer_causal();

    let mut x = b.embedding(&view.embed, &tokens[n_ctx..])?;
    for (l, lw) in view.layers.iter().enumerate() {
        let (q, k_ans, v_ans) = qkv(b, lw, &x, &positions, cfg)?;
        let acts = &full.layers[l];
        let (k, v) = if n_ctx > 0 {
            let k_ctx = b.constant(kernels::slice_rows(&acts.k, 0, n_ctx)?);
            let v_ctx = b.constant(kernels::slice_rows(&acts.v, 0, n_ctx)?);
            (b.concat_rows(&[k_ctx, k_ans])?, b.concat_rows(&[v_ctx, v_ans])?)
        } else {
            (k_ans, v_ans)
        };
        let layer_factors = b.slice_rows(factors, l, 1)?;
        let per_head = (0..cfg.n_kv_heads)
            .map(|g| b.slice_cols(&layer_factors, g * d, d))
            .collect::<Result<Vec<_>>>()?;
        let scaling = MidScaling {
            full_width: &full_width,
            factors: per_head,
        };
        let attn = attend(b, &q, &k, &v, &causal, cfg, Some(&scaling))?;
        x = b.add(&x, &b.matmul(&attn, &lw.wo)?)?;
        x = feedforward(b, lw, &x)?;
    }
    Ok(x)
}

/// Eager scaled forward: answer-row hidden states `[n_ans, d_model]` with
/// `factors` (`L x n_kv x d`, any compatible shape) scaling post-RoPE keys
/// in the middle region.
pub fn forward_scaled(
    model: &ToyTransformer,
    tokens: &[usize],
    factors: &Tensor,
    masks: &AttentionRegionMasks,
) -> Result<Tensor> {
    let cfg = &model.config;
    check_factors(cfg, factors.shape())?;
    let full = forward_full(model, tokens, masks.n_ans)?;
    let view = ModelView::build(model, Tensor::clone);
    let f = factors.clone().reshape(&[cfg.n_layers, cfg.kv_width()])?;
    scaled_answer_rows(&Eager, &view, cfg, &full, tokens, masks, &f)
}

/// Scaled forward recorded on `graph`, with frozen weights and `factors`
/// (a `[L, n_kv*d]` node) as the only trainable input.
pub fn forward_scaled_graph(
    graph: &Graph,
    model: &ToyTransformer,
    full: &ForwardRecord,
    tokens: &[usize],
    factors: Var,
    masks: &AttentionRegionMasks,
) -> Result<Var> {
    let view = ModelView::build(model, |t| graph.leaf(t.clone(), false));
    scaled_answer_rows(graph, &view, &model.config, full, tokens, masks, &factors)
}
