use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{kernels, Tensor};

/// Sink / local-window / middle split of the attention matrix for a sample
/// of `n_ctx` context tokens followed by `n_ans` answer tokens.
///
/// A key is in the sink+local region for query `q` when `k < sink` or
/// `q - k < window` (and `k <= q`). The middle region only exists on
/// answer-query rows; context rows always attend with full width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionRegionMasks {
    pub n_ctx: usize,
    pub n_ans: usize,
    pub sink: usize,
    pub window: usize,
}

pub fn build_masks(n_ctx: usize, n_ans: usize, sink: usize, window: usize) -> Result<AttentionRegionMasks> {
    if sink > n_ctx {
        return Err(invalid(format!("sink {sink} exceeds context length {n_ctx}")));
    }
    if window == 0 {
        return Err(invalid("local window must hold at least the current token"));
    }
    Ok(AttentionRegionMasks {
        n_ctx,
        n_ans,
        sink,
        window,
    })
}

impl AttentionRegionMasks {
    pub fn len(&self) -> usize {
        self.n_ctx + self.n_ans
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn causal(&self, q: usize, k: usize) -> bool {
        k <= q
    }

    pub fn is_answer_row(&self, q: usize) -> bool {
        q >= self.n_ctx && q < self.len()
    }

    /// Full-width region: sink or local window.
    pub fn s_plus_l(&self, q: usize, k: usize) -> bool {
        k <= q && (k < self.sink || q - k < self.window)
    }

    /// The channel-scaled region on answer rows.
    pub fn mid(&self, q: usize, k: usize) -> bool {
        self.is_answer_row(q) && k <= q && !self.s_plus_l(q, k)
    }

    /// `[n_ans, len]` row-major selector: true where the unscaled logit is
    /// used (sink+local, and the causally masked tail).
    pub fn answer_full_width(&self) -> Vec<bool> {
        let t = self.len();
        let mut out = Vec::with_capacity(self.n_ans * t);
        for i in 0..self.n_ans {
            let q = self.n_ctx + i;
            out.extend((0..t).map(|k| !self.mid(q, k)));
        }
        out
    }

    /// Additive causal mask for the answer rows, `[n_ans, len]`.
    pub fn answer_causal(&self) -> Tensor {
        let n_ctx = self.n_ctx;
        kernels::additive_mask(self.n_ans, self.len(), |i, k| k <= n_ctx + i)
    }

    /// Key positions of the middle region for query `q`.
    pub fn mid_keys(&self, q: usize) -> Vec<usize> {
        (0..=q).filter(|&k| self.mid(q, k)).collect()
    }

    pub fn s_plus_l_keys(&self, q: usize) -> Vec<usize> {
        (0..=q).filter(|&k| self.s_plus_l(q, k)).collect()
    }
}
