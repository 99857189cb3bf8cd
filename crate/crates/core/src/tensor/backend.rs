use super::kernels as k;
use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Operation set shared by the eager evaluator and the recording graph, so
/// model code can be written once.
pub trait Backend {
    type T: Clone;

    fn constant(&self, t: Tensor) -> Self::T;
    fn value(&self, x: &Self::T) -> Tensor;
    fn shape(&self, x: &Self::T) -> Vec<usize>;

    fn matmul(&self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn matmul_nt(&self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn add(&self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn sub(&self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn mul(&self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn mul_row(&self, a: &Self::T, row: &Self::T) -> Result<Self::T>;
    fn scale(&self, x: &Self::T, c: f64) -> Result<Self::T>;
    fn softmax(&self, x: &Self::T, mask: Option<&Tensor>) -> Result<Self::T>;
    fn rmsnorm(&self, x: &Self::T) -> Result<Self::T>;
    fn silu(&self, x: &Self::T) -> Result<Self::T>;
    fn gelu(&self, x: &Self::T) -> Result<Self::T>;
    fn rope(&self, x: &Self::T, head_dim: usize, positions: &[usize], base: f64) -> Result<Self::T>;
    fn slice_cols(&self, x: &Self::T, start: usize, len: usize) -> Result<Self::T>;
    fn slice_rows(&self, x: &Self::T, start: usize, len: usize) -> Result<Self::T>;
    fn concat_cols(&self, parts: &[Self::T]) -> Result<Self::T>;
    fn concat_rows(&self, parts: &[Self::T]) -> Result<Self::T>;
    fn embedding(&self, table: &Self::T, ids: &[usize]) -> Result<Self::T>;
    fn select(&self, mask: &[bool], a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn transpose(&self, x: &Self::T) -> Result<Self::T>;
    fn sum(&self, x: &Self::T) -> Result<Self::T>;
    fn l1_norm(&self, x: &Self::T) -> Result<Self::T>;
    fn l2_norm(&self, x: &Self::T) -> Result<Self::T>;
    fn cross_entropy(&self, logits: &Self::T, targets: &[(usize, usize)]) -> Result<Self::T>;
}

/// Direct evaluation with no recording.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Backend for Eager {
    type T = Tensor;

    fn constant(&self, t: Tensor) -> Tensor {
        t
    }
    fn value(&self, x: &Tensor) -> Tensor {
        x.clone()
    }
    fn shape(&self, x: &Tensor) -> Vec<usize> {
        x.shape().to_vec()
    }
    fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::matmul(a, b)
    }
    fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::matmul_nt(a, b)
    }
    fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::add(a, b)
    }
    fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::sub(a, b)
    }
    fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::mul(a, b)
    }
    fn mul_row(&self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        k::mul_row(a, row)
    }
    fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        Ok(k::scale(x, c))
    }
    fn softmax(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        k::softmax_rows(x, mask)
    }
    fn rmsnorm(&self, x: &Tensor) -> Result<Tensor> {
        Ok(k::rmsnorm_rows(x))
    }
    fn silu(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.map(k::silu))
    }
    fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.map(k::gelu))
    }
    fn rope(&self, x: &Tensor, head_dim: usize, positions: &[usize], base: f64) -> Result<Tensor> {
        k::rope(x, head_dim, positions, base, false)
    }
    fn slice_cols(&self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        k::slice_cols(x, start, len)
    }
    fn slice_rows(&self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        k::slice_rows(x, start, len)
    }
    fn concat_cols(&self, parts: &[Tensor]) -> Result<Tensor> {
        k::concat_cols(&parts.iter().collect::<Vec<_>>())
    }
    fn concat_rows(&self, parts: &[Tensor]) -> Result<Tensor> {
        k::concat_rows(&parts.iter().collect::<Vec<_>>())
    }
    fn embedding(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        k::embedding(table, ids)
    }
    fn select(&self, mask: &[bool], a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::select(mask, a, b)
    }
    fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        k::transpose(x)
    }
    fn sum(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::scalar(k::sum(x)))
    }
    fn l1_norm(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::scalar(k::l1_norm(x)))
    }
    fn l2_norm(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::scalar(k::l2_norm(x)))
    }
    fn cross_entropy(&self, logits: &Tensor, targets: &[(usize, usize)]) -> Result<Tensor> {
        Ok(Tensor::scalar(k::cross_entropy(logits, targets)?.0))
    }
}

impl Backend for Graph {
    type T = Var;

    fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }
    fn value(&self, x: &Var) -> Tensor {
        Graph::value(self, *x).clone()
    }
    fn shape(&self, x: &Var) -> Vec<usize> {
        Graph::value(self, *x).shape().to_vec()
    }
    fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        Graph::matmul(self, *a, *b)
    }
    fn matmul_nt(&self, a: &Var, b: &Var) -> Result<Var> {
        Graph::matmul_nt(self, *a, *b)
    }
    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        Graph::add(self, *a, *b)
    }
    fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        Graph::sub(self, *a, *b)
    }
    fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        Graph::mul(self, *a, *b)
    }
    fn mul_row(&self, a: &Var, row: &Var) -> Result<Var> {
        Graph::mul_row(self, *a, *row)
    }
    fn scale(&self, x: &Var, c: f64) -> Result<Var> {
        Graph::scale(self, *x, c)
    }
    fn softmax(&self, x: &Var, mask: Option<&Tensor>) -> Result<Var> {
        Graph::softmax(self, *x, mask)
    }
    fn rmsnorm(&self, x: &Var) -> Result<Var> {
        Graph::rmsnorm(self, *x)
    }
    fn silu(&self, x: &Var) -> Result<Var> {
        Graph::silu(self, *x)
    }
    fn gelu(&self, x: &Var) -> Result<Var> {
        Graph::gelu(self, *x)
    }
    fn rope(&self, x: &Var, head_dim: usize, positions: &[usize], base: f64) -> Result<Var> {
        Graph::rope(self, *x, head_dim, positions, base)
    }
    fn slice_cols(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        Graph::slice_cols(self, *x, start, len)
    }
    fn slice_rows(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        Graph::slice_rows(self, *x, start, len)
    }
    fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        Graph::concat_cols(self, parts)
    }
    fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        Graph::concat_rows(self, parts)
    }
    fn embedding(&self, table: &Var, ids: &[usize]) -> Result<Var> {
        Graph::embedding(self, *table, ids)
    }
    fn select(&self, mask: &[bool], a: &Var, b: &Var) -> Result<Var> {
        Graph::select(self, mask, *a, *b)
    }
    fn transpose(&self, x: &Var) -> Result<Var> {
        Graph::transpose(self, *x)
    }
    fn sum(&self, x: &Var) -> Result<Var> {
        Graph::sum(self, *x)
    }
    fn l1_norm(&self, x: &Var) -> Result<Var> {
        Graph::l1_norm(self, *x)
    }
    fn l2_norm(&self, x: &Var) -> Result<Var> {
        Graph::l2_norm(self, *x)
    }
    fn cross_entropy(&self, logits: &Var, targets: &[(usize, usize)]) -> Result<Var> {
        Graph::cross_entropy(self, *logits, targets)
    }
}
