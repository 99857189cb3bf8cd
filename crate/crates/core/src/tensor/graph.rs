use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use super::kernels as k;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    RmsNorm(Var),
    Silu(Var),
    Gelu(Var),
    Rope {
        x: Var,
        head_dim: usize,
        positions: Vec<usize>,
        base: f64,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Select {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
    Transpose(Var),
    Sum(Var),
    L1(Var),
    L2(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Tensor,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | MulRow(a, b) => {
                vec![*a, *b]
            }
            Select { a, b, .. } => vec![*a, *b],
            Scale(x, _) | Softmax(x) | RmsNorm(x) | Silu(x) | Gelu(x) | Transpose(x) | Sum(x)
            | L1(x) | L2(x) => vec![*x],
            Rope { x, .. } | SliceCols { x, .. } | SliceRows { x, .. } => vec![*x],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            Embedding { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only operation record. Creation order is a valid topological
/// order, so the backward sweep simply walks nodes in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of the loss with respect to every `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|p| nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn unary(&self, x: Var, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var> {
        let value = f(&self.value(x))?;
        Ok(self.push(value, op))
    }

    fn binary(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>, op: Op) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(value, op))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, k::matmul, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, k::matmul_nt, Op::MatMulNt(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, k::add, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, k::sub, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, k::mul, Op::Mul(a, b))
    }

    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        self.binary(a, row, k::mul_row, Op::MulRow(a, row))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |t| Ok(k::scale(t, c)), Op::Scale(x, c))
    }

    pub fn softmax(&self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        self.unary(x, |t| k::softmax_rows(t, mask), Op::Softmax(x))
    }

    pub fn rmsnorm(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(k::rmsnorm_rows(t)), Op::RmsNorm(x))
    }

    pub fn silu(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(t.map(k::silu)), Op::Silu(x))
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(t.map(k::gelu)), Op::Gelu(x))
    }

    pub fn rope(&self, x: Var, head_dim: usize, positions: &[usize], base: f64) -> Result<Var> {
        self.unary(
            x,
            |t| k::rope(t, head_dim, positions, base, false),
            Op::Rope {
                x,
                head_dim,
                positions: positions.to_vec(),
                base,
            },
        )
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.unary(x, |t| k::slice_cols(t, start, len), Op::SliceCols { x, start })
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.unary(x, |t| k::slice_rows(t, start, len), Op::SliceRows { x, start })
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.0].value).collect();
            k::concat_cols(&refs)?
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.0].value).collect();
            k::concat_rows(&refs)?
        };
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        self.unary(
            table,
            |t| k::embedding(t, ids),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn select(&self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| k::select(mask, x, y),
            Op::Select {
                mask: mask.to_vec(),
                a,
                b,
            },
        )
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        self.unary(x, k::transpose, Op::Transpose(x))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(Tensor::scalar(k::sum(t))), Op::Sum(x))
    }

    pub fn l1_norm(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(Tensor::scalar(k::l1_norm(t))), Op::L1(x))
    }

    pub fn l2_norm(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(Tensor::scalar(k::l2_norm(t))), Op::L2(x))
    }

    pub fn cross_entropy(&self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (loss, probs) = k::cross_entropy(&self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Intermediate gradients are dropped
    /// as soon as they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), 1.0));
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads.insert(Var(id), g);
                continue;
            }
            let mut acc = |v: Var, t: Tensor| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(*a, k::matmul_nt(&g, val(*b))?);
                    acc(*b, k::matmul_tn(val(*a), &g)?);
                }
                Op::MatMulNt(a, b) => {
                    acc(*a, k::matmul(&g, val(*b))?);
                    acc(*b, k::matmul_tn(&g, val(*a))?);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, k::mul(&g, val(*b))?);
                    acc(*b, k::mul(&g, val(*a))?);
                }
                Op::MulRow(a, r) => {
                    let ga = k::mul_row(&g, val(*r))?;
                    let gr = k::mul_row_grad_row(val(*a), &g).reshape(val(*r).shape())?;
                    acc(*a, ga);
                    acc(*r, gr);
                }
                Op::Scale(x, c) => acc(*x, k::scale(&g, *c)),
                Op::Softmax(x) => acc(*x, k::softmax_rows_backward(&node.value, &g)),
                Op::RmsNorm(x) => acc(*x, k::rmsnorm_rows_backward(val(*x), &node.value, &g)),
                Op::Silu(x) => {
                    let d = val(*x).map(k::silu_grad);
                    acc(*x, k::mul(&g, &d)?);
                }
                Op::Gelu(x) => {
                    let d = val(*x).map(k::gelu_grad);
                    acc(*x, k::mul(&g, &d)?);
                }
                Op::Rope {
                    x,
                    head_dim,
                    positions,
                    base,
                } => acc(*x, k::rope(&g, *head_dim, positions, *base, true)?),
                Op::SliceCols { x, start } => {
                    let src = val(*x);
                    let mut dx = Tensor::zeros(src.shape());
                    let w = g.cols();
                    for i in 0..g.rows() {
                        dx.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                    }
                    acc(*x, dx);
                }
                Op::SliceRows { x, start } => {
                    let src = val(*x);
                    let mut dx = Tensor::zeros(src.shape());
                    let c = src.cols();
                    dx.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    acc(*x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = val(*p).cols();
                        acc(*p, k::slice_cols(&g, offset, w)?);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = val(*p).rows();
                        acc(*p, k::slice_rows(&g, offset, h)?);
                        offset += h;
                    }
                }
                Op::Embedding { table, ids } => {
                    let mut dt = Tensor::zeros(val(*table).shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    acc(*table, dt);
                }
                Op::Select { mask, a, b } => {
                    let ga = g.data().iter().zip(mask).map(|(&x, &m)| if m { x } else { 0.0 });
                    let gb = g.data().iter().zip(mask).map(|(&x, &m)| if m { 0.0 } else { x });
                    acc(*a, Tensor::new(g.shape().to_vec(), ga.collect())?);
                    acc(*b, Tensor::new(g.shape().to_vec(), gb.collect())?);
                }
                Op::Transpose(x) => acc(*x, k::transpose(&g)?),
                Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.item())),
                Op::L1(x) => {
                    let s = g.item();
                    acc(*x, val(*x).map(|v| s * k::sign(v)));
                }
                Op::L2(x) => {
                    let norm = node.value.item();
                    let s = if norm > 0.0 { g.item() / norm } else { 0.0 };
                    acc(*x, val(*x).map(|v| s * v));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let s = g.item();
                    let mut dz = Tensor::zeros(probs.shape());
                    let mut seen = vec![0.0; probs.rows()];
                    for &(row, t) in targets {
                        seen[row] += 1.0;
                        dz.row_mut(row)[t] -= s;
                    }
                    for (row, &count) in seen.iter().enumerate() {
                        if count > 0.0 {
                            for (d, p) in dz.row_mut(row).iter_mut().zip(probs.row(row)) {
                                *d += s * count * p;
                            }
                        }
                    }
                    acc(*logits, dz);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_gradient;

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0]));
        let c = g.leaf(Tensor::from_vec(vec![5.0]), false);
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn l1_subgradient_zero_at_kink() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.0, -3.0, 2.0]));
        let loss = g.l1_norm(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_matches_fd() {
        let z = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.2, 0.0, -0.7]).unwrap();
        let targets = [(0usize, 2usize), (1, 0)];
        let g = Graph::new();
        let zv = g.param(z.clone());
        let loss = g.cross_entropy(zv, &targets).unwrap();
        let grads = g.backward(loss).unwrap();
        let fd = finite_difference_gradient(|t| Ok(k::cross_entropy(t, &targets)?.0), &z, 1e-5).unwrap();
        for (a, b) in grads.get(zv).unwrap().data().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
