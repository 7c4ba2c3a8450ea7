//! Dense reverse-mode differentiation over [`Tensor2`] expressions.
//!
//! A [`Tape`] records every primitive together with whatever it needs for
//! the backward sweep. Activations are recorded through
//! [`Tape::activate`], which emits both the activation value and its first
//! derivative as taped nodes; differentiating a loss that consumes the
//! first derivative (a Jacobian log-diagonal, say) therefore pulls in the
//! activation's second derivative without any double-backward machinery.

use std::fmt::Debug;

use crate::tensor::{Tensor2, TensorError};

/// Pointwise quantities of a scalar activation `h(x; β)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationValues {
    pub value: f64,
    /// ∂h/∂x
    pub d1: f64,
    /// ∂²h/∂x²
    pub d2: f64,
    /// ∂h/∂β
    pub d_beta: f64,
    /// ∂²h/∂x∂β
    pub d1_beta: f64,
}

/// A scalar activation with analytic first and second derivatives and an
/// optional scalar shape parameter `β`.
pub trait Activation: Debug + Send + Sync {
    fn eval(&self, x: f64, beta: f64) -> ActivationValues;

    /// [`Self::eval`] over a slice; implementations may hoist work that
    /// depends only on `β`.
    fn eval_slice(&self, xs: &[f64], beta: f64, out: &mut Vec<ActivationValues>) {
        out.clear();
        out.extend(xs.iter().map(|&x| self.eval(x, beta)));
    }

    fn value(&self, x: f64, beta: f64) -> f64 {
        self.eval(x, beta).value
    }

    fn d1(&self, x: f64, beta: f64) -> f64 {
        self.eval(x, beta).d1
    }

    fn d2(&self, x: f64, beta: f64) -> f64 {
        self.eval(x, beta).d2
    }
}

/// `tanh`, ignoring `β`. Mostly useful for tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tanh;

impl Activation for Tanh {
    fn eval(&self, x: f64, _beta: f64) -> ActivationValues {
        let t = x.tanh();
        let d1 = 1.0 - t * t;
        ActivationValues {
            value: t,
            d1,
            d2: -2.0 * t * d1,
            d_beta: 0.0,
            d1_beta: 0.0,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Recip(Var),
    Log(Var),
    Sum(Var),
    RowSum(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    HCat(Vec<Var>),
    /// Activation value; caches ∂h/∂x and ∂h/∂β.
    ActValue {
        x: Var,
        beta: Var,
        d1: Vec<f64>,
        d_beta: Vec<f64>,
    },
    /// Activation first derivative; caches ∂²h/∂x² and ∂²h/∂x∂β.
    ActDeriv {
        x: Var,
        beta: Var,
        d2: Vec<f64>,
        d1_beta: Vec<f64>,
    },
    /// Per-row scalar function evaluated outside the tape, with its
    /// row-wise gradient supplied by the caller.
    RowFunction { input: Var, grad: Tensor2 },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations for a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMulT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Adds a `1 x cols` bias to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let v = self.value(a).add_row(self.value(bias))?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(v, Op::AddRow(a, bias), ng))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Multiplies every row of `a` elementwise by the `1 x cols` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var, TensorError> {
        let v = self.value(a).mul_row(self.value(r))?;
        let ng = self.ng(a) || self.ng(r);
        Ok(self.push(v, Op::MulRow(a, r), ng))
    }

    /// Multiplies `a` by the 1x1 tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let k = self.value(s).as_scalar()?;
        let v = self.value(a).scale(k);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(v, Op::MulScalar(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        let ng = self.ng(a);
        self.push(v, Op::Recip(a), ng)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).ln()?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Log(a), ng))
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor2::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// Per-row sums as a column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sums();
        let ng = self.ng(a);
        self.push(v, Op::RowSum(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let v = self.value(a).slice_cols(start, end)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let v = self.value(a).slice_rows(start, end)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::SliceRows(a, start), ng))
    }

    /// Horizontal concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<&Tensor2> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor2::hcat(&values)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(v, Op::HCat(parts.to_vec()), ng))
    }

    /// Elementwise activation value only.
    pub fn apply(
        &mut self,
        x: Var,
        beta: Var,
        act: &dyn Activation,
    ) -> Result<Var, TensorError> {
        Ok(self.activate(x, beta, act)?.0)
    }

    /// Records `h(x; β)` and `h'(x; β)` elementwise, returning both nodes.
    /// `beta` must be a 1x1 tensor.
    pub fn activate(
        &mut self,
        x: Var,
        beta: Var,
        act: &dyn Activation,
    ) -> Result<(Var, Var), TensorError> {
        let b = self.value(beta).as_scalar()?;
        let xv = self.value(x);
        let n = xv.data().len();
        let (rows, cols) = xv.shape();
        let mut value = Vec::with_capacity(n);
        let mut d1 = Vec::with_capacity(n);
        let mut d2 = Vec::with_capacity(n);
        let mut d_beta = Vec::with_capacity(n);
        let mut d1_beta = Vec::with_capacity(n);
        let mut evals = Vec::with_capacity(n);
        act.eval_slice(xv.data(), b, &mut evals);
        for e in evals {
            value.push(e.value);
            d1.push(e.d1);
            d2.push(e.d2);
            d_beta.push(e.d_beta);
            d1_beta.push(e.d1_beta);
        }
        let ng = self.ng(x) || self.ng(beta);
        let value = Tensor2::from_vec(rows, cols, value)?;
        let deriv = Tensor2::from_vec(rows, cols, d1.clone())?;
        let hv = self.push(
            value,
            Op::ActValue {
                x,
                beta,
                d1,
                d_beta,
            },
            ng,
        );
        let hd = self.push(
            deriv,
            Op::ActDeriv {
                x,
                beta,
                d2,
                d1_beta,
            },
            ng,
        );
        Ok((hv, hd))
    }

    /// Attaches a per-row scalar function computed outside the tape:
    /// `values` is `rows x 1` and `grad` holds ∂value/∂input row-wise.
    pub fn row_function(
        &mut self,
        input: Var,
        values: Tensor2,
        grad: Tensor2,
    ) -> Result<Var, TensorError> {
        let shape = self.value(input).shape();
        if grad.shape() != shape || values.shape() != (shape.0, 1) {
            return Err(TensorError::ShapeMismatch {
                op: "row_function",
                left: shape,
                right: grad.shape(),
            });
        }
        let ng = self.ng(input);
        Ok(self.push(values, Op::RowFunction { input, grad }, ng))
    }

    /// Reverse sweep from a 1x1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        self.value(loss).as_scalar()?;
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor2,
        grads: &mut [Option<Tensor2>],
    ) -> Result<(), TensorError> {
        let mut acc = |v: Var, contrib: Tensor2| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_t(self.value(*b))?);
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                if self.ng(*a) {
                    acc(*a, g.matmul(self.value(*b))?);
                }
                if self.ng(*b) {
                    acc(*b, g.t_matmul(self.value(*a))?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                if self.ng(*bias) {
                    acc(*bias, column_sums(g));
                }
            }
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.hadamard(self.value(*b))?);
                }
                if self.ng(*b) {
                    acc(*b, g.hadamard(self.value(*a))?);
                }
            }
            Op::MulRow(a, r) => {
                if self.ng(*a) {
                    acc(*a, g.mul_row(self.value(*r))?);
                }
                if self.ng(*r) {
                    acc(*r, column_sums(&g.hadamard(self.value(*a))?));
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).as_scalar()?;
                if self.ng(*a) {
                    acc(*a, g.scale(k));
                }
                if self.ng(*s) {
                    let d = crate::tensor::dot(g.data(), self.value(*a).data());
                    acc(*s, Tensor2::scalar(d));
                }
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k)),
            Op::Recip(a) => {
                acc(*a, g.zip_map(&node.value, "recip", |gi, r| -gi * r * r)?);
            }
            Op::Log(a) => {
                acc(*a, g.zip_map(self.value(*a), "log", |gi, x| gi / x)?);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Tensor2::filled(r, c, g.as_scalar()?));
            }
            Op::RowSum(a) => {
                let (r, c) = self.value(*a).shape();
                let mut out = Tensor2::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    out.row_mut(i).iter_mut().for_each(|v| *v = gi);
                }
                acc(*a, out);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut out = Tensor2::zeros(r, c);
                for i in 0..r {
                    out.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, out);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut out = Tensor2::zeros(r, c);
                for i in 0..g.rows() {
                    out.row_mut(start + i).copy_from_slice(g.row(i));
                }
                acc(*a, out);
            }
            Op::HCat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.ng(*p) {
                        acc(*p, g.slice_cols(offset, offset + w)?);
                    }
                    offset += w;
                }
            }
            Op::ActValue {
                x,
                beta,
                d1,
                d_beta,
            } => {
                act_backward(self, *x, *beta, g, d1, d_beta, &mut acc)?;
            }
            Op::ActDeriv {
                x,
                beta,
                d2,
                d1_beta,
            } => {
                act_backward(self, *x, *beta, g, d2, d1_beta, &mut acc)?;
            }
            Op::RowFunction { input, grad } => {
                let mut out = grad.clone();
                for i in 0..out.rows() {
                    let gi = g.get(i, 0);
                    out.row_mut(i).iter_mut().for_each(|v| *v *= gi);
                }
                acc(*input, out);
            }
        }
        Ok(())
    }
}

fn act_backward(
    tape: &Tape,
    x: Var,
    beta: Var,
    g: &Tensor2,
    dx: &[f64],
    dbeta: &[f64],
    acc: &mut impl FnMut(Var, Tensor2),
) -> Result<(), TensorError> {
    if tape.ng(x) {
        let data = g.data().iter().zip(dx).map(|(a, b)| a * b).collect();
        acc(x, Tensor2::from_vec(g.rows(), g.cols(), data)?);
    }
    if tape.ng(beta) {
        acc(beta, Tensor2::scalar(crate::tensor::dot(g.data(), dbeta)));
    }
    Ok(())
}

fn column_sums(g: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor2 {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Tensor2::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w() -> Tensor2 {
        Tensor2::from_rows(&[[0.3, -1.2, 2.0], [0.7, 0.1, -0.4]])
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let p = t.param(w());
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(&t, p), Tensor2::ones(2, 3));
    }

    #[test]
    fn half_square_gradient_is_identity_map() {
        let mut t = Tape::new();
        let p = t.param(w());
        let sq = t.mul(p, p).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(&t, p), w());
    }

    #[test]
    fn unreached_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let p = t.param(w());
        let q = t.param(Tensor2::ones(1, 1));
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(&t, q), Tensor2::zeros(1, 1));
        assert!(g.get(q).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let p = t.param(w());
        assert!(matches!(
            t.backward(p),
            Err(TensorError::NotScalar { rows: 2, cols: 3 })
        ));
    }

    #[test]
    fn forward_primitive_examples() {
        let mut t = Tape::new();
        let i3 = t.constant(Tensor2::identity(3));
        let a = t.constant(w().transpose());
        let m = t.matmul(i3, a).unwrap();
        assert_eq!(t.value(m), &w().transpose());

        let ones = t.constant(Tensor2::ones(2, 2));
        let l = t.log(ones).unwrap();
        assert_eq!(t.value(l), &Tensor2::zeros(2, 2));

        let z = t.constant(Tensor2::zeros(2, 2));
        let beta = t.constant(Tensor2::scalar(0.0));
        let h = t.apply(z, beta, &Tanh).unwrap();
        assert_eq!(t.value(h), &Tensor2::zeros(2, 2));

        let bad = t.constant(Tensor2::from_rows(&[[1.0, -1.0]]));
        assert!(t.log(bad).is_err());
        assert!(t.add(i3, bad).is_err());
    }
}
