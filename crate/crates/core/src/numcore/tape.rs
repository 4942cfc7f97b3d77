//! Reverse-mode differentiation of scalar losses with respect to a flat
//! parameter vector.
//!
//! The tape records batched matrix operations (the shapes that occur in an
//! MLP and its losses). Inputs that do not depend on the parameters enter as
//! constants and receive no adjoint.

use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{MsgmError, Result};

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param { offset: usize },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Silu(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    RowDot(Var, Var),
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Parameters, their adjoints, and the nodes of the current recording.
#[derive(Debug)]
pub struct ParamTape {
    params: Vec<f64>,
    adjoints: Vec<f64>,
    nodes: Vec<Node>,
}

/// A cloned tape carries parameters and adjoints but an empty recording.
impl Clone for ParamTape {
    fn clone(&self) -> Self {
        ParamTape {
            params: self.params.clone(),
            adjoints: self.adjoints.clone(),
            nodes: Vec::new(),
        }
    }
}

impl ParamTape {
    pub fn new(params: Vec<f64>) -> Self {
        let n = params.len();
        ParamTape {
            params,
            adjoints: vec![0.0; n],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn adjoints(&self) -> &[f64] {
        &self.adjoints
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Drops the current recording, keeping parameters and adjoints.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// A copy of the parameters with an empty recording.
    pub fn snapshot(&self) -> ParamTape {
        ParamTape::new(self.params.clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// A view of `params[offset..]` reshaped to `shape`.
    pub fn param(&mut self, offset: usize, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let value = Tensor::new(shape.to_vec(), self.params[offset..offset + n].to_vec())
            .expect("param shape matches slice length");
        self.push(Op::Param { offset }, value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(Op::MatMul(a, b), value, ng)
    }

    /// Adds a bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        assert_eq!(av.cols(), bv.len(), "bias width mismatch");
        let mut value = av.clone();
        let c = bv.len();
        for row in value.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(x, b)| *x += b);
        }
        let ng = self.node(a).needs_grad || self.node(bias).needs_grad;
        self.push(Op::AddBias(a, bias), value, ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(silu);
        let ng = self.node(a).needs_grad;
        self.push(Op::Silu(a), value, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.node(a).needs_grad;
        self.push(Op::Relu(a), value, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(Op::Add(a, b), value, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(Op::Sub(a, b), value, ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(Op::Mul(a, b), value, ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let ng = self.node(a).needs_grad;
        self.push(Op::Scale(a, k), value, ng)
    }

    /// Multiplies row `i` of `a` by the constant `scales[i]`.
    pub fn scale_rows(&mut self, a: Var, scales: Vec<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), scales.len(), "row scale count mismatch");
        let c = av.cols();
        let mut value = av.clone();
        for (row, s) in value.data_mut().chunks_exact_mut(c).zip(&scales) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let ng = self.node(a).needs_grad;
        self.push(Op::ScaleRows(a, scales), value, ng)
    }

    /// Row-wise inner products, giving a vector with one entry per row.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot shape mismatch");
        let value: Vec<f64> = av
            .row_iter()
            .zip(bv.row_iter())
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(Op::RowDot(a, b), Tensor::vector(value), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.node(a).needs_grad;
        self.push(Op::Sum(a), value, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let ng = self.node(a).needs_grad;
        self.push(Op::Mean(a), value, ng)
    }

    /// `Σ wᵢ·termsᵢ` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut value = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, w) in terms {
            let tv = self.value(v);
            value
                .data_mut()
                .iter_mut()
                .zip(tv.data())
                .for_each(|(acc, x)| *acc += w * x);
        }
        let ng = terms.iter().any(|(v, _)| self.node(*v).needs_grad);
        self.push(Op::WeightedSum(terms.to_vec()), value, ng)
    }

    /// Back-propagates from the scalar `loss`, overwriting the adjoints with
    /// `∂loss/∂θ`.
    pub fn backward(&mut self, loss: Var) -> Result<&[f64]> {
        if self.value(loss).len() != 1 {
            return Err(MsgmError::invalid("backward needs a scalar loss node"));
        }
        self.adjoints.iter_mut().for_each(|a| *a = 0.0);
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    let dst = &mut self.adjoints[*offset..*offset + g.len()];
                    dst.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
                Op::MatMul(a, b) => {
                    let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
                    let (m, k, n) = (an.value.rows(), an.value.cols(), bn.value.cols());
                    let gv = MatRef::row_major(g.data(), m, n);
                    if an.needs_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(gv, MatRef::row_major(bn.value.data(), k, n).t(), &mut da, 0.0);
                        accumulate(&mut grads, *a, Tensor::matrix(m, k, da));
                    }
                    if bn.needs_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(MatRef::row_major(an.value.data(), m, k).t(), gv, &mut db, 0.0);
                        let shape = bn.value.shape().to_vec();
                        accumulate(&mut grads, *b, Tensor::new(shape, db)?);
                    }
                }
                Op::AddBias(a, bias) => {
                    let bshape = self.nodes[bias.0].value.shape().to_vec();
                    if self.nodes[bias.0].needs_grad {
                        let c = g.cols();
                        let mut db = vec![0.0; c];
                        for row in g.data().chunks_exact(c) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        accumulate(&mut grads, *bias, Tensor::new(bshape, db)?);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Silu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = g.zip_map(x, |gi, xi| gi * silu_grad(xi));
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = g.zip_map(bv, |gi, y| gi * y);
                    let db = g.zip_map(av, |gi, x| gi * x);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k)),
                Op::ScaleRows(a, scales) => {
                    let c = g.cols();
                    let mut da = g;
                    for (row, s) in da.data_mut().chunks_exact_mut(c).zip(scales) {
                        row.iter_mut().for_each(|x| *x *= s);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let c = av.cols();
                    let mut da = bv.clone();
                    let mut db = av.clone();
                    for (i, gi) in g.data().iter().enumerate() {
                        da.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= gi);
                        db.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= gi);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::full(&shape, g.data()[0]));
                }
                Op::Mean(a) => {
                    let av = &self.nodes[a.0].value;
                    let shape = av.shape().to_vec();
                    let k = g.data()[0] / av.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(&shape, k));
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms.clone() {
                        accumulate(&mut grads, v, g.scale(w));
                    }
                }
            }
        }
        Ok(&self.adjoints)
    }

    /// Number of parameters whose adjoint is exactly zero after the last
    /// backward pass. Diagnostic only.
    pub fn unreachable_params(&self) -> usize {
        self.adjoints.iter().filter(|a| **a == 0.0).count()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
