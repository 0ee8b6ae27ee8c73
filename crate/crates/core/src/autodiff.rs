//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] consumes it, so the tape never outlives the pass.
//! Parameters taken from a frozen [`ParamSet`] enter the tape as constants and
//! can never receive gradients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{gemm, Mat, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Tanh(Var),
    Silu(Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Mse(Var, Var),
    Sum(Var),
    SoftmaxXent(Var, Vec<usize>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    source: Option<(u64, String)>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a named parameter. Frozen sets yield constants.
    pub fn param(&mut self, set: &ParamSet, name: &str) -> Result<Var> {
        let value = set.get_shared(name)?;
        let tracked = !set.is_frozen();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: tracked,
            source: tracked.then(|| (set.id(), name.to_string())),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[r, :] + bias` for every row `r`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != cols {
            return Err(Error::shape(format!(
                "bias of {:?} does not fit rows of width {cols}",
                b.shape()
            )));
        }
        let mut out = self.value(x).clone();
        for r in 0..rows {
            for (o, &bv) in out.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(b.data())
            {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).scale(k);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, k), rg)
    }

    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of nothing"));
        }
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape(format!("concat row mismatch {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Mean of squared differences, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb)?;
        let n = va.len() as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean softmax cross-entropy of `logits` rows against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.value(logits).dims2()?;
        if labels.len() != rows {
            return Err(Error::shape(format!(
                "{} labels for {rows} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape(format!("label {bad} >= {classes} classes")));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::SoftmaxXent(logits, labels.to_vec()),
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`, accumulating into the parameter
    /// sets that own the tracked leaves. Consumes the tape.
    pub fn backward(self, loss: Var, sets: &mut [&mut ParamSet]) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let grads = self.gradients(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            let (Some((set_id, name)), Some(g)) = (&node.source, grad) else {
                continue;
            };
            let set = sets
                .iter_mut()
                .find(|s| s.id() == *set_id)
                .ok_or_else(|| {
                    Error::contract(format!(
                        "parameter `{name}` is tracked but its set was not passed to backward"
                    ))
                })?;
            set.accumulate_grad(name, &g)?;
        }
        Ok(())
    }

    /// Gradient of a scalar `loss` with respect to the given variables.
    pub fn grad_wrt(self, loss: Var, wrt: &[Var]) -> Result<Vec<Option<Tensor>>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract("grad_wrt needs a scalar loss"));
        }
        let mut grads = self.gradients(loss)?;
        Ok(wrt.iter().map(|v| grads[v.0].take()).collect())
    }

    /// Marks a constant leaf as differentiable (for gradient checks on inputs).
    pub fn watch(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = va.dims2()?;
                    let (_, n) = vb.dims2()?;
                    if self.rg(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(
                            Mat::row_major(g.data(), m, n),
                            Mat::transposed(vb.data(), k, n),
                            &mut da,
                        );
                        accumulate(&mut grads, *a, Tensor::new(va.shape().to_vec(), da)?)?;
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(
                            Mat::transposed(va.data(), m, k),
                            Mat::row_major(g.data(), m, n),
                            &mut db,
                        );
                        accumulate(&mut grads, *b, Tensor::new(vb.shape().to_vec(), db)?)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.mul(self.value(*b))?)?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.mul(self.value(*a))?)?;
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.rg(*bias) {
                        let (rows, cols) = g.dims2()?;
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for (d, &gv) in db.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                                *d += gv;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads, *bias, Tensor::new(shape, db)?)?;
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g)?;
                    }
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let dx = g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Silu(x) => {
                    let dx = g.zip_map(self.value(*x), |gv, xv| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Scale(x, k) => {
                    accumulate(&mut grads, *x, g.scale(*k))?;
                }
                Op::Concat(parts) => {
                    let (rows, total) = g.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, w) = self.value(p).dims2()?;
                        if self.rg(p) {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(
                                    &g.data()[r * total + offset..r * total + offset + w],
                                );
                            }
                            let shape = self.value(p).shape().to_vec();
                            accumulate(&mut grads, p, Tensor::new(shape, d)?)?;
                        }
                        offset += w;
                    }
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let k = 2.0 * g.data()[0] / va.len() as f64;
                    let diff = va.zip_map(vb, |x, y| k * (x - y))?;
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, diff.scale(-1.0))?;
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, diff)?;
                    }
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(&shape, g.data()[0]))?;
                }
                Op::SoftmaxXent(logits, labels) => {
                    let lv = self.value(*logits);
                    let (rows, classes) = lv.dims2()?;
                    let k = g.data()[0] / rows as f64;
                    let mut d = vec![0.0; rows * classes];
                    for (r, &label) in labels.iter().enumerate() {
                        let row = lv.row_slice(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for c in 0..classes {
                            let p = (row[c] - max).exp() / z;
                            let target = if c == label { 1.0 } else { 0.0 };
                            d[r * classes + c] = k * (p - target);
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), d)?)?;
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap());
        let mut g = Graph::new();
        let v = g.param(&p, "p").unwrap();
        let loss = g.sum(v);
        g.backward(loss, &mut [&mut p]).unwrap();
        assert_eq!(p.grad("p").unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_sum_of_squares_gives_identity_gradient() {
        let values = vec![0.5, -1.0, 2.0, 3.0];
        let mut p = ParamSet::new();
        p.insert("p", Tensor::vector(values.clone()));
        let mut g = Graph::new();
        let v = g.param(&p, "p").unwrap();
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        g.backward(loss, &mut [&mut p]).unwrap();
        assert_eq!(p.grad("p").unwrap().data(), values.as_slice());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let v = g.param(&p, "p").unwrap();
        assert!(matches!(g.backward(v, &mut [&mut p]), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_parameters_are_constants() {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::vector(vec![1.0, 2.0]));
        p.freeze();
        let mut g = Graph::new();
        let v = g.param(&p, "p").unwrap();
        let loss = g.sum(v);
        g.backward(loss, &mut []).unwrap();
        assert!(!p.has_grads());
    }

    #[test]
    fn tracked_set_must_be_supplied() {
        let p = {
            let mut p = ParamSet::new();
            p.insert("p", Tensor::vector(vec![1.0]));
            p
        };
        let mut g = Graph::new();
        let v = g.param(&p, "p").unwrap();
        let loss = g.sum(v);
        assert!(g.backward(loss, &mut []).is_err());
    }

    #[test]
    fn softmax_cross_entropy_value() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 0.0]]).unwrap());
        let loss = g.softmax_cross_entropy(l, &[0, 1]).unwrap();
        let expected = (2f64.ln() + (1.0 + 1f64.exp()).ln() - 0.0) / 2.0;
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
    }
}
