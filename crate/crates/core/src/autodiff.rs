//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes created from
//! [`Graph::variable`] are differentiable leaves; [`Graph::constant`] leaves
//! are not, and nothing downstream of constants alone is ever visited during
//! [`Graph::backward`]. All reductions run in a fixed order, so a replay with
//! identical inputs is bitwise identical.
//!
//! Matrix operations treat rank-2 tensors as `[rows, cols]`. Layout changes
//! (transposes, im2col, pixel shuffles, broadcasts) are all expressed through
//! [`Graph::gather`] with a precomputed index map, see [`crate::layout`].

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index value that makes [`Graph::gather`] emit a zero (padding).
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Silu(Var),
    SoftmaxRows(Var),
    /// Saves the per-row inverse standard deviation.
    LayerNormRows(Var, Vec<f64>),
    Gather(Var, Rc<[u32]>),
    SumSquares(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if `v` does not
    /// influence the root through differentiable paths.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros if `v` has no gradient.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

const LN_EPS: f64 = 1e-5;

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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `a[r, :] + row` for every row `r` of the rank-2 tensor `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.dims2(a, "add_row")?;
        if self.value(row).len() != d {
            return Err(Error::contract(alloc::format!(
                "add_row: row of length {} for width {}",
                self.value(row).len(),
                d
            )));
        }
        let mut out = self.value(a).data().to_vec();
        let r = self.value(row).data();
        for i in 0..n {
            for (o, &b) in out[i * d..(i + 1) * d].iter_mut().zip(r) {
                *o += b;
            }
        }
        let value = Tensor::new(&[n, d], out)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// `a @ b` for `a: [n, k]`, `b: [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul lhs")?;
        let (k2, m) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::contract(alloc::format!(
                "matmul: inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let value = Tensor::new(&[n, m], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a @ b^T` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul_nt lhs")?;
        let (m, k2) = self.dims2(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::contract(alloc::format!(
                "matmul_nt: inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let value = Tensor::new(&[n, m], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMulNt(a, b), ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(value, Op::Silu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims2(a, "softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d).take(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = libm::exp(*x - max);
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let value = Tensor::new(&[n, d], out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SoftmaxRows(a), ng))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims2(a, "layer_norm_rows")?;
        let mut out = self.value(a).data().to_vec();
        let mut inv_std = Vec::with_capacity(n);
        for row in out.chunks_mut(d).take(n) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + LN_EPS);
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(&[n, d], out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::LayerNormRows(a, inv_std), ng))
    }

    /// `out[i] = a[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, index: Rc<[u32]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::contract("gather: index length does not match shape"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n);
        for &ix in index.iter() {
            if ix == GATHER_ZERO {
                out.push(0.0);
            } else {
                let v = *src
                    .get(ix as usize)
                    .ok_or_else(|| Error::contract("gather: index out of bounds"))?;
                out.push(v);
            }
        }
        let value = Tensor::new(shape, out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Gather(a, index), ng))
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        let index: Rc<[u32]> = (0..n as u32).collect();
        self.gather(a, index, shape)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_sq());
        let ng = self.ng(a);
        self.push(value, Op::SumSquares(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    fn dims2(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [n, d] => Ok((n, d)),
            ref s => Err(Error::contract(alloc::format!(
                "{what}: expected rank-2 tensor, got shape {:?}",
                s
            ))),
        }
    }

    /// Back-propagates from the scalar `root` through every node that depends
    /// on a differentiable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::contract("backward: root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes[..=root.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, grads, |ga| axpy(ga, g, 1.0));
                self.accumulate(b, grads, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, grads, |ga| axpy(ga, g, 1.0));
                self.accumulate(b, grads, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.accumulate(a, grads, |ga| {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gi * bi;
                    }
                });
                self.accumulate(b, grads, |gb| {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(va) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate(a, grads, |ga| axpy(ga, g, 1.0));
                let d = self.value(row).len();
                self.accumulate(row, grads, |gr| {
                    for chunk in g.chunks(d) {
                        axpy(gr, chunk, 1.0);
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(a, grads, |ga| axpy(ga, g, s)),
            Op::MatMul(a, b) => {
                let (n, k) = dims(self.value(a));
                let m = self.value(b).shape()[1];
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                // dA = G B^T, dB = A^T G
                self.accumulate(a, grads, |ga| kernels::matmul_nt_acc(g, vb, ga, n, m, k));
                self.accumulate(b, grads, |gb| kernels::matmul_tn_acc(va, g, gb, n, k, m));
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = dims(self.value(a));
                let m = self.value(b).shape()[0];
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                // dA = G B, dB = G^T A
                self.accumulate(a, grads, |ga| kernels::matmul_acc(g, vb, ga, n, m, k));
                self.accumulate(b, grads, |gb| kernels::matmul_tn_acc(g, va, gb, n, m, k));
            }
            Op::Silu(a) => {
                let va = self.value(a).data();
                self.accumulate(a, grads, |ga| {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(va) {
                        let s = sigmoid(x);
                        *o += gi * s * (1.0 + x * (1.0 - s));
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let d = out.shape()[1];
                let y = out.data();
                self.accumulate(a, grads, |ga| {
                    for ((gr, yr), ar) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &yi) in ar.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows(a, ref inv_std) => {
                let d = out.shape()[1];
                let y = out.data();
                self.accumulate(a, grads, |ga| {
                    for (((gr, yr), ar), &inv) in g
                        .chunks(d)
                        .zip(y.chunks(d))
                        .zip(ga.chunks_mut(d))
                        .zip(inv_std)
                    {
                        let mean_g = gr.iter().sum::<f64>() / d as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, &gi), &yi) in ar.iter_mut().zip(gr).zip(yr) {
                            *o += inv * (gi - mean_g - yi * mean_gy);
                        }
                    }
                });
            }
            Op::Gather(a, ref index) => {
                self.accumulate(a, grads, |ga| {
                    for (&ix, &gi) in index.iter().zip(g) {
                        if ix != GATHER_ZERO {
                            ga[ix as usize] += gi;
                        }
                    }
                });
            }
            Op::SumSquares(a) => {
                let va = self.value(a).data();
                let s = 2.0 * g[0];
                self.accumulate(a, grads, |ga| axpy(ga, va, s));
            }
            Op::Sum(a) => {
                let s = g[0];
                self.accumulate(a, grads, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
        }
    }

    fn accumulate(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dense kernels. Loop orders keep the innermost loop contiguous.
pub(crate) mod kernels {
    /// out[n,m] = a[n,k] b[k,m]
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        matmul_acc(a, b, out, n, k, m);
    }

    /// out[n,m] += a[n,k] b[k,m]
    pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }

    /// out[n,m] = a[n,k] b[m,k]^T
    pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        matmul_nt_acc(a, b, out, n, k, m);
    }

    /// out[n,m] += a[n,k] b[m,k]^T
    pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// out[k,m] += a[n,k]^T b[n,m]
    pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let brow = &b[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in out[p * m..(p + 1) * m].iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }

    /// Four-lane dot product; fixed summation order.
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = [0.0f64; 4];
        let chunks = a.len() / 4;
        for c in 0..chunks {
            let i = c * 4;
            acc[0] += a[i] * b[i];
            acc[1] += a[i + 1] * b[i + 1];
            acc[2] += a[i + 2] * b[i + 2];
            acc[3] += a[i + 3] * b[i + 3];
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for i in chunks * 4..a.len() {
            s += a[i] * b[i];
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn fd_check(
        shape: &[usize],
        seed: u64,
        build: impl Fn(&mut Graph, Var) -> Var,
    ) {
        let mut r = rng::seeded(seed);
        let x0 = rng::normal_tensor(&mut r, shape);
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y).unwrap();
        let analytic = grads.wrt(x);
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.constant(xp);
                let y = build(&mut g, x);
                g.value(y).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                "coordinate {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn matmul_gradients() {
        fd_check(&[3, 4], 1, |g, x| {
            let w = g.constant(Tensor::from_fn(&[4, 2], |i| 0.1 * i as f64 - 0.3));
            let y = g.matmul(x, w).unwrap();
            g.sum_squares(y)
        });
        fd_check(&[4, 2], 2, |g, w| {
            let x = g.constant(Tensor::from_fn(&[3, 4], |i| 0.2 * i as f64 - 1.0));
            let y = g.matmul(x, w).unwrap();
            g.sum_squares(y)
        });
    }

    #[test]
    fn matmul_nt_gradients_both_sides() {
        fd_check(&[3, 4], 3, |g, x| {
            let y = g.matmul_nt(x, x).unwrap();
            let s = g.silu(y);
            g.sum(s)
        });
    }

    #[test]
    fn attention_like_chain() {
        fd_check(&[5, 3], 4, |g, x| {
            let n = g.layer_norm_rows(x).unwrap();
            let s = g.matmul_nt(n, x).unwrap();
            let s = g.scale(s, 0.7);
            let p = g.softmax_rows(s).unwrap();
            let o = g.matmul(p, x).unwrap();
            let row = g.constant(Tensor::from_fn(&[3], |i| i as f64));
            let o = g.add_row(o, row).unwrap();
            let m = g.mul(o, x).unwrap();
            let d = g.sub(m, n).unwrap();
            g.sum_squares(d)
        });
    }

    #[test]
    fn gather_with_padding() {
        fd_check(&[2, 3], 5, |g, x| {
            let index: Rc<[u32]> = vec![5, 0, GATHER_ZERO, 0, 3, 1].into();
            let y = g.gather(x, index, &[3, 2]).unwrap();
            let y2 = g.add(y, y).unwrap();
            g.sum_squares(y2)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 1.0));
        let v = g.variable(Tensor::full(&[2], 2.0));
        let m = g.mul(c, v).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let v = g.variable(Tensor::full(&[2], 2.0));
        assert!(g.backward(v).is_err());
    }
}
