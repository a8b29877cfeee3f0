//! Reverse-mode automatic differentiation over coarse layer operations.
//!
//! Each node of the tape holds the forward value of one layer-level
//! operation (convolution, pooling, dense, activation, loss). The backward
//! pass walks the nodes in reverse creation order, which is a valid
//! topological order because a node can only reference earlier nodes.

use super::{ParameterVector, Tensor};
use crate::{Error, Result, Scalar};

/// Probability clamp used by the log-losses.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param { name: String },
    Conv2d { x: Var, w: Var, b: Var, cols: Vec<T> },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<u32> },
    Flatten { x: Var },
    Dense { x: Var, w: Var, b: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    WeightedBce { p: Var, labels: Vec<u8>, w_neg: f64, w_pos: f64 },
    SoftmaxCe { p: Var, labels: Vec<usize> },
    Mse { x: Var, targets: Vec<f64> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record produced by a forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    losses: Vec<(Var, f64)>,
    consumed: bool,
}

impl<T> std::fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            losses: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Loss value accumulated in double precision.
    pub fn loss_value(&self, v: Var) -> Option<f64> {
        self.losses.iter().find(|(l, _)| *l == v).map(|(_, x)| *x)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.push(value, Op::Param { name: name.into() }, true)
    }

    /// Valid (unpadded) stride-1 convolution. `x`: (N, C, H, W),
    /// `w`: (F, C, K, K), `b`: (F).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d input {xs:?} kernel {ws:?}")));
        }
        if bs != [ws[0]] {
            return Err(Error::Shape(format!("conv2d bias {bs:?} for {} filters", ws[0])));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, k) = (ws[0], ws[2]);
        if k > h || k > wd {
            return Err(Error::Shape(format!("kernel {k} larger than input {h}x{wd}")));
        }
        let (ho, wo) = (h - k + 1, wd - k + 1);
        let p = ho * wo;
        let q = c * k * k;
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let bdat = self.value(b).data();
        let mut cols = vec![T::zero(); n * q * p];
        let mut out = vec![T::zero(); n * f * p];
        for img in 0..n {
            let xi = &xd[img * c * h * wd..(img + 1) * c * h * wd];
            let ci = &mut cols[img * q * p..(img + 1) * q * p];
            im2col(xi, c, h, wd, k, ho, wo, ci);
            let oi = &mut out[img * f * p..(img + 1) * f * p];
            for fi in 0..f {
                let orow = &mut oi[fi * p..(fi + 1) * p];
                orow.fill(bdat[fi]);
                for qi in 0..q {
                    axpy(wdat[fi * q + qi], &ci[qi * p..(qi + 1) * p], orow);
                }
            }
        }
        let value = Tensor::new(vec![n, f, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, cols }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Non-overlapping max pooling with window and stride `size`; trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn maxpool(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || size == 0 || xs[2] < size || xs[3] < size {
            return Err(Error::Shape(format!("maxpool({size}) on {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / size, w / size);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// (N, ...) -> (N, prod(...)).
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.shape()[0];
        let rest = v.len() / n;
        let value = v.clone().reshape(vec![n, rest])?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Flatten { x }, rg))
    }

    /// `x`: (N, D), `w`: (U, D), `b`: (U) -> (N, U).
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.value(b).shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "dense input {xs:?} weight {ws:?} bias {:?}",
                self.value(b).shape()
            )));
        }
        let (n, d, u) = (xs[0], xs[1], ws[0]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(n * u);
        for row in 0..n {
            let xr = &xd[row * d..(row + 1) * d];
            for ui in 0..u {
                out.push(bd[ui] + dot(&wd[ui * d..(ui + 1) * d], xr));
            }
        }
        let value = Tensor::new(vec![n, u], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Row-wise softmax over the last axis of an (N, K) tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape(format!("softmax expects (N, K), got {xs:?}")));
        }
        let k = xs[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Class-weighted binary cross-entropy on probabilities:
    /// `(1/N) Σ −[w_pos·y·ln p + w_neg·(1−y)·ln(1−p)]`, with `p` clamped to
    /// `[ε, 1−ε]`.
    pub fn weighted_bce(&mut self, p: Var, labels: &[u8], w_neg: f64, w_pos: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} probabilities vs {} labels",
                pv.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::InvalidArgument("binary labels must be 0 or 1".into()));
        }
        let n = labels.len() as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let pc = p.as_f64().clamp(PROB_EPS, 1.0 - PROB_EPS);
                if y == 1 {
                    -w_pos * pc.ln()
                } else {
                    -w_neg * (1.0 - pc).ln()
                }
            })
            .sum();
        let loss = total / n;
        let rg = self.rg(p);
        let v = self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::WeightedBce {
                p,
                labels: labels.to_vec(),
                w_neg,
                w_pos,
            },
            rg,
        );
        self.losses.push((v, loss));
        Ok(v)
    }

    /// Mean negative log-likelihood of softmax probabilities.
    pub fn softmax_ce(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let pv = self.value(p);
        let shape = pv.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape(format!(
                "probabilities {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let k = shape[1];
        if labels.iter().any(|&y| y >= k) {
            return Err(Error::InvalidArgument(format!("label out of range for {k} classes")));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -pv.data()[i * k + y].as_f64().clamp(PROB_EPS, 1.0).ln())
            .sum();
        let loss = total / labels.len() as f64;
        let rg = self.rg(p);
        let v = self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::SoftmaxCe {
                p,
                labels: labels.to_vec(),
            },
            rg,
        );
        self.losses.push((v, loss));
        Ok(v)
    }

    /// Mean squared error against fixed targets.
    pub fn mse(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} outputs vs {} targets",
                xv.len(),
                targets.len()
            )));
        }
        let total: f64 = xv
            .data()
            .iter()
            .zip(targets)
            .map(|(&a, &t)| (a.as_f64() - t).powi(2))
            .sum();
        let loss = total / targets.len() as f64;
        let rg = self.rg(x);
        let v = self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::Mse {
                x,
                targets: targets.to_vec(),
            },
            rg,
        );
        self.losses.push((v, loss));
        Ok(v)
    }

    /// Gradient of the scalar `loss` node with respect to every parameter
    /// registered through [`Tape::param`], in registration order.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<ParameterVector<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward requires a scalar loss".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param { .. } => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d { x, w, b, cols } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xs = self.node(x).value.shape();
                    let ws = self.node(w).value.shape();
                    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (f, k) = (ws[0], ws[2]);
                    let (ho, wo) = (h - k + 1, wd - k + 1);
                    let p = ho * wo;
                    let q = c * k * k;
                    let wdat = self.node(w).value.data();
                    let mut dw = vec![T::zero(); f * q];
                    let mut db = vec![T::zero(); f];
                    let need_dx = self.rg(x);
                    let mut dx = if need_dx { vec![T::zero(); n * c * h * wd] } else { Vec::new() };
                    let mut dcols = vec![T::zero(); q * p];
                    for img in 0..n {
                        let gi = &g[img * f * p..(img + 1) * f * p];
                        let ci = &cols[img * q * p..(img + 1) * q * p];
                        for fi in 0..f {
                            let grow = &gi[fi * p..(fi + 1) * p];
                            db[fi] += grow.iter().copied().sum::<T>();
                            for qi in 0..q {
                                dw[fi * q + qi] += dot(grow, &ci[qi * p..(qi + 1) * p]);
                            }
                        }
                        if need_dx {
                            dcols.fill(T::zero());
                            for fi in 0..f {
                                let grow = &gi[fi * p..(fi + 1) * p];
                                for qi in 0..q {
                                    axpy(wdat[fi * q + qi], grow, &mut dcols[qi * p..(qi + 1) * p]);
                                }
                            }
                            let dxi = &mut dx[img * c * h * wd..(img + 1) * c * h * wd];
                            col2im(&dcols, c, h, wd, k, ho, wo, dxi);
                        }
                    }
                    accumulate(&mut grads, w, dw);
                    accumulate(&mut grads, b, db);
                    if need_dx {
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    let xv = self.node(x).value.data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let x = *x;
                    let mut dx = vec![T::zero(); self.node(x).value.len()];
                    for (&gv, &src) in g.iter().zip(argmax) {
                        dx[src as usize] += gv;
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Flatten { x } => {
                    let x = *x;
                    accumulate(&mut grads, x, g);
                }
                Op::Dense { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xs = self.node(x).value.shape();
                    let (n, d) = (xs[0], xs[1]);
                    let u = self.node(w).value.shape()[0];
                    let xd = self.node(x).value.data();
                    let wdat = self.node(w).value.data();
                    let mut dw = vec![T::zero(); u * d];
                    let mut db = vec![T::zero(); u];
                    let need_dx = self.rg(x);
                    let mut dx = if need_dx { vec![T::zero(); n * d] } else { Vec::new() };
                    for row in 0..n {
                        let xr = &xd[row * d..(row + 1) * d];
                        for ui in 0..u {
                            let gv = g[row * u + ui];
                            db[ui] += gv;
                            axpy(gv, xr, &mut dw[ui * d..(ui + 1) * d]);
                            if need_dx {
                                axpy(gv, &wdat[ui * d..(ui + 1) * d], &mut dx[row * d..(row + 1) * d]);
                            }
                        }
                    }
                    accumulate(&mut grads, w, dw);
                    accumulate(&mut grads, b, db);
                    if need_dx {
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let y = self.nodes[idx].value.data();
                    let dx = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect();
                    accumulate(&mut grads, x, dx);
                }
                Op::Softmax { x } => {
                    let x = *x;
                    let y = &self.nodes[idx].value;
                    let k = y.shape()[1];
                    let mut dx = vec![T::zero(); y.len()];
                    for ((gr, yr), dr) in g.chunks(k).zip(y.data().chunks(k)).zip(dx.chunks_mut(k)) {
                        let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = yv * (gv - s);
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::WeightedBce { p, labels, w_neg, w_pos } => {
                    let p = *p;
                    let pv = self.node(p).value.data();
                    let n = labels.len() as f64;
                    let g0 = g[0].as_f64();
                    let dp = pv
                        .iter()
                        .zip(labels)
                        .map(|(&pr, &y)| {
                            let pr = pr.as_f64();
                            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&pr) {
                                return T::zero();
                            }
                            let d = if y == 1 { -w_pos / pr } else { w_neg / (1.0 - pr) };
                            T::from_f64_lossy(g0 * d / n)
                        })
                        .collect();
                    accumulate(&mut grads, p, dp);
                }
                Op::SoftmaxCe { p, labels } => {
                    let p = *p;
                    let pv = &self.node(p).value;
                    let k = pv.shape()[1];
                    let n = labels.len() as f64;
                    let g0 = g[0].as_f64();
                    let mut dp = vec![T::zero(); pv.len()];
                    for (i, &y) in labels.iter().enumerate() {
                        let pr = pv.data()[i * k + y].as_f64();
                        if pr >= PROB_EPS {
                            dp[i * k + y] = T::from_f64_lossy(-g0 / (n * pr));
                        }
                    }
                    accumulate(&mut grads, p, dp);
                }
                Op::Mse { x, targets } => {
                    let x = *x;
                    let xv = self.node(x).value.data();
                    let n = targets.len() as f64;
                    let g0 = g[0].as_f64();
                    let dx = xv
                        .iter()
                        .zip(targets)
                        .map(|(&a, &t)| T::from_f64_lossy(g0 * 2.0 * (a.as_f64() - t) / n))
                        .collect();
                    accumulate(&mut grads, x, dx);
                }
            }
        }

        let mut out = ParameterVector::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param { name } = &node.op {
                let data = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                out.push(name.clone(), Tensor::new(node.value.shape().to_vec(), data)?)?;
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (pa, pb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for j in 0..8 {
            acc[j] += pa[j] * pb[j];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let src = &x[ci * h * w + (oy + ky) * w + kx..][..wo];
                    row[oy * wo..(oy + 1) * wo].copy_from_slice(src);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, ho: usize, wo: usize, dx: &mut [T]) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let dst = &mut dx[ci * h * w + (oy + ky) * w + kx..][..wo];
                    for (d, &s) in dst.iter_mut().zip(&row[oy * wo..(oy + 1) * wo]) {
                        *d += s;
                    }
                }
            }
        }
    }
}
