//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive appends one node to the [`Tape`], holding its forward
//! value and whatever it needs for the backward pass. [`Tape::backward`]
//! walks the nodes in reverse order exactly once, so the recorded order is
//! already a valid topological order.
//!
//! Nodes created with [`Tape::constant`] or [`Tape::detach`] never receive
//! gradients and stop propagation into their lineage.

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for running-statistics updates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    Relu(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax(Var),
    Exp(Var),
    ClampMin {
        x: Var,
        min: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Reverse-mode gradients of a scalar with respect to every tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is not connected to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for `v`; zeros when `v` is unreachable or detached.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[v.0]],
        }
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Channel layout shared by the batch-norm primitives: `[N, C]` or `[N, C, H, W]`.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(mismatch(op, format!("expected rank 2 or 4 input, got {shape:?}"))),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, requires_grad: bool) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input (parameter or attacked image).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var, TensorError> {
        self.push("leaf", t, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, TensorError> {
        self.push("constant", t, Op::Constant, false)
    }

    /// Same value as `v`, with its lineage severed.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (n, din) = match xs {
            [n, d] => (*n, *d),
            _ => return Err(mismatch("affine", format!("input must be [N, in], got {xs:?}"))),
        };
        let dout = match ws {
            [o, i] if *i == din => *o,
            _ => return Err(mismatch("affine", format!("weight {ws:?} incompatible with input {xs:?}"))),
        };
        if bs != [dout] {
            return Err(mismatch("affine", format!("bias {bs:?} incompatible with weight {ws:?}")));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let xr = &xv[r * din..(r + 1) * din];
            let yr = &mut out[r * dout..(r + 1) * dout];
            for (o, y) in yr.iter_mut().enumerate() {
                let wr = &wv[o * din..(o + 1) * din];
                *y = bv[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        self.push("affine", Tensor::new(vec![n, dout], out)?, Op::Affine { x, w, b }, rg)
    }

    /// Stride-1 2-D convolution with symmetric zero padding.
    /// `x: [N, C, H, W]`, `w: [O, C, K, K]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let [n, c, h, wd] = xs[..] else {
            return Err(mismatch("conv2d", format!("input must be [N, C, H, W], got {xs:?}")));
        };
        let [o, wc, k, k2] = ws[..] else {
            return Err(mismatch("conv2d", format!("weight must be [O, C, K, K], got {ws:?}")));
        };
        if wc != c || k != k2 {
            return Err(mismatch("conv2d", format!("weight {ws:?} incompatible with input {xs:?}")));
        }
        if bs != [o] {
            return Err(mismatch("conv2d", format!("bias {bs:?} incompatible with weight {ws:?}")));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(mismatch("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")));
        }
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                let y = &mut out[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                y.iter_mut().for_each(|v| *v = bv[oi]);
                for ci in 0..c {
                    let xp = &xv[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    for ki in 0..k {
                        for kj in 0..k {
                            let wk = wv[((oi * c + ci) * k + ki) * k + kj];
                            let (i_lo, i_hi, j_lo, j_hi) = tap_range(ki, kj, pad, (h, wd), (ho, wo));
                            for i in i_lo..i_hi {
                                let xrow = &xp[(i + ki - pad) * wd..];
                                let yrow = &mut y[i * wo..(i + 1) * wo];
                                for j in j_lo..j_hi {
                                    yrow[j] += wk * xrow[j + kj - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        self.push("conv2d", Tensor::new(vec![n, o, ho, wo], out)?, Op::Conv2d { x, w, b, pad }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push("relu", out, Op::Relu(x), rg)
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// observed per-channel statistics.
    #[allow(clippy::needless_range_loop)]
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), TensorError> {
        let (n, c, s) = channel_layout("batch_norm_train", self.shape(x))?;
        self.check_channel_params("batch_norm_train", c, gamma, beta)?;
        let m = n * s;
        if m < 2 {
            return Err(TensorError::BatchTooSmall {
                op: "batch_norm_train",
                count: m,
            });
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                mean[ci] += xv[base..base + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                var[ci] += xv[base..base + s].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (normalized, out) = self.normalize(x, gamma, beta, &mean, &inv_std, (n, c, s));
        let stats = BatchStats {
            mean,
            var: var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect(),
        };
        let rg = self.any_grad(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            "batch_norm_train",
            Tensor::new(shape, out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        )?;
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (n, c, s) = channel_layout("batch_norm_eval", self.shape(x))?;
        self.check_channel_params("batch_norm_eval", c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(mismatch("batch_norm_eval", format!("statistics for {} channels, input has {c}", mean.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (normalized, out) = self.normalize(x, gamma, beta, mean, &inv_std, (n, c, s));
        let rg = self.any_grad(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        self.push(
            "batch_norm_eval",
            Tensor::new(shape, out)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    fn check_channel_params(&self, op: &'static str, c: usize, gamma: Var, beta: Var) -> Result<(), TensorError> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch(
                op,
                format!("affine params {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(())
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        (n, c, s): (usize, usize, usize),
    ) -> (Vec<f64>, Vec<f64>) {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for i in base..base + s {
                    let z = (xv[i] - mean[ci]) * inv_std[ci];
                    normalized[i] = z;
                    out[i] = g[ci] * z + b[ci];
                }
            }
        }
        (normalized, out)
    }

    /// Row-wise log-softmax over the last axis of `[N, K]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let [n, k] = xs[..] else {
            return Err(mismatch("log_softmax", format!("expected [N, K], got {xs:?}")));
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * k];
        for r in 0..n {
            let row = &xv[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.any_grad(&[x]);
        self.push("log_softmax", Tensor::new(xs, out)?, Op::LogSoftmax(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(f64::exp);
        let rg = self.any_grad(&[x]);
        self.push("exp", out, Op::Exp(x), rg)
    }

    /// Elementwise `max(x, min)`; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v.max(min));
        let rg = self.any_grad(&[x]);
        self.push("clamp_min", out, Op::ClampMin { x, min }, rg)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(op, out, node, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push("scale", out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.any_grad(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Picks `x[r, index[r]]` from each row of `[N, K]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let [n, k] = xs[..] else {
            return Err(mismatch("gather", format!("expected [N, K], got {xs:?}")));
        };
        if index.len() != n {
            return Err(mismatch("gather", format!("{} indices for {n} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            return Err(mismatch("gather", format!("index {bad} out of range for {k} columns")));
        }
        let xv = self.value(x).data();
        let out = index.iter().enumerate().map(|(r, &i)| xv[r * k + i]).collect();
        let rg = self.any_grad(&[x]);
        self.push(
            "gather",
            Tensor::new(vec![n], out)?,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        self.push("reshape", out, Op::Reshape(x), rg)
    }

    /// Flattens all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let shape = [t.batch_len(), t.row_len()];
        self.reshape(x, &shape)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &lens);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, lens })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], lens: &[usize]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::Affine { x, w, b } => {
                let xs = self.shape(x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(w)[0];
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                if rg(x) {
                    accumulate(&mut grads[x.0], lens[x.0], |dx| {
                        for r in 0..n {
                            let dxr = &mut dx[r * din..(r + 1) * din];
                            for o in 0..dout {
                                let gy = g[r * dout + o];
                                if gy != 0.0 {
                                    for (d, wv) in dxr.iter_mut().zip(&wv[o * din..(o + 1) * din]) {
                                        *d += gy * wv;
                                    }
                                }
                            }
                        }
                    });
                }
                if rg(w) {
                    accumulate(&mut grads[w.0], lens[w.0], |dw| {
                        for r in 0..n {
                            let xr = &xv[r * din..(r + 1) * din];
                            for o in 0..dout {
                                let gy = g[r * dout + o];
                                if gy != 0.0 {
                                    for (d, xv) in dw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                                        *d += gy * xv;
                                    }
                                }
                            }
                        }
                    });
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], lens[b.0], |db| {
                        for r in 0..n {
                            for o in 0..dout {
                                db[o] += g[r * dout + o];
                            }
                        }
                    });
                }
            }
            &Op::Conv2d { x, w, b, pad } => {
                let (n, c, h, wd) = {
                    let s = self.shape(x);
                    (s[0], s[1], s[2], s[3])
                };
                let (o, k) = (self.shape(w)[0], self.shape(w)[2]);
                let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                if rg(x) {
                    accumulate(&mut grads[x.0], lens[x.0], |dx| {
                        for ni in 0..n {
                            for oi in 0..o {
                                let gy = &g[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                                for ci in 0..c {
                                    let dxp = &mut dx[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                                    for ki in 0..k {
                                        for kj in 0..k {
                                            let wk = wv[((oi * c + ci) * k + ki) * k + kj];
                                            let (i_lo, i_hi, j_lo, j_hi) = tap_range(ki, kj, pad, (h, wd), (ho, wo));
                                            for i in i_lo..i_hi {
                                                let xi = i + ki - pad;
                                                let drow = &mut dxp[xi * wd..(xi + 1) * wd];
                                                let grow = &gy[i * wo..(i + 1) * wo];
                                                for j in j_lo..j_hi {
                                                    drow[j + kj - pad] += wk * grow[j];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if rg(w) {
                    accumulate(&mut grads[w.0], lens[w.0], |dw| {
                        for ni in 0..n {
                            for oi in 0..o {
                                let gy = &g[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                                for ci in 0..c {
                                    let xp = &xv[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                                    for ki in 0..k {
                                        for kj in 0..k {
                                            let (i_lo, i_hi, j_lo, j_hi) = tap_range(ki, kj, pad, (h, wd), (ho, wo));
                                            let mut acc = 0.0;
                                            for i in i_lo..i_hi {
                                                let xrow = &xp[(i + ki - pad) * wd..];
                                                let grow = &gy[i * wo..(i + 1) * wo];
                                                for j in j_lo..j_hi {
                                                    acc += grow[j] * xrow[j + kj - pad];
                                                }
                                            }
                                            dw[((oi * c + ci) * k + ki) * k + kj] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], lens[b.0], |db| {
                        for ni in 0..n {
                            for oi in 0..o {
                                db[oi] += g[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            &Op::Relu(x) => {
                if rg(x) {
                    let xv = self.value(x).data();
                    accumulate(&mut grads[x.0], lens[x.0], |dx| {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xv) {
                            if xv > 0.0 {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (n, c, s) = channel_layout("batch_norm_train", self.shape(*x)).expect("checked in forward");
                let m = (n * s) as f64;
                let gv = self.value(*gamma).data();
                let (sum_g, sum_gz) = channel_sums(g, normalized, (n, c, s));
                if rg(*x) {
                    accumulate(&mut grads[x.0], lens[x.0], |dx| {
                        for ni in 0..n {
                            for ci in 0..c {
                                let scale = gv[ci] * inv_std[ci] / m;
                                let base = (ni * c + ci) * s;
                                for i in base..base + s {
                                    dx[i] += scale * (m * g[i] - sum_g[ci] - normalized[i] * sum_gz[ci]);
                                }
                            }
                        }
                    });
                }
                self.bn_affine_grads(*gamma, *beta, &sum_g, &sum_gz, grads, lens);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (n, c, s) = channel_layout("batch_norm_eval", self.shape(*x)).expect("checked in forward");
                let gv = self.value(*gamma).data();
                if rg(*x) {
                    accumulate(&mut grads[x.0], lens[x.0], |dx| {
                        for ni in 0..n {
                            for ci in 0..c {
                                let scale = gv[ci] * inv_std[ci];
                                let base = (ni * c + ci) * s;
                                for i in base..base + s {
                                    dx[i] += scale * g[i];
                                }
                            }
                        }
                    });
                }
                let (sum_g, sum_gz) = channel_sums(g, normalized, (n, c, s));
                self.bn_affine_grads(*gamma, *beta, &sum_g, &sum_gz, grads, lens);
            }
            &Op::LogSoftmax(x) => {
                if rg(x) {
                    let yv = node.value.data();
                    let k = node.value.shape()[1];
                    accumulate(&mut grads[x.0], lens[x.0], |dx| {
                        for ((dr, gr), yr) in dx.chunks_mut(k).zip(g.chunks(k)).zip(yv.chunks(k)) {
                            let total: f64 = gr.iter().sum();
                            for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += gv - yv.exp() * total;
                            }
                        }
                    });
                }
            }
            &Op::Exp(x) => {
                if rg(x) {
                    let yv = node.value.data();
                    accumulate(&mut grads[x.0], lens[x.0], |dx| {
                        for ((d, gv), yv) in dx.iter_mut().zip(g).zip(yv) {
                            *d += gv * yv;
                        }
                    });
                }
            }
            &Op::ClampMin { x, min } => {
                if rg(x) {
                    let xv = self.value(x).data();
                    accumulate(&mut grads[x.0], lens[x.0], |dx| {
                        for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xv) {
                            if *xv >= min {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if rg(v) {
                        accumulate(&mut grads[v.0], lens[v.0], |d| add_into(d, g, 1.0));
                    }
                }
            }
            &Op::Sub(a, b) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], lens[a.0], |d| add_into(d, g, 1.0));
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], lens[b.0], |d| add_into(d, g, -1.0));
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    let bv = self.value(b).data();
                    accumulate(&mut grads[a.0], lens[a.0], |d| {
                        for ((d, gv), bv) in d.iter_mut().zip(g).zip(bv) {
                            *d += gv * bv;
                        }
                    });
                }
                if rg(b) {
                    let av = self.value(a).data();
                    accumulate(&mut grads[b.0], lens[b.0], |d| {
                        for ((d, gv), av) in d.iter_mut().zip(g).zip(av) {
                            *d += gv * av;
                        }
                    });
                }
            }
            &Op::Scale(x, c) => {
                if rg(x) {
                    accumulate(&mut grads[x.0], lens[x.0], |d| add_into(d, g, c));
                }
            }
            &Op::Sum(x) => {
                if rg(x) {
                    accumulate(&mut grads[x.0], lens[x.0], |d| d.iter_mut().for_each(|v| *v += g[0]));
                }
            }
            &Op::Mean(x) => {
                if rg(x) {
                    let share = g[0] / lens[x.0] as f64;
                    accumulate(&mut grads[x.0], lens[x.0], |d| d.iter_mut().for_each(|v| *v += share));
                }
            }
            Op::Gather { x, index } => {
                if rg(*x) {
                    let k = self.shape(*x)[1];
                    accumulate(&mut grads[x.0], lens[x.0], |d| {
                        for (r, &i) in index.iter().enumerate() {
                            d[r * k + i] += g[r];
                        }
                    });
                }
            }
            &Op::Reshape(x) => {
                if rg(x) {
                    accumulate(&mut grads[x.0], lens[x.0], |d| add_into(d, g, 1.0));
                }
            }
        }
    }

    fn bn_affine_grads(
        &self,
        gamma: Var,
        beta: Var,
        sum_g: &[f64],
        sum_gz: &[f64],
        grads: &mut [Option<Vec<f64>>],
        lens: &[usize],
    ) {
        if self.nodes[gamma.0].requires_grad {
            accumulate(&mut grads[gamma.0], lens[gamma.0], |d| add_into(d, sum_gz, 1.0));
        }
        if self.nodes[beta.0].requires_grad {
            accumulate(&mut grads[beta.0], lens[beta.0], |d| add_into(d, sum_g, 1.0));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn channel_sums(g: &[f64], z: &[f64], (n, c, s): (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let mut sum_g = vec![0.0; c];
    let mut sum_gz = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * s;
            for i in base..base + s {
                sum_g[ci] += g[i];
                sum_gz[ci] += g[i] * z[i];
            }
        }
    }
    (sum_g, sum_gz)
}

/// Output index ranges `(i_lo, i_hi, j_lo, j_hi)` whose input pixel under
/// kernel tap `(ki, kj)` lies inside the unpadded image. Output `(i, j)`
/// reads input `(i + ki - pad, j + kj - pad)`.
fn tap_range(ki: usize, kj: usize, pad: usize, (h, wd): (usize, usize), (ho, wo): (usize, usize)) -> (usize, usize, usize, usize) {
    (
        pad.saturating_sub(ki),
        (h + pad).saturating_sub(ki).min(ho),
        pad.saturating_sub(kj),
        (wd + pad).saturating_sub(kj).min(wo),
    )
}
