//! A small reverse-mode automatic differentiation tape.
//!
//! Every network in the crate (backbone, recurrent predictor, discriminator,
//! IoU head) is expressed as a sequence of [`Graph`] operations so that one
//! backward pass yields gradients for all trainable tensors.

use crate::size_estimator::pool_kernel;
use crate::tensor::{conv2d, conv2d_backward, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        invstd: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        invstd: Vec<f64>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Tensor),
    ConcatChannels(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
        len: usize,
    },
    StackBatch(Vec<Var>),
    SelectBatch {
        x: Var,
        index: usize,
    },
    GatherBatch {
        x: Var,
        indices: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    MeanAll(Var),
    SoftplusMean {
        x: Var,
        sign: f64,
    },
    PoolRegion {
        fm: Var,
        bx: Var,
        stride: f64,
        offset: f64,
        k: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode normalization layer.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` if no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// (N, C, spatial) view of a tensor with at least two axes.
fn ncs(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    let spatial = s[2..].iter().product::<usize>();
    (s[0], s[1], spatial)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` with gradient flow cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Per-channel normalization with batch statistics over all but axis 1.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (n, c, s) = ncs(xv);
        let m = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                let off = (b * c + ch) * s;
                *m += xv.data()[off..off + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                var[ch] += xv.data()[off..off + s]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, &mean, &invstd);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            },
            rg,
        );
        (v, BatchStats { mean, var })
    }

    /// Per-channel normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Var {
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, mean, &invstd);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            },
            rg,
        )
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], invstd: &[f64]) -> (Tensor, Tensor) {
        let xv = self.value(x);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let (n, c, s) = ncs(xv);
        let mut xhat = Tensor::zeros(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    let h = (xv.data()[i] - mean[ch]) * invstd[ch];
                    xhat.data_mut()[i] = h;
                    out.data_mut()[i] = g[ch] * h + bt[ch];
                }
            }
        }
        (xhat, out)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Var {
        let out = self.value(x).zip_map(c, |a, b| a + b);
        let rg = self.rg(x);
        self.push(out, Op::AddConst(x), rg)
    }

    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        let rg = self.rg(x);
        self.push(out, Op::MulConst(x, c), rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]);
        let (n, _, s) = ncs(first);
        let mut shape = first.shape().to_vec();
        let total_c: usize = parts.iter().map(|&p| self.value(p).dim(1)).sum();
        shape[1] = total_c;
        let mut data = Vec::with_capacity(n * total_c * s);
        for b in 0..n {
            for &p in parts {
                let pv = self.value(p);
                let (pn, pc, ps) = ncs(pv);
                assert!(pn == n && ps == s, "concat_channels shape mismatch");
                data.extend_from_slice(&pv.data()[b * pc * s..(b + 1) * pc * s]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&shape, data), Op::ConcatChannels(parts.to_vec()), rg)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, c, s) = ncs(xv);
        assert!(start + len <= c);
        let mut shape = xv.shape().to_vec();
        shape[1] = len;
        let mut data = Vec::with_capacity(n * len * s);
        for b in 0..n {
            let off = (b * c + start) * s;
            data.extend_from_slice(&xv.data()[off..off + len * s]);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&shape, data), Op::SliceChannels { x, start, len }, rg)
    }

    pub fn stack_batch(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::stack(&refs);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::StackBatch(parts.to_vec()), rg)
    }

    pub fn select_batch(&mut self, x: Var, index: usize) -> Var {
        let out = self.value(x).slice_outer(index);
        let rg = self.rg(x);
        self.push(out, Op::SelectBatch { x, index }, rg)
    }

    /// Rows `indices` of `x` along the batch axis, in that order.
    pub fn gather_batch(&mut self, x: Var, indices: &[usize]) -> Var {
        let xv = self.value(x);
        let inner = xv.len() / xv.dim(0);
        let mut shape = xv.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            assert!(i < xv.dim(0), "gather index {i} out of range");
            data.extend_from_slice(&xv.data()[i * inner..(i + 1) * inner]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&shape, data),
            Op::GatherBatch {
                x,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, s) = ncs(xv);
        let data = xv
            .data()
            .chunks(s)
            .map(|ch| ch.iter().sum::<f64>() / s as f64)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c], data), Op::GlobalAvgPool(x), rg)
    }

    /// `y = x·wᵀ + b` with `x: N×I`, `w: O×I`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, i) = (xv.dim(0), xv.len() / xv.dim(0));
        let o = wv.dim(0);
        assert_eq!(wv.len(), o * i, "linear shape mismatch");
        let mut out = Tensor::zeros(&[n, o]);
        for r in 0..n {
            out.data_mut()[r * o..(r + 1) * o].copy_from_slice(bv.data());
        }
        crate::tensor::gemm(n, i, o, 1.0, xv.data(), false, wv.data(), true, 1.0, out.data_mut());
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.sum() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg)
    }

    /// Mean of squared differences between `a` and a constant target.
    pub fn mse_to_const(&mut self, a: Var, target: &Tensor) -> Var {
        let neg = target.map(|v| -v);
        let d = self.add_const(a, &neg);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// `mean(softplus(sign · clamp(x, ±30)))`.
    ///
    /// With `sign = -1` this is `mean(−log σ(x))`, with `sign = +1` it is
    /// `mean(−log(1 − σ(x)))`.
    pub fn softplus_mean(&mut self, x: Var, sign: f64) -> Var {
        let xv = self.value(x);
        let m = xv
            .data()
            .iter()
            .map(|&v| softplus(sign * v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
            .sum::<f64>()
            / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::SoftplusMean { x, sign }, rg)
    }

    /// Bilinear `k×k` grid pooling of `fm` (`1×C×H×W`) over the box held in
    /// `bx` (`[x, y, w, h]` in patch pixels). Output is `1×(C·k·k)`.
    pub fn pool_region(&mut self, fm: Var, bx: Var, stride: f64, offset: f64, k: usize) -> Var {
        let fv = self.value(fm);
        let (c, h, w) = (fv.dim(1), fv.dim(2), fv.dim(3));
        let b = self.value(bx).data();
        let bx4 = [b[0], b[1], b[2], b[3]];
        let out = pool_kernel::forward(fv.data(), c, h, w, bx4, stride, offset, k);
        let rg = self.rg(fm) || self.rg(bx);
        self.push(
            Tensor::from_vec(&[1, c * k * k], out),
            Op::PoolRegion {
                fm,
                bx,
                stride,
                offset,
                k,
            },
            rg,
        )
    }

    /// Hash of every piecewise-linear branch taken in the forward pass
    /// (rectifier signs, pooling cells, logit clamps). Two evaluations with
    /// equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    for &v in self.value(*x).data() {
                        mix((v > 0.0) as u64);
                    }
                }
                Op::SoftplusMean { x, .. } => {
                    for &v in self.value(*x).data() {
                        mix((v.abs() > LOGIT_CLAMP) as u64);
                    }
                }
                Op::PoolRegion {
                    bx,
                    stride,
                    offset,
                    k,
                    ..
                } => {
                    let b = self.value(*bx).data();
                    for (i, j) in pool_kernel::cells([b[0], b[1], b[2], b[3]], *stride, *offset, *k) {
                        mix(i as u64);
                        mix(j as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::from_vec(self.value(output).shape(), vec![1.0]));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&g, 1.0),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) =
                    conv2d_backward(self.value(*x), self.value(*w), dy, *stride, *pad, self.rg(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            } => {
                let (n, c, s) = ncs(dy);
                let m = (n * s) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        for i in off..off + s {
                            dgamma[ch] += dy.data()[i] * xhat.data()[i];
                            dbeta[ch] += dy.data()[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(dy.shape());
                    for b in 0..n {
                        for ch in 0..c {
                            // sums of dxhat and dxhat·xhat equal γ·dβ and γ·dγ
                            let sum_d = g[ch] * dbeta[ch];
                            let sum_dx = g[ch] * dgamma[ch];
                            let off = (b * c + ch) * s;
                            for i in off..off + s {
                                let dxh = dy.data()[i] * g[ch];
                                dx.data_mut()[i] =
                                    invstd[ch] / m * (m * dxh - sum_d - xhat.data()[i] * sum_dx);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            } => {
                let (n, c, s) = ncs(dy);
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Tensor::zeros(dy.shape());
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        for i in off..off + s {
                            dgamma[ch] += dy.data()[i] * xhat.data()[i];
                            dbeta[ch] += dy.data()[i];
                            dx.data_mut()[i] = dy.data()[i] * g[ch] * invstd[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta));
            }
            Op::Relu(x) => {
                let d = dy.zip_map(y, |g, v| if v > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let d = dy.zip_map(xv, |g, v| if v > 0.0 { g } else { slope * g });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = dy.zip_map(y, |g, s| g * s * (1.0 - s));
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = dy.zip_map(y, |g, t| g * (1.0 - t * t));
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if a == b {
                    let d = dy.zip_map(self.value(*a), |g, v| 2.0 * g * v);
                    self.accumulate(grads, *a, d);
                } else {
                    self.accumulate(grads, *a, dy.zip_map(self.value(*b), |g, v| g * v));
                    self.accumulate(grads, *b, dy.zip_map(self.value(*a), |g, v| g * v));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, dy.map(|g| g * s)),
            Op::AddConst(x) => self.accumulate(grads, *x, dy.clone()),
            Op::MulConst(x, c) => self.accumulate(grads, *x, dy.zip_map(c, |g, v| g * v)),
            Op::ConcatChannels(parts) => {
                let (n, _, s) = ncs(dy);
                let total_c = dy.dim(1);
                let mut c0 = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let pc = pv.dim(1);
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for b in 0..n {
                            let off = (b * total_c + c0) * s;
                            d.extend_from_slice(&dy.data()[off..off + pc * s]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(pv.shape(), d));
                    }
                    c0 += pc;
                }
            }
            Op::SliceChannels { x, start, len } => {
                let xv = self.value(*x);
                let (n, c, s) = ncs(xv);
                let mut d = Tensor::zeros(xv.shape());
                for b in 0..n {
                    let dst = (b * c + start) * s;
                    let src = b * len * s;
                    d.data_mut()[dst..dst + len * s].copy_from_slice(&dy.data()[src..src + len * s]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::StackBatch(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.rg(p) {
                        let d = Tensor::from_vec(pv.shape(), dy.data()[off..off + n].to_vec());
                        self.accumulate(grads, p, d);
                    }
                    off += n;
                }
            }
            Op::SelectBatch { x, index } => {
                let xv = self.value(*x);
                let inner = dy.len();
                let mut d = Tensor::zeros(xv.shape());
                d.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(dy.data());
                self.accumulate(grads, *x, d);
            }
            Op::GatherBatch { x, indices } => {
                let xv = self.value(*x);
                let inner = xv.len() / xv.dim(0);
                let mut d = Tensor::zeros(xv.shape());
                let dd = d.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for (a, b) in dd[i * inner..(i + 1) * inner].iter_mut().zip(&dy.data()[k * inner..(k + 1) * inner]) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (_, _, s) = ncs(xv);
                let mut d = Tensor::zeros(xv.shape());
                for (chunk, &g) in d.data_mut().chunks_mut(s).zip(dy.data()) {
                    chunk.fill(g / s as f64);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i) = (xv.dim(0), xv.len() / xv.dim(0));
                let o = wv.dim(0);
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    crate::tensor::gemm(n, o, i, 1.0, dy.data(), false, wv.data(), false, 0.0, dx.data_mut());
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    crate::tensor::gemm(o, n, i, 1.0, dy.data(), true, xv.data(), false, 0.0, dw.data_mut());
                    self.accumulate(grads, *w, dw);
                }
                let mut db = vec![0.0; o];
                for row in dy.data().chunks(o) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                self.accumulate(grads, *b, Tensor::from_vec(&[o], db));
            }
            Op::Reshape(x) => {
                let d = dy.clone().reshape(self.value(*x).shape());
                self.accumulate(grads, *x, d);
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let g = dy.data()[0] / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g));
            }
            Op::SoftplusMean { x, sign } => {
                let xv = self.value(*x);
                let scale = dy.data()[0] / xv.len() as f64;
                let d = xv.map(|v| {
                    if v.abs() > LOGIT_CLAMP {
                        0.0
                    } else {
                        scale * sign * sigmoid(sign * v)
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::PoolRegion {
                fm,
                bx,
                stride,
                offset,
                k,
            } => {
                let fv = self.value(*fm);
                let (c, h, w) = (fv.dim(1), fv.dim(2), fv.dim(3));
                let b = self.value(*bx).data();
                let bx4 = [b[0], b[1], b[2], b[3]];
                let (dfm, dbox) = pool_kernel::backward(
                    fv.data(),
                    c,
                    h,
                    w,
                    bx4,
                    *stride,
                    *offset,
                    *k,
                    dy.data(),
                    self.rg(*fm),
                );
                if let Some(dfm) = dfm {
                    self.accumulate(grads, *fm, Tensor::from_vec(fv.shape(), dfm));
                }
                let bshape = self.value(*bx).shape().to_vec();
                self.accumulate(grads, *bx, Tensor::from_vec(&bshape, dbox.to_vec()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let report = check_gradients(
            &[a, b],
            |g, v| {
                let s = g.sigmoid(v[0]);
                let t = g.tanh(v[1]);
                let m = g.mul(s, t);
                let d = g.sub(m, v[0]);
                let l = g.leaky_relu(d, 0.2);
                let p = g.mul_const(l, probe.clone());
                g.mean_all(p)
            },
            &GradCheck::default(),
        );
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn batch_norm_and_linear_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[3, 4, 2, 2], 1.0, &mut rng);
        let gamma = Tensor::randn(&[4], 1.0, &mut rng);
        let beta = Tensor::randn(&[4], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let bias = Tensor::randn(&[2], 1.0, &mut rng);
        let probe = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let report = check_gradients(
            &[x, gamma, beta, w, bias],
            |g, v| {
                let (bn, _) = g.batch_norm(v[0], v[1], v[2]);
                let p = g.global_avg_pool(bn);
                let y = g.linear(p, v[3], v[4]);
                let y = g.mul_const(y, probe.clone());
                g.mean_all(y)
            },
            &GradCheck::default(),
        );
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn channel_and_batch_plumbing_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 5, 3, 3], 0.5, &mut rng);
        let report = check_gradients(
            &[a, b, w],
            |g, v| {
                let cat = g.concat_channels(&[v[0], v[1]]);
                let st = g.stack_batch(&[cat, cat]);
                let conv = g.conv2d(st, v[2], None, 2, 1);
                let sel = g.select_batch(conv, 1);
                let sl = g.slice_channels(sel, 1, 1);
                let r = g.reshape(sl, &[4]);
                let sq = g.mul(r, r);
                let sp = g.softplus_mean(sq, -1.0);
                let m = g.mean_all(sel);
                g.add(sp, m)
            },
            &GradCheck::default(),
        );
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn gather_with_repeats_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let probe = Tensor::randn(&[4, 2, 2, 2], 1.0, &mut rng);
        let report = check_gradients(
            &[a],
            |g, v| {
                let t = g.tanh(v[0]);
                let gt = g.gather_batch(t, &[2, 0, 2, 1]);
                let p = g.mul_const(gt, probe.clone());
                g.mean_all(p)
            },
            &GradCheck::default(),
        );
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn detached_values_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let d = g.detach(a);
        let y = g.mul(a, d);
        let grads = g.backward(y);
        assert_eq!(grads.get(a).unwrap().data()[0], 2.0);
        assert!(grads.get(d).is_none());
    }
}
