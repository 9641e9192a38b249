//! Layer building blocks shared by the networks, parameter traversal and the
//! Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{BatchStats, Graph, Var};
use crate::tensor::Tensor;

/// Momentum for running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Uniform access to a network's arrays for optimization and checkpointing.
pub trait Parameterized {
    /// Trainable tensors in a fixed order.
    fn trainable(&self) -> Vec<&Tensor>;
    fn trainable_mut(&mut self) -> Vec<&mut Tensor>;
    /// Every persistent array (trainable tensors and buffers), with names.
    fn named_arrays(&self) -> Vec<(String, &Tensor)>;
    fn named_arrays_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_parameters(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }
}

/// He-style fan-in initialization.
pub fn he_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// 3×3 (or k×k) convolution followed by per-channel normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBn {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConvBn {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl ConvBn {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            weight: he_init(&[cout, cin, k, k], cin * k * k, rng),
            bias: Tensor::zeros(&[cout]),
            gamma: Tensor::full(&[cout], 1.0),
            beta: Tensor::zeros(&[cout]),
            running_mean: Tensor::zeros(&[cout]),
            running_var: Tensor::full(&[cout], 1.0),
            stride,
        }
    }

    pub fn zeroed(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, k, k]),
            bias: Tensor::zeros(&[cout]),
            gamma: Tensor::zeros(&[cout]),
            beta: Tensor::zeros(&[cout]),
            running_mean: Tensor::zeros(&[cout]),
            running_var: Tensor::full(&[cout], 1.0),
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundConvBn {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundConvBn {
            weight: leaf(&self.weight),
            bias: leaf(&self.bias),
            gamma: leaf(&self.gamma),
            beta: leaf(&self.beta),
        }
    }

    /// Convolution and normalization; batch statistics are returned when
    /// `train` is set, otherwise running statistics are used.
    pub fn forward(&self, g: &mut Graph, b: &BoundConvBn, x: Var, train: bool) -> (Var, Option<BatchStats>) {
        let pad = self.kernel() / 2;
        let y = g.conv2d(x, b.weight, Some(b.bias), self.stride, pad);
        if train {
            let (y, stats) = g.batch_norm(y, b.gamma, b.beta);
            (y, Some(stats))
        } else {
            let y = g.batch_norm_eval(
                y,
                b.gamma,
                b.beta,
                self.running_mean.data(),
                self.running_var.data(),
            );
            (y, None)
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }

    pub fn vars(b: &BoundConvBn) -> [Var; 4] {
        [b.weight, b.bias, b.gamma, b.beta]
    }

    pub fn trainable(&self) -> [&Tensor; 4] {
        [&self.weight, &self.bias, &self.gamma, &self.beta]
    }

    pub fn trainable_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.weight, &mut self.bias, &mut self.gamma, &mut self.beta]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
            (format!("{prefix}.gamma"), &self.gamma),
            (format!("{prefix}.beta"), &self.beta),
            (format!("{prefix}.running_mean"), &self.running_mean),
            (format!("{prefix}.running_var"), &self.running_var),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.weight"), &mut self.weight),
            (format!("{prefix}.bias"), &mut self.bias),
            (format!("{prefix}.gamma"), &mut self.gamma),
            (format!("{prefix}.beta"), &mut self.beta),
            (format!("{prefix}.running_mean"), &mut self.running_mean),
            (format!("{prefix}.running_var"), &mut self.running_var),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: u64,
}

impl Adam {
    pub fn new(params: &[&Tensor], cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Rescale `grads` in place so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = Tensor::from_vec(&[2], vec![3.0, -2.0]);
        let mut opt = Adam::new(&[&x], AdamConfig::default());
        for _ in 0..2000 {
            let g = x.map(|v| 2.0 * v);
            opt.step(vec![&mut x], &[g], 0.01);
        }
        assert!(x.max_abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Tensor::full(&[4], 3.0), Tensor::full(&[1], 4.0)];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - (36.0f64 + 16.0).sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
