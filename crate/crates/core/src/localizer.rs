//! Gaussian labels, filter correlation, online filter learning and peak
//! localization.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, Geometry};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{conv2d, conv2d_backward, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    /// Label width in feature cells.
    pub sigma: f64,
    /// Residual weight within `2σ` of the target center.
    pub center_weight: f64,
    pub filter_size: usize,
    pub memory_capacity: usize,
    pub memory_decay: f64,
    pub reg_lambda: f64,
    pub init_iters: usize,
    pub update_iters: usize,
    pub update_interval: usize,
    pub update_threshold: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            center_weight: 2.0,
            filter_size: 5,
            memory_capacity: 50,
            memory_decay: 0.99,
            reg_lambda: 0.05,
            init_iters: 10,
            update_iters: 2,
            update_interval: 10,
            update_threshold: 0.25,
        }
    }
}

/// Gaussian response target over an `h×w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub values: Tensor,
    /// `(row, col)` in continuous cell coordinates.
    pub center: (f64, f64),
}

/// `C×k×k` correlation kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Filter {
    pub values: Tensor,
}

impl Filter {
    pub fn zeros(channels: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "filter size must be odd");
        Self {
            values: Tensor::zeros(&[channels, k, k]),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.dim(0)
    }

    pub fn size(&self) -> usize {
        self.values.dim(1)
    }

    /// `1×C×k×k` view for convolution.
    pub fn kernel(&self) -> Tensor {
        let (c, k) = (self.channels(), self.size());
        self.values.clone().reshape(&[1, c, k, k])
    }
}

/// `z[i, j] = exp(−((i − cy)² + (j − cx)²) / (2σ²))`.
pub fn gaussian_label(center: (f64, f64), sigma: f64, shape: (usize, usize)) -> Result<LabelMap> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("label sigma must be positive, got {sigma}")));
    }
    let (h, w) = shape;
    let (cy, cx) = center;
    let mut v = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            v.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    Ok(LabelMap {
        values: Tensor::from_vec(&[h, w], v),
        center,
    })
}

/// Residual weights: `center_weight` within `2σ` of `center`, 1 elsewhere.
pub fn region_weight(center: (f64, f64), sigma: f64, center_weight: f64, shape: (usize, usize)) -> Tensor {
    let (h, w) = shape;
    let r2 = (2.0 * sigma).powi(2);
    let mut v = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let d2 = (i as f64 - center.0).powi(2) + (j as f64 - center.1).powi(2);
            v.push(if d2 <= r2 { center_weight } else { 1.0 });
        }
    }
    Tensor::from_vec(&[h, w], v)
}

/// Same-size cross-correlation of `x` with a centered kernel; `h×w`.
pub fn correlate(x: &FeatureMap, f: &Filter) -> Result<Tensor> {
    if x.channels() != f.channels() {
        return Err(Error::Shape(format!(
            "feature has {} channels, filter {}",
            x.channels(),
            f.channels()
        )));
    }
    let out = conv2d(&x.batched(), &f.kernel(), None, 1, f.size() / 2);
    Ok(out.reshape(&[x.height(), x.width()]))
}

/// Graph correlation of `N×C×h×w` features with a `1×C×k×k` kernel.
pub fn correlate_graph(g: &mut Graph, x: Var, kernel: Var) -> Var {
    let k = g.value(kernel).dim(2);
    g.conv2d(x, kernel, None, 1, k / 2)
}

/// `region_weight ⊙ (response − label)`.
pub fn localization_residual(response: &Tensor, label: &Tensor, weight: &Tensor) -> Result<Tensor> {
    if response.shape() != label.shape() || response.shape() != weight.shape() {
        return Err(Error::Shape(format!(
            "response {:?}, label {:?}, weight {:?}",
            response.shape(),
            label.shape(),
            weight.shape()
        )));
    }
    let d = response.zip_map(label, |r, z| r - z);
    Ok(d.zip_map(weight, |d, w| d * w))
}

/// Mean over maps of the mean squared weighted residual.
pub fn localization_loss(responses: &[Tensor], labels: &[Tensor], weights: &[Tensor]) -> Result<f64> {
    if responses.is_empty() || responses.len() != labels.len() || responses.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} responses, {} labels, {} weights",
            responses.len(),
            labels.len(),
            weights.len()
        )));
    }
    let mut acc = 0.0;
    for ((r, z), w) in responses.iter().zip(labels).zip(weights) {
        let res = localization_residual(r, z, w)?;
        acc += res.sq_norm() / res.len() as f64;
    }
    Ok(acc / responses.len() as f64)
}

/// Graph form of [`localization_loss`] on stacked `N×1×h×w` responses.
pub fn localization_loss_graph(g: &mut Graph, responses: Var, labels: &Tensor, weights: &Tensor) -> Var {
    let neg = labels.map(|v| -v);
    let d = g.add_const(responses, &neg);
    let r = g.mul_const(d, weights.clone());
    let sq = g.mul(r, r);
    g.mean_all(sq)
}

/// One stored training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MemorySample {
    pub feature: FeatureMap,
    pub label: LabelMap,
    pub region: Tensor,
    pub weight: f64,
}

/// Bounded sample store with exponentially decaying weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMemory {
    pub capacity: usize,
    pub decay: f64,
    samples: VecDeque<MemorySample>,
}

impl SampleMemory {
    pub fn new(capacity: usize, decay: f64) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            decay,
            samples: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Older samples decay by one factor; the oldest is evicted when full.
    pub fn insert(&mut self, feature: FeatureMap, label: LabelMap, region: Tensor) {
        for s in &mut self.samples {
            s.weight *= self.decay;
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(MemorySample {
            feature,
            label,
            region,
            weight: 1.0,
        });
    }

    pub fn samples(&self) -> impl Iterator<Item = &MemorySample> {
        self.samples.iter()
    }

    /// Weights normalized to sum to one, in insertion order.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.samples.iter().map(|s| s.weight).sum();
        self.samples.iter().map(|s| s.weight / total).collect()
    }
}

/// Result of [`learn_filter`].
#[derive(Clone, Debug, PartialEq)]
pub struct FilterFit {
    pub filter: Filter,
    /// Objective before the first and after every iteration.
    pub objective: Vec<f64>,
    /// Set when a zero gradient met a nonzero loss; `filter` is then `f0`.
    pub degenerate: bool,
}

/// Stacked samples for batched correlation.
struct Batch {
    x: Tensor,
    labels: Tensor,
    /// `w_s · region²` per cell.
    w2: Tensor,
    pad: usize,
}

impl Batch {
    fn new(memory: &SampleMemory, k: usize) -> Self {
        let weights = memory.normalized_weights();
        let feats: Vec<Tensor> = memory.samples().map(|s| s.feature.batched()).collect();
        let x = Tensor::stack(&feats.iter().collect::<Vec<_>>());
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let mut labels = Vec::with_capacity(n * h * w);
        let mut w2 = Vec::with_capacity(n * h * w);
        for (s, ws) in memory.samples().zip(&weights) {
            labels.extend_from_slice(s.label.values.data());
            w2.extend(s.region.data().iter().map(|r| ws * r * r));
        }
        Self {
            x,
            labels: Tensor::from_vec(&[n, 1, h, w], labels),
            w2: Tensor::from_vec(&[n, 1, h, w], w2),
            pad: k / 2,
        }
    }

    fn response(&self, kernel: &Tensor) -> Tensor {
        conv2d(&self.x, kernel, None, 1, self.pad)
    }

    fn objective(&self, kernel: &Tensor, lambda: f64) -> f64 {
        let r = self.response(kernel);
        let data: f64 = r
            .data()
            .iter()
            .zip(self.labels.data())
            .zip(self.w2.data())
            .map(|((r, z), w)| w * (r - z).powi(2))
            .sum();
        data + lambda * kernel.sq_norm()
    }

    fn gradient(&self, kernel: &Tensor, lambda: f64) -> Tensor {
        let r = self.response(kernel);
        let dy = Tensor::from_vec(
            r.shape(),
            r.data()
                .iter()
                .zip(self.labels.data())
                .zip(self.w2.data())
                .map(|((r, z), w)| 2.0 * w * (r - z))
                .collect(),
        );
        let (_, mut dw, _) = conv2d_backward(&self.x, kernel, &dy, 1, self.pad, false);
        dw.add_scaled(kernel, 2.0 * lambda);
        dw
    }

    /// `Σ w_s ‖W ⊙ (x_s * d)‖² + λ‖d‖²`, the curvature along `d`.
    fn curvature(&self, d: &Tensor, lambda: f64) -> f64 {
        let r = self.response(d);
        let data: f64 = r.data().iter().zip(self.w2.data()).map(|(r, w)| w * r * r).sum();
        data + lambda * d.sq_norm()
    }
}

/// Weighted least-squares objective of `f` over the memory.
pub fn filter_objective(memory: &SampleMemory, f: &Filter, reg_lambda: f64) -> Result<f64> {
    if memory.is_empty() {
        return Err(Error::InvalidArgument("sample memory is empty".into()));
    }
    Ok(Batch::new(memory, f.size()).objective(&f.kernel(), reg_lambda))
}

/// Steepest descent with exact line search on the quadratic objective
/// `Σ_s w_s ‖W_s ⊙ (x_s * f − z_s)‖² + λ‖f‖²`.
pub fn learn_filter(memory: &SampleMemory, f0: &Filter, n_iters: usize, reg_lambda: f64) -> Result<FilterFit> {
    if memory.is_empty() {
        return Err(Error::InvalidArgument("sample memory is empty".into()));
    }
    if n_iters == 0 {
        return Err(Error::InvalidArgument("n_iters must be at least 1".into()));
    }
    if reg_lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("reg_lambda must be ≥ 0, got {reg_lambda}")));
    }
    if memory.samples().any(|s| s.feature.channels() != f0.channels()) {
        return Err(Error::Shape("memory features do not match the filter channels".into()));
    }
    let batch = Batch::new(memory, f0.size());
    let mut kernel = f0.kernel();
    let mut obj = batch.objective(&kernel, reg_lambda);
    let mut objective = vec![obj];
    for _ in 0..n_iters {
        let g = batch.gradient(&kernel, reg_lambda);
        let gg = g.sq_norm();
        if gg == 0.0 {
            if obj > 0.0 {
                log::warn!("filter learning hit a zero gradient at nonzero loss {obj}");
                return Ok(FilterFit {
                    filter: f0.clone(),
                    objective: vec![objective[0]],
                    degenerate: true,
                });
            }
            break;
        }
        let curv = batch.curvature(&g, reg_lambda);
        if curv <= 0.0 || !curv.is_finite() {
            break;
        }
        let alpha = gg / (2.0 * curv);
        let mut next = kernel.clone();
        next.add_scaled(&g, -alpha);
        let next_obj = batch.objective(&next, reg_lambda);
        // exact steps cannot increase a quadratic; guard rounding
        if next_obj > obj {
            break;
        }
        kernel = next;
        obj = next_obj;
        objective.push(obj);
    }
    let (c, k) = (f0.channels(), f0.size());
    Ok(FilterFit {
        filter: Filter {
            values: kernel.reshape(&[c, k, k]),
        },
        objective,
        degenerate: false,
    })
}

/// Peak of a response map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    /// Center in patch pixels `(x, y)`.
    pub center: (f64, f64),
    /// Sub-cell position `(row, col)`.
    pub cell: (f64, f64),
    pub confidence: f64,
}

/// Quadratic fit on a 3×3 neighborhood; returns the stationary offset
/// `(dy, dx)` when it is a maximum within one cell.
fn quadratic_offset(n: &[[f64; 3]; 3]) -> Option<(f64, f64)> {
    let (mut b, mut c, mut d, mut e, mut g) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (r, row) in n.iter().enumerate() {
        for (s, &f) in row.iter().enumerate() {
            let y = r as f64 - 1.0;
            let x = s as f64 - 1.0;
            b += x * f / 6.0;
            c += y * f / 6.0;
            d += (x * x - 2.0 / 3.0) * f / 2.0;
            e += (y * y - 2.0 / 3.0) * f / 2.0;
            g += x * y * f / 4.0;
        }
    }
    // f ≈ a + b x + c y + d x² + e y² + g x y
    let det = 4.0 * d * e - g * g;
    if d >= 0.0 || e >= 0.0 || det <= 0.0 {
        return None;
    }
    let dx = (-2.0 * e * b + g * c) / det;
    let dy = (-2.0 * d * c + g * b) / det;
    (dx.abs() <= 1.0 && dy.abs() <= 1.0).then_some((dy, dx))
}

/// Argmax (first in row-major order on ties) refined by a quadratic fit.
pub fn localize(response: &Tensor, geometry: Geometry) -> Peak {
    let (h, w) = (response.dim(0), response.dim(1));
    let data = response.data();
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    let (bi, bj) = (best / w, best % w);
    let mut cell = (bi as f64, bj as f64);
    if bi > 0 && bj > 0 && bi + 1 < h && bj + 1 < w {
        let mut n = [[0.0; 3]; 3];
        for (r, row) in n.iter_mut().enumerate() {
            for (s, v) in row.iter_mut().enumerate() {
                *v = data[(bi + r - 1) * w + bj + s - 1];
            }
        }
        if let Some((dy, dx)) = quadratic_offset(&n) {
            cell = (cell.0 + dy, cell.1 + dx);
        }
    }
    Peak {
        center: (geometry.cell_to_patch(cell.1), geometry.cell_to_patch(cell.0)),
        cell,
        confidence: data[best],
    }
}
