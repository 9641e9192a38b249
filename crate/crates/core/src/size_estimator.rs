//! IoU prediction head with template modulation, bilinear region pooling,
//! its regression loss and gradient-ascent box refinement.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, Geometry};
use crate::data_io::BoundingBox;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Parameterized;
use crate::tensor::Tensor;

/// Smallest box side kept by refinement, in patch pixels.
pub const MIN_BOX_SIDE: f64 = 4.0;

/// Raw bilinear grid pooling shared by the eager path and the graph op.
pub(crate) mod pool_kernel {
    /// Continuous cell coordinates of grid sample `(a, b)` and their
    /// derivatives with respect to `[x, y, w, h]`.
    struct SamplePoint {
        u: f64,
        v: f64,
        du: [f64; 4],
        dv: [f64; 4],
    }

    fn sample_point(bx: [f64; 4], stride: f64, offset: f64, k: usize, a: usize, b: usize) -> SamplePoint {
        let fa = (a as f64 + 0.5) / k as f64;
        let fb = (b as f64 + 0.5) / k as f64;
        let px = bx[0] + fb * bx[2];
        let py = bx[1] + fa * bx[3];
        SamplePoint {
            u: (px - offset) / stride,
            v: (py - offset) / stride,
            du: [1.0 / stride, 0.0, fb / stride, 0.0],
            dv: [0.0, 1.0 / stride, 0.0, fa / stride],
        }
    }

    /// The (up to four) in-bounds neighbors of `(v, u)` with their bilinear
    /// weights and weight derivatives along `u` and `v`.
    fn neighbors(h: usize, w: usize, u: f64, v: f64) -> Vec<(usize, f64, f64, f64)> {
        let (j0, i0) = (u.floor(), v.floor());
        let (tx, ty) = (u - j0, v - i0);
        let mut out = Vec::with_capacity(4);
        for (di, wy, dwy) in [(0i64, 1.0 - ty, -1.0), (1, ty, 1.0)] {
            for (dj, wx, dwx) in [(0i64, 1.0 - tx, -1.0), (1, tx, 1.0)] {
                let (i, j) = (i0 as i64 + di, j0 as i64 + dj);
                if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
                    continue;
                }
                out.push(((i as usize) * w + j as usize, wy * wx, wy * dwx, dwy * wx));
            }
        }
        out
    }

    /// Integer cells containing each grid sample.
    pub fn cells(bx: [f64; 4], stride: f64, offset: f64, k: usize) -> Vec<(i64, i64)> {
        let mut out = Vec::with_capacity(k * k);
        for a in 0..k {
            for b in 0..k {
                let p = sample_point(bx, stride, offset, k, a, b);
                out.push((p.v.floor() as i64, p.u.floor() as i64));
            }
        }
        out
    }

    /// True when no grid sample touches the map.
    pub fn outside(h: usize, w: usize, bx: [f64; 4], stride: f64, offset: f64, k: usize) -> bool {
        (0..k).all(|a| {
            (0..k).all(|b| {
                let p = sample_point(bx, stride, offset, k, a, b);
                neighbors(h, w, p.u, p.v).iter().all(|n| n.1 == 0.0)
            })
        })
    }

    /// Pooled `C×k×k` values, flattened channel-major.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(fm: &[f64], c: usize, h: usize, w: usize, bx: [f64; 4], stride: f64, offset: f64, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * k * k];
        for a in 0..k {
            for b in 0..k {
                let p = sample_point(bx, stride, offset, k, a, b);
                for (idx, wt, _, _) in neighbors(h, w, p.u, p.v) {
                    for ch in 0..c {
                        out[(ch * k + a) * k + b] += wt * fm[ch * h * w + idx];
                    }
                }
            }
        }
        out
    }

    /// Gradients of `Σ dy ⊙ forward(..)` with respect to the map (when
    /// requested) and the box.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        fm: &[f64],
        c: usize,
        h: usize,
        w: usize,
        bx: [f64; 4],
        stride: f64,
        offset: f64,
        k: usize,
        dy: &[f64],
        want_dfm: bool,
    ) -> (Option<Vec<f64>>, [f64; 4]) {
        let mut dfm = want_dfm.then(|| vec![0.0; fm.len()]);
        let mut dbox = [0.0; 4];
        for a in 0..k {
            for b in 0..k {
                let p = sample_point(bx, stride, offset, k, a, b);
                let mut dval_du = 0.0;
                let mut dval_dv = 0.0;
                for (idx, wt, dwu, dwv) in neighbors(h, w, p.u, p.v) {
                    for ch in 0..c {
                        let g = dy[(ch * k + a) * k + b];
                        let f = fm[ch * h * w + idx];
                        dval_du += g * dwu * f;
                        dval_dv += g * dwv * f;
                        if let Some(d) = dfm.as_mut() {
                            d[ch * h * w + idx] += g * wt;
                        }
                    }
                }
                for (q, d) in dbox.iter_mut().enumerate() {
                    *d += dval_du * p.du[q] + dval_dv * p.dv[q];
                }
            }
        }
        (dfm, dbox)
    }
}

/// `C×K×K` features pooled from a box region.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature {
    pub values: Tensor,
    /// Set when the box lies entirely outside the feature extent.
    pub outside: bool,
}

impl PooledFeature {
    pub fn flat(&self) -> &[f64] {
        self.values.data()
    }
}

/// Bilinear `k×k` grid pooling of `fm` over `bx` (patch pixels).
pub fn pool_region(fm: &FeatureMap, bx: &BoundingBox, k: usize) -> Result<PooledFeature> {
    if bx.w <= 0.0 || bx.h <= 0.0 || !bx.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidBox(format!("{bx:?}")));
    }
    let (c, h, w) = (fm.channels(), fm.height(), fm.width());
    let Geometry { stride, offset } = fm.geometry;
    let arr = bx.to_array();
    let values = pool_kernel::forward(fm.values.data(), c, h, w, arr, stride, offset, k);
    Ok(PooledFeature {
        values: Tensor::from_vec(&[c, k, k], values),
        outside: pool_kernel::outside(h, w, arr, stride, offset, k),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouHeadConfig {
    pub channels: usize,
    /// Pooling grid resolution.
    pub k: usize,
}

impl Default for IouHeadConfig {
    fn default() -> Self {
        Self { channels: 32, k: 3 }
    }
}

/// `m = A·t + a` from the template pool, `score = g·(m ⊙ p) + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct IouHeadParams {
    pub k: usize,
    pub modulation_w: Tensor,
    pub modulation_b: Tensor,
    pub score_w: Tensor,
    pub score_b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundIouHead {
    pub modulation_w: Var,
    pub modulation_b: Var,
    pub score_w: Var,
    pub score_b: Var,
}

impl IouHeadParams {
    pub fn new<R: Rng + ?Sized>(cfg: &IouHeadConfig, rng: &mut R) -> Self {
        let d = cfg.channels * cfg.k * cfg.k;
        let s = 1.0 / (d as f64).sqrt();
        Self {
            k: cfg.k,
            modulation_w: Tensor::randn(&[d, d], s, rng),
            modulation_b: Tensor::full(&[d], 1.0),
            score_w: Tensor::randn(&[1, d], s, rng),
            score_b: Tensor::zeros(&[1]),
        }
    }

    pub fn dim(&self) -> usize {
        self.modulation_b.len()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundIouHead {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundIouHead {
            modulation_w: leaf(&self.modulation_w),
            modulation_b: leaf(&self.modulation_b),
            score_w: leaf(&self.score_w),
            score_b: leaf(&self.score_b),
        }
    }

    pub fn vars(b: &BoundIouHead) -> [Var; 4] {
        [b.modulation_w, b.modulation_b, b.score_w, b.score_b]
    }

    /// Modulation vector for a template pool.
    pub fn modulation(&self, template: &PooledFeature) -> Vec<f64> {
        let d = self.dim();
        let t = template.flat();
        let a = self.modulation_w.data();
        (0..d)
            .map(|i| {
                self.modulation_b.data()[i] + a[i * d..(i + 1) * d].iter().zip(t).map(|(x, y)| x * y).sum::<f64>()
            })
            .collect()
    }

    /// Score of a candidate pool under a precomputed modulation.
    pub fn score_modulated(&self, m: &[f64], candidate: &[f64]) -> f64 {
        self.score_b.data()[0]
            + self
                .score_w
                .data()
                .iter()
                .zip(m)
                .zip(candidate)
                .map(|((g, m), p)| g * m * p)
                .sum::<f64>()
    }

    /// Graph form of [`IouHeadParams::modulation`]; `template` is `1×D`.
    pub fn modulation_graph(&self, g: &mut Graph, b: &BoundIouHead, template: Var) -> Var {
        g.linear(template, b.modulation_w, b.modulation_b)
    }

    /// Scores for `N×D` candidate pools under a `1×D` modulation; `N×1`.
    pub fn score_graph(&self, g: &mut Graph, b: &BoundIouHead, m: Var, candidates: Var) -> Var {
        let n = g.value(candidates).dim(0);
        let tiled = if n == 1 {
            m
        } else {
            g.stack_batch(&vec![m; n])
        };
        let prod = g.mul(tiled, candidates);
        g.linear(prod, b.score_w, b.score_b)
    }
}

impl Parameterized for IouHeadParams {
    fn trainable(&self) -> Vec<&Tensor> {
        vec![&self.modulation_w, &self.modulation_b, &self.score_w, &self.score_b]
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.modulation_w,
            &mut self.modulation_b,
            &mut self.score_w,
            &mut self.score_b,
        ]
    }

    fn named_arrays(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("iou_head.modulation.weight".into(), &self.modulation_w),
            ("iou_head.modulation.bias".into(), &self.modulation_b),
            ("iou_head.score.weight".into(), &self.score_w),
            ("iou_head.score.bias".into(), &self.score_b),
        ]
    }

    fn named_arrays_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("iou_head.modulation.weight".into(), &mut self.modulation_w),
            ("iou_head.modulation.bias".into(), &mut self.modulation_b),
            ("iou_head.score.weight".into(), &mut self.score_w),
            ("iou_head.score.bias".into(), &mut self.score_b),
        ]
    }
}

/// Predicted IoU of a candidate pool given the template pool.
pub fn predict_iou(params: &IouHeadParams, template: &PooledFeature, candidate: &PooledFeature) -> Result<f64> {
    if template.values.shape() != candidate.values.shape() || template.values.len() != params.dim() {
        return Err(Error::Shape(format!(
            "template {:?} / candidate {:?} vs head dimension {}",
            template.values.shape(),
            candidate.values.shape(),
            params.dim()
        )));
    }
    let m = params.modulation(template);
    Ok(params.score_modulated(&m, candidate.flat()))
}

/// Draw `n` boxes around `gt` with Gaussian jitter of `sigma_frac` times the
/// box size, keeping those with IoU ≥ 0.1. Returns `(box, iou)` pairs.
pub fn sample_candidates<R: Rng + ?Sized>(
    gt: &BoundingBox,
    n: usize,
    sigma_frac: f64,
    rng: &mut R,
) -> Result<Vec<(BoundingBox, f64)>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n_candidates must be at least 1".into()));
    }
    let normal = Normal::new(0.0, sigma_frac).expect("finite sigma");
    let mut out = Vec::with_capacity(n);
    for _ in 0..100 * n {
        let cx = gt.cx() + normal.sample(rng) * gt.w;
        let cy = gt.cy() + normal.sample(rng) * gt.h;
        let w = gt.w * (1.0 + normal.sample(rng));
        let h = gt.h * (1.0 + normal.sample(rng));
        if w <= 1.0 || h <= 1.0 {
            continue;
        }
        let b = BoundingBox::from_center(cx, cy, w, h);
        let iou = b.iou(gt);
        if iou >= 0.1 {
            out.push((b, iou));
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(Error::Sampling(format!(
        "only {} of {n} candidates reached IoU 0.1 after {} draws",
        out.len(),
        100 * n
    )))
}

/// Mean squared error between predicted and true IoU over `candidates`.
pub fn size_loss_for(
    params: &IouHeadParams,
    template: &PooledFeature,
    fm: &FeatureMap,
    candidates: &[(BoundingBox, f64)],
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates".into()));
    }
    let m = params.modulation(template);
    let mut acc = 0.0;
    for (b, target) in candidates {
        let p = pool_region(fm, b, params.k)?;
        let pred = params.score_modulated(&m, p.flat());
        acc += (pred - target).powi(2);
    }
    Ok(acc / candidates.len() as f64)
}

/// Jittered-candidate IoU regression loss (σ = 0.3 of the box size).
pub fn size_loss<R: Rng + ?Sized>(
    params: &IouHeadParams,
    template: &PooledFeature,
    fm: &FeatureMap,
    gt: &BoundingBox,
    n_candidates: usize,
    rng: &mut R,
) -> Result<f64> {
    let cands = sample_candidates(gt, n_candidates, 0.3, rng)?;
    size_loss_for(params, template, fm, &cands)
}

/// Graph form of the size loss on a `1×C×h×w` feature variable.
pub fn size_loss_graph(
    g: &mut Graph,
    params: &IouHeadParams,
    bound: &BoundIouHead,
    m: Var,
    fm: Var,
    geometry: Geometry,
    candidates: &[(BoundingBox, f64)],
) -> Var {
    let pools: Vec<Var> = candidates
        .iter()
        .map(|(b, _)| {
            let bx = g.constant(Tensor::from_vec(&[4], b.to_array().to_vec()));
            g.pool_region(fm, bx, geometry.stride, geometry.offset, params.k)
        })
        .collect();
    let stacked = g.stack_batch(&pools);
    let scores = params.score_graph(g, bound, m, stacked);
    let targets = Tensor::from_vec(&[candidates.len(), 1], candidates.iter().map(|c| c.1).collect());
    g.mse_to_const(scores, &targets)
}

/// Outcome of [`refine_box`].
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub bbox: BoundingBox,
    pub score: f64,
    /// Predicted IoU at the start and after every accepted step.
    pub trace: Vec<f64>,
    /// Outer iterations performed.
    pub proposals: usize,
}

/// Score and box gradient of a candidate under a fixed modulation.
fn score_and_grad(params: &IouHeadParams, m: &[f64], fm: &FeatureMap, bx: [f64; 4]) -> (f64, [f64; 4]) {
    let (c, h, w) = (fm.channels(), fm.height(), fm.width());
    let Geometry { stride, offset } = fm.geometry;
    let pooled = pool_kernel::forward(fm.values.data(), c, h, w, bx, stride, offset, params.k);
    let score = params.score_modulated(m, &pooled);
    let dy: Vec<f64> = params.score_w.data().iter().zip(m).map(|(g, m)| g * m).collect();
    let (_, grad) = pool_kernel::backward(fm.values.data(), c, h, w, bx, stride, offset, params.k, &dy, false);
    (score, grad)
}

fn clamp_size(mut b: [f64; 4]) -> [f64; 4] {
    for q in 2..4 {
        if b[q] < MIN_BOX_SIDE {
            let c = b[q - 2] + b[q] / 2.0;
            b[q] = MIN_BOX_SIDE;
            b[q - 2] = c - MIN_BOX_SIDE / 2.0;
        }
    }
    b
}

/// Maximum step halvings tried before a proposal is abandoned.
const MAX_HALVINGS: usize = 6;

/// Gradient ascent on predicted IoU over `[x, y, w, h]` under a precomputed
/// modulation. Each coordinate moves by `0.1·s·(s·∂score)` with `s` the
/// matching box side; rejected proposals are halved until the score does
/// not decrease.
pub fn refine_box_modulated(
    params: &IouHeadParams,
    m: &[f64],
    fm: &FeatureMap,
    box0: &BoundingBox,
    n_steps: usize,
) -> Result<Refinement> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    let start = clamp_size(box0.to_array());
    let (mut score, _) = score_and_grad(params, m, fm, start);
    let mut current = start;
    let mut trace = vec![score];
    let mut proposals = 0;
    for _ in 0..n_steps {
        proposals += 1;
        let (_, grad) = score_and_grad(params, m, fm, current);
        if !grad.iter().all(|v| v.is_finite()) {
            return Ok(Refinement {
                bbox: *box0,
                score: trace[0],
                trace: vec![trace[0]],
                proposals,
            });
        }
        if grad.iter().all(|&v| v == 0.0) {
            break;
        }
        let side = [current[2], current[3], current[2], current[3]];
        let mut step: [f64; 4] = std::array::from_fn(|q| 0.1 * side[q] * side[q] * grad[q]);
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = clamp_size(std::array::from_fn(|q| current[q] + step[q]));
            let (s, _) = score_and_grad(params, m, fm, cand);
            if s.is_finite() && s >= score {
                current = cand;
                score = s;
                trace.push(s);
                accepted = true;
                break;
            }
            step.iter_mut().for_each(|v| *v *= 0.5);
        }
        if !accepted {
            break;
        }
    }
    Ok(Refinement {
        bbox: BoundingBox::from_array(current),
        score,
        trace,
        proposals,
    })
}

/// Gradient ascent on predicted IoU starting from `box0` (patch pixels).
pub fn refine_box(
    params: &IouHeadParams,
    template: &PooledFeature,
    fm: &FeatureMap,
    box0: &BoundingBox,
    n_steps: usize,
) -> Result<Refinement> {
    let m = params.modulation(template);
    refine_box_modulated(params, &m, fm, box0, n_steps)
}

/// Multi-start refinement: `box0` plus jittered starts, each refined, final
/// box averaged over the `top` highest-scoring results.
#[allow(clippy::too_many_arguments)]
pub fn estimate_box<R: Rng + ?Sized>(
    params: &IouHeadParams,
    m: &[f64],
    fm: &FeatureMap,
    box0: &BoundingBox,
    n_candidates: usize,
    n_steps: usize,
    top: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<Refinement> {
    let normal = Normal::new(0.0, jitter).expect("finite jitter");
    let mut results = Vec::with_capacity(n_candidates.max(1));
    for i in 0..n_candidates.max(1) {
        let start = if i == 0 {
            *box0
        } else {
            BoundingBox::from_center(
                box0.cx() + normal.sample(rng) * box0.w,
                box0.cy() + normal.sample(rng) * box0.h,
                box0.w * normal.sample(rng).exp(),
                box0.h * normal.sample(rng).exp(),
            )
        };
        results.push(refine_box_modulated(params, m, fm, &start, n_steps)?);
    }
    // stable sort keeps the earlier candidate first on ties
    results.sort_by(|a, b| b.score.total_cmp(&a.score));
    let top = top.clamp(1, results.len());
    let mut acc = [0.0; 4];
    for r in &results[..top] {
        for (a, v) in acc.iter_mut().zip(r.bbox.to_array()) {
            *a += v / top as f64;
        }
    }
    let best = results.swap_remove(0);
    Ok(Refinement {
        bbox: BoundingBox::from_array(clamp_size(acc)),
        ..best
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GEOM: Geometry = Geometry {
        stride: 8.0,
        offset: 0.5,
    };

    fn fmap(values: Tensor) -> FeatureMap {
        FeatureMap::new(values, GEOM).unwrap()
    }

    fn small_head(c: usize, rng: &mut ChaCha8Rng) -> IouHeadParams {
        IouHeadParams::new(&IouHeadConfig { channels: c, k: 3 }, rng)
    }

    #[test]
    fn constant_map_pools_to_the_constant() {
        let fm = fmap(Tensor::full(&[2, 8, 8], 0.7));
        let p = pool_region(&fm, &BoundingBox::new(12.0, 15.0, 30.0, 22.0).unwrap(), 3).unwrap();
        assert!(p.flat().iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(!p.outside);
    }

    #[test]
    fn cell_aligned_box_reads_cells_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = fmap(Tensor::randn(&[2, 8, 8], 1.0, &mut rng));
        // samples land on cells (2..5, 1..4)
        let bx = BoundingBox::new(0.5 + 8.0 * 1.0 - 4.0, 0.5 + 8.0 * 2.0 - 4.0, 24.0, 24.0).unwrap();
        let p = pool_region(&fm, &bx, 3).unwrap();
        for ch in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    let want = fm.values.data()[(ch * 8 + 2 + a) * 8 + 1 + b];
                    let got = p.values.data()[(ch * 3 + a) * 3 + b];
                    assert!((want - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn box_outside_the_map_is_flagged() {
        let fm = fmap(Tensor::full(&[1, 8, 8], 1.0));
        let p = pool_region(&fm, &BoundingBox::new(500.0, 500.0, 10.0, 10.0).unwrap(), 3).unwrap();
        assert!(p.outside);
        assert!(p.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fm = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);
            let bx = Tensor::from_vec(
                &[4],
                vec![
                    rng.random_range(3.0..15.0),
                    rng.random_range(3.0..15.0),
                    rng.random_range(12.0..25.0),
                    rng.random_range(12.0..25.0),
                ],
            );
            let probe = Tensor::randn(&[1, 18], 1.0, &mut rng);
            let report = check_gradients(
                &[fm, bx],
                |g, v| {
                    let p = g.pool_region(v[0], v[1], 8.0, 0.5, 3);
                    let p = g.mul_const(p, probe.clone());
                    g.mean_all(p)
                },
                &GradCheck::default(),
            );
            assert!(report.max_rel_error() < 1e-3, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn zero_modulation_scores_the_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = small_head(2, &mut rng);
        head.modulation_w = Tensor::zeros(head.modulation_w.shape());
        head.modulation_b = Tensor::zeros(head.modulation_b.shape());
        head.score_b = Tensor::scalar(0.37).reshape(&[1]);
        let pool = PooledFeature {
            values: Tensor::randn(&[2, 3, 3], 1.0, &mut rng),
            outside: false,
        };
        assert_eq!(predict_iou(&head, &pool, &pool).unwrap(), 0.37);
    }

    #[test]
    fn score_is_additive_in_the_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = small_head(2, &mut rng);
        let t = PooledFeature {
            values: Tensor::randn(&[2, 3, 3], 1.0, &mut rng),
            outside: false,
        };
        let p = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
        let q = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
        let pq = p.zip_map(&q, |a, b| a + b);
        let s = |v: Tensor| {
            predict_iou(
                &head,
                &t,
                &PooledFeature {
                    values: v,
                    outside: false,
                },
            )
            .unwrap()
        };
        let b = head.score_b.data()[0];
        let lhs = s(pq) - b;
        let rhs = (s(p) - b) + (s(q) - b);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn score_gradient_wrt_box_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = small_head(2, &mut rng);
        let fm = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let tmpl = Tensor::randn(&[1, 18], 1.0, &mut rng);
        let bx = Tensor::from_vec(&[4], vec![9.3, 7.1, 19.4, 21.7]);
        let report = check_gradients(
            &[bx],
            |g, v| {
                let b = head.bind(g, false);
                let t = g.constant(tmpl.clone());
                let f = g.constant(fm.clone());
                let m = head.modulation_graph(g, &b, t);
                let p = g.pool_region(f, v[0], 8.0, 0.5, 3);
                let s = head.score_graph(g, &b, m, p);
                g.mean_all(s)
            },
            &GradCheck::default(),
        );
        assert!(report.max_rel_error() < 1e-3, "{report:?}");
    }

    #[test]
    fn graph_and_eager_scores_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = small_head(2, &mut rng);
        let fm = fmap(Tensor::randn(&[2, 6, 6], 1.0, &mut rng));
        let t = pool_region(&fm, &BoundingBox::new(10.0, 10.0, 20.0, 20.0).unwrap(), 3).unwrap();
        let bx = BoundingBox::new(12.0, 8.0, 18.0, 25.0).unwrap();
        let eager = predict_iou(&head, &t, &pool_region(&fm, &bx, 3).unwrap()).unwrap();
        let mut g = Graph::new();
        let b = head.bind(&mut g, false);
        let tv = g.constant(t.values.clone().reshape(&[1, 18]));
        let m = head.modulation_graph(&mut g, &b, tv);
        let f = g.constant(fm.batched());
        let l = size_loss_graph(&mut g, &head, &b, m, f, GEOM, &[(bx, 0.0)]);
        assert!((g.value(l).data()[0] - eager * eager).abs() < 1e-12);
    }

    #[test]
    fn size_loss_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut head = small_head(1, &mut rng);
        head.score_w = Tensor::zeros(head.score_w.shape());
        let fm = fmap(Tensor::randn(&[1, 6, 6], 1.0, &mut rng));
        let t = pool_region(&fm, &BoundingBox::new(10.0, 10.0, 20.0, 20.0).unwrap(), 3).unwrap();
        let gt = BoundingBox::new(12.0, 12.0, 16.0, 16.0).unwrap();
        head.score_b = Tensor::from_vec(&[1], vec![1.0]);
        assert_eq!(size_loss_for(&head, &t, &fm, &[(gt, 1.0)]).unwrap(), 0.0);
        head.score_b = Tensor::from_vec(&[1], vec![0.0]);
        assert_eq!(size_loss_for(&head, &t, &fm, &[(gt, 1.0), (gt, 1.0)]).unwrap(), 1.0);
    }

    #[test]
    fn size_loss_ignores_candidate_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let head = small_head(2, &mut rng);
        let fm = fmap(Tensor::randn(&[2, 8, 8], 1.0, &mut rng));
        let gt = BoundingBox::new(20.0, 20.0, 20.0, 24.0).unwrap();
        let t = pool_region(&fm, &gt, 3).unwrap();
        let mut c = sample_candidates(&gt, 8, 0.3, &mut rng).unwrap();
        assert!(c.iter().all(|(b, iou)| *iou >= 0.1 && (b.iou(&gt) - iou).abs() < 1e-15));
        let a = size_loss_for(&head, &t, &fm, &c).unwrap();
        c.reverse();
        let b = size_loss_for(&head, &t, &fm, &c).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(size_loss(&head, &t, &fm, &gt, 0, &mut rng).is_err());
    }

    #[test]
    fn analytic_iou_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let a = BoundingBox::new(
                rng.random_range(0.0..20.0),
                rng.random_range(0.0..20.0),
                rng.random_range(5.0..20.0),
                rng.random_range(5.0..20.0),
            )
            .unwrap();
            let b = BoundingBox::new(
                rng.random_range(0.0..20.0),
                rng.random_range(0.0..20.0),
                rng.random_range(5.0..20.0),
                rng.random_range(5.0..20.0),
            )
            .unwrap();
            let (mut inter, mut union) = (0usize, 0usize);
            for _ in 0..40_000 {
                let x = rng.random_range(0.0..40.0);
                let y = rng.random_range(0.0..40.0);
                let ia = x >= a.x && x < a.right() && y >= a.y && y < a.bottom();
                let ib = x >= b.x && x < b.right() && y >= b.y && y < b.bottom();
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
            let mc = inter as f64 / union.max(1) as f64;
            assert!((mc - a.iou(&b)).abs() < 0.01, "{mc} vs {}", a.iou(&b));
        }
    }

    /// Head whose score is the channel-0 center sample of the pooled grid.
    fn bump_head() -> (IouHeadParams, Vec<f64>, FeatureMap) {
        let d = 9;
        let mut score_w = vec![0.0; d];
        score_w[4] = 1.0;
        let head = IouHeadParams {
            k: 3,
            modulation_w: Tensor::zeros(&[d, d]),
            modulation_b: Tensor::full(&[d], 1.0),
            score_w: Tensor::from_vec(&[1, d], score_w),
            score_b: Tensor::zeros(&[1]),
        };
        let (h, w) = (16, 16);
        let mut v = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (di, dj) = (i as f64 - 7.3, j as f64 - 8.6);
                v.push((-(di * di + dj * dj) / 18.0).exp());
            }
        }
        (head, vec![1.0; d], fmap(Tensor::from_vec(&[1, h, w], v)))
    }

    #[test]
    fn refinement_trace_never_decreases() {
        let (head, m, fm) = bump_head();
        let b0 = BoundingBox::from_center(40.0, 90.0, 24.0, 24.0);
        let r = refine_box_modulated(&head, &m, &fm, &b0, 20).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]), "{:?}", r.trace);
        assert!(r.trace.len() > 2);
        let peak = (0.5 + 8.0 * 8.6, 0.5 + 8.0 * 7.3);
        let before = ((b0.cx() - peak.0).powi(2) + (b0.cy() - peak.1).powi(2)).sqrt();
        let after = ((r.bbox.cx() - peak.0).powi(2) + (r.bbox.cy() - peak.1).powi(2)).sqrt();
        assert!(after < before);
    }

    #[test]
    fn stationary_box_is_returned_unchanged() {
        let (head, m, _) = bump_head();
        let fm = fmap(Tensor::full(&[1, 16, 16], 0.5));
        let b0 = BoundingBox::new(40.0, 40.0, 20.0, 20.0).unwrap();
        let r = refine_box_modulated(&head, &m, &fm, &b0, 5).unwrap();
        assert_eq!(r.bbox, b0);
        assert_eq!(r.proposals, 1);
    }

    #[test]
    fn one_step_makes_one_proposal() {
        let (head, m, fm) = bump_head();
        let b0 = BoundingBox::from_center(40.0, 90.0, 24.0, 24.0);
        let r = refine_box_modulated(&head, &m, &fm, &b0, 1).unwrap();
        assert_eq!(r.proposals, 1);
        assert!(r.trace.len() <= 2);
        assert!(refine_box_modulated(&head, &m, &fm, &b0, 0).is_err());
    }

    #[test]
    fn refined_boxes_respect_the_minimum_side() {
        let (head, m, fm) = bump_head();
        let b0 = BoundingBox::from_center(60.0, 60.0, 2.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = estimate_box(&head, &m, &fm, &b0, 10, 5, 3, 0.1, &mut rng).unwrap();
        assert!(r.bbox.w >= MIN_BOX_SIDE && r.bbox.h >= MIN_BOX_SIDE);
    }
}
