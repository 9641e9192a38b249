//! Central finite-difference oracle for [`Graph`] gradients.
//!
//! The oracle only ever evaluates forward passes; it never touches the
//! backward code it is used to check. Coordinates whose `±ε` evaluations
//! land on a different piece of a piecewise-linear function (a rectifier
//! flips sign, a pooling sample changes cell) are skipped, since central
//! differences are meaningless across a kink.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates probed per input tensor (all when the tensor is smaller).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_coords: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: (relative error, analytic norm, numeric norm).
    pub per_input: Vec<(f64, f64, f64)>,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
    pub probed: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().fold(0.0, |m, r| m.max(r.0))
    }
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over the probed coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        0.0
    } else {
        diff / denom
    }
}

fn eval(inputs: &[Tensor], f: &impl Fn(&mut Graph, &[Var]) -> Var) -> (f64, u64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    (g.value(out).data()[0], g.kink_signature())
}

/// Compare backward-pass gradients of the scalar built by `f` against
/// central differences, for every tensor in `inputs`.
pub fn check_gradients(
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Var,
    cfg: &GradCheck,
) -> GradCheckReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let base_sig = g.kink_signature();
    let (mut skipped, mut probed) = (0, 0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let analytic_full = grads.get_or_zeros(vars[i], t.shape());
        let coords: Vec<usize> = if t.len() <= cfg.max_coords {
            (0..t.len()).collect()
        } else {
            sample(&mut rng, t.len(), cfg.max_coords).into_vec()
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += cfg.eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= cfg.eps;
            let (fp, sp) = eval(&plus, &f);
            let (fm, sm) = eval(&minus, &f);
            probed += 1;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            let d = (fp - fm) / (2.0 * cfg.eps);
            analytic.push(analytic_full.data()[c]);
            numeric.push(d);
        }
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        per_input.push((relative_error(&analytic, &numeric), na, nn));
    }
    GradCheckReport {
        per_input,
        skipped,
        probed,
    }
}
