//! Template-conditioned convolutional GRU that forecasts the next frame's
//! feature map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Parameterized;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Feature channels `C` of the template and observations.
    pub channels: usize,
    /// Recurrent channels.
    pub hidden: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            hidden: 32,
        }
    }
}

/// Gate, candidate and output projection kernels.
///
/// The update and reset gates share one convolution over
/// `[template, observation, hidden]`; its first `H` output channels drive the
/// update gate and the rest the reset gate.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub gates_w: Tensor,
    pub gates_b: Tensor,
    pub cand_w: Tensor,
    pub cand_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundPredictor {
    pub gates_w: Var,
    pub gates_b: Var,
    pub cand_w: Var,
    pub cand_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// Recurrent hidden state plus the frozen template feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorState {
    pub hidden: Tensor,
    pub template: FeatureMap,
}

impl PredictorParams {
    pub fn new<R: Rng + ?Sized>(cfg: &PredictorConfig, rng: &mut R) -> Self {
        let (c, h) = (cfg.channels, cfg.hidden);
        let fan = (2 * c + h) * 9;
        let s = 1.0 / (fan as f64).sqrt();
        Self {
            gates_w: Tensor::randn(&[2 * h, 2 * c + h, 3, 3], s, rng),
            gates_b: Tensor::zeros(&[2 * h]),
            cand_w: Tensor::randn(&[h, 2 * c + h, 3, 3], s, rng),
            cand_b: Tensor::zeros(&[h]),
            out_w: Tensor::randn(&[c, h, 1, 1], 1.0 / (h as f64).sqrt(), rng),
            out_b: Tensor::zeros(&[c]),
        }
    }

    pub fn channels(&self) -> usize {
        self.out_w.dim(0)
    }

    pub fn hidden_channels(&self) -> usize {
        self.cand_w.dim(0)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundPredictor {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundPredictor {
            gates_w: leaf(&self.gates_w),
            gates_b: leaf(&self.gates_b),
            cand_w: leaf(&self.cand_w),
            cand_b: leaf(&self.cand_b),
            out_w: leaf(&self.out_w),
            out_b: leaf(&self.out_b),
        }
    }

    pub fn vars(b: &BoundPredictor) -> [Var; 6] {
        [b.gates_w, b.gates_b, b.cand_w, b.cand_b, b.out_w, b.out_b]
    }

    /// One GRU update on `N×C×h×w` template/observation and `N×H×h×w`
    /// hidden variables. Returns `(new hidden, η)`.
    pub fn step_graph(&self, g: &mut Graph, b: &BoundPredictor, template: Var, alpha: Var, hidden: Var) -> (Var, Var) {
        let hc = self.hidden_channels();
        let gin = g.concat_channels(&[template, alpha, hidden]);
        let gates = g.conv2d(gin, b.gates_w, Some(b.gates_b), 1, 1);
        let gates = g.sigmoid(gates);
        let z = g.slice_channels(gates, 0, hc);
        let r = g.slice_channels(gates, hc, hc);
        let rh = g.mul(r, hidden);
        let cin = g.concat_channels(&[template, alpha, rh]);
        let cand = g.conv2d(cin, b.cand_w, Some(b.cand_b), 1, 1);
        let cand = g.tanh(cand);
        // h' = h + z ⊙ (ĥ − h)
        let diff = g.sub(cand, hidden);
        let upd = g.mul(z, diff);
        let h_new = g.add(hidden, upd);
        let eta = g.conv2d(h_new, b.out_w, Some(b.out_b), 1, 0);
        (h_new, eta)
    }

    /// Unrolled predictions from a zero hidden state; output `k` is the
    /// forecast after observing `alphas[0..=k]`.
    pub fn rollout_graph(&self, g: &mut Graph, b: &BoundPredictor, template: Var, alphas: &[Var]) -> Vec<Var> {
        let shape = g.value(template).shape().to_vec();
        let hidden_shape = [shape[0], self.hidden_channels(), shape[2], shape[3]];
        let mut hidden = g.constant(Tensor::zeros(&hidden_shape));
        let mut etas = Vec::with_capacity(alphas.len());
        for &a in alphas {
            let (h, eta) = self.step_graph(g, b, template, a, hidden);
            hidden = h;
            etas.push(eta);
        }
        etas
    }
}

impl Parameterized for PredictorParams {
    fn trainable(&self) -> Vec<&Tensor> {
        vec![
            &self.gates_w,
            &self.gates_b,
            &self.cand_w,
            &self.cand_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.gates_w,
            &mut self.gates_b,
            &mut self.cand_w,
            &mut self.cand_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    fn named_arrays(&self) -> Vec<(String, &Tensor)> {
        let names = ["gates.weight", "gates.bias", "candidate.weight", "candidate.bias", "output.weight", "output.bias"];
        names
            .iter()
            .map(|n| format!("predictor.{n}"))
            .zip(self.trainable())
            .collect()
    }

    fn named_arrays_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names = ["gates.weight", "gates.bias", "candidate.weight", "candidate.bias", "output.weight", "output.bias"];
        names
            .iter()
            .map(|n| format!("predictor.{n}"))
            .zip(self.trainable_mut())
            .collect()
    }
}

fn check_feature(params: &PredictorParams, fm: &FeatureMap, what: &str) -> Result<()> {
    if fm.channels() != params.channels() {
        return Err(Error::Shape(format!(
            "{what} has {} channels, predictor expects {}",
            fm.channels(),
            params.channels()
        )));
    }
    Ok(())
}

/// Zero hidden state holding `template`.
pub fn init_state(params: &PredictorParams, template: &FeatureMap) -> Result<PredictorState> {
    check_feature(params, template, "template")?;
    Ok(PredictorState {
        hidden: Tensor::zeros(&[params.hidden_channels(), template.height(), template.width()]),
        template: template.clone(),
    })
}

/// Channel-wise `[template, alpha_t]`.
pub fn condition_input(state: &PredictorState, alpha_t: &FeatureMap) -> Result<FeatureMap> {
    if !state.template.same_shape(alpha_t) {
        return Err(Error::Shape(format!(
            "observation {:?} does not match template {:?}",
            alpha_t.values.shape(),
            state.template.values.shape()
        )));
    }
    let mut data = state.template.values.data().to_vec();
    data.extend_from_slice(alpha_t.values.data());
    let (h, w) = (alpha_t.height(), alpha_t.width());
    FeatureMap::new(Tensor::from_vec(&[2 * alpha_t.channels(), h, w], data), alpha_t.geometry)
}

/// Advance the recurrence with observation `alpha_t`; returns the new state
/// and the forecast for the following frame.
pub fn predict_next(
    params: &PredictorParams,
    state: &PredictorState,
    alpha_t: &FeatureMap,
) -> Result<(PredictorState, FeatureMap)> {
    check_feature(params, alpha_t, "observation")?;
    condition_input(state, alpha_t)?;
    if !state.hidden.all_finite() || !alpha_t.all_finite() {
        return Err(Error::NonFinite("predictor state or observation".into()));
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let t = g.constant(state.template.batched());
    let a = g.constant(alpha_t.batched());
    let mut hs = vec![1];
    hs.extend_from_slice(state.hidden.shape());
    let h = g.constant(state.hidden.clone().reshape(&hs));
    let (h_new, eta) = params.step_graph(&mut g, &b, t, a, h);
    let hidden = g.value(h_new).clone().reshape(state.hidden.shape());
    if !hidden.all_finite() {
        return Err(Error::NonFinite("predictor hidden state".into()));
    }
    let eta = FeatureMap::from_batched(g.value(eta).clone(), alpha_t.geometry);
    Ok((
        PredictorState {
            hidden,
            template: state.template.clone(),
        },
        eta,
    ))
}

/// Forecasts for every observation prefix, starting from a zero state.
pub fn rollout(params: &PredictorParams, template: &FeatureMap, alphas: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("rollout needs at least one observation".into()));
    }
    let mut state = init_state(params, template)?;
    let mut out = Vec::with_capacity(alphas.len());
    for a in alphas {
        let (s, eta) = predict_next(params, &state, a)?;
        state = s;
        out.push(eta);
    }
    Ok(out)
}
