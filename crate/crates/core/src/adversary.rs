//! Conditional feature discriminator and the adversarial and reconstruction
//! losses that train the predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var, LOGIT_CLAMP};
use crate::nn::{BoundConvBn, ConvBn, Parameterized};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Channels of each feature map; the input has twice as many.
    pub feature_channels: usize,
    pub widths: [usize; 3],
    pub strides: [usize; 3],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            feature_channels: 32,
            widths: [64, 64, 64],
            strides: [2, 2, 1],
        }
    }
}

/// Three conv/norm/leaky layers, global pooling and a linear scoring head.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub layers: Vec<ConvBn>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

#[derive(Clone, Debug)]
pub struct BoundDiscriminator {
    pub layers: Vec<BoundConvBn>,
    pub head_w: Var,
    pub head_b: Var,
}

impl DiscriminatorParams {
    pub fn new<R: Rng + ?Sized>(cfg: &DiscriminatorConfig, rng: &mut R) -> Self {
        let mut cin = 2 * cfg.feature_channels;
        let mut layers = Vec::with_capacity(3);
        for (&w, &s) in cfg.widths.iter().zip(&cfg.strides) {
            layers.push(ConvBn::new(cin, w, 3, s, rng));
            cin = w;
        }
        Self {
            layers,
            head_w: Tensor::randn(&[1, cin], 1.0 / (cin as f64).sqrt(), rng),
            head_b: Tensor::zeros(&[1]),
        }
    }

    /// All weights zero: every logit is exactly 0.
    pub fn zeroed(cfg: &DiscriminatorConfig) -> Self {
        let mut cin = 2 * cfg.feature_channels;
        let mut layers = Vec::with_capacity(3);
        for (&w, &s) in cfg.widths.iter().zip(&cfg.strides) {
            layers.push(ConvBn::zeroed(cin, w, 3, s));
            cin = w;
        }
        Self {
            layers,
            head_w: Tensor::zeros(&[1, cin]),
            head_b: Tensor::zeros(&[1]),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].weight.dim(1)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDiscriminator {
        let layers = self.layers.iter().map(|l| l.bind(g, trainable)).collect();
        let (head_w, head_b) = if trainable {
            (g.param(self.head_w.clone()), g.param(self.head_b.clone()))
        } else {
            (g.constant(self.head_w.clone()), g.constant(self.head_b.clone()))
        };
        BoundDiscriminator { layers, head_w, head_b }
    }

    pub fn vars(b: &BoundDiscriminator) -> Vec<Var> {
        let mut v: Vec<Var> = b.layers.iter().flat_map(ConvBn::vars).collect();
        v.push(b.head_w);
        v.push(b.head_b);
        v
    }

    /// Logits (`N×1`) for `N×C×h×w` condition/candidate pairs.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &BoundDiscriminator,
        condition: Var,
        candidate: Var,
        train: bool,
    ) -> (Var, Vec<BatchStats>) {
        let mut x = g.concat_channels(&[condition, candidate]);
        let mut stats = Vec::new();
        for (layer, bl) in self.layers.iter().zip(&b.layers) {
            let (y, s) = layer.forward(g, bl, x, train);
            stats.extend(s);
            x = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let pooled = g.global_avg_pool(x);
        (g.linear(pooled, b.head_w, b.head_b), stats)
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            layer.update_running(s);
        }
    }
}

impl Parameterized for DiscriminatorParams {
    fn trainable(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.layers.iter().flat_map(|l| l.trainable()).collect();
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.layers.iter_mut().flat_map(|l| l.trainable_mut()).collect();
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    fn named_arrays(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named(&format!("discriminator.conv{}", i + 1)))
            .collect();
        v.push(("discriminator.head.weight".into(), &self.head_w));
        v.push(("discriminator.head.bias".into(), &self.head_b));
        v
    }

    fn named_arrays_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> = self
            .layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.named_mut(&format!("discriminator.conv{}", i + 1)))
            .collect();
        v.push(("discriminator.head.weight".into(), &mut self.head_w));
        v.push(("discriminator.head.bias".into(), &mut self.head_b));
        v
    }
}

/// Logit for one pair using running normalization statistics.
pub fn discriminate(params: &DiscriminatorParams, condition: &FeatureMap, candidate: &FeatureMap) -> Result<f64> {
    if !condition.same_shape(candidate) {
        return Err(Error::Shape(format!(
            "condition {:?} vs candidate {:?}",
            condition.values.shape(),
            candidate.values.shape()
        )));
    }
    if 2 * condition.channels() != params.input_channels() {
        return Err(Error::Shape(format!(
            "discriminator expects {} input channels, got {}",
            params.input_channels(),
            2 * condition.channels()
        )));
    }
    if !condition.all_finite() || !candidate.all_finite() {
        return Err(Error::NonFinite("discriminator input".into()));
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let c = g.constant(condition.batched());
    let x = g.constant(candidate.batched());
    let (logit, _) = params.forward_graph(&mut g, &b, c, x, false);
    Ok(g.value(logit).data()[0])
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn clamp(x: f64) -> f64 {
    x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// `mean(−log σ(real)) + mean(−log(1 − σ(fake)))` with logits clamped to ±30.
pub fn loss_discriminator(real_logits: &[f64], fake_logits: &[f64]) -> Result<f64> {
    if real_logits.is_empty() || fake_logits.is_empty() {
        return Err(Error::InvalidArgument("discriminator loss needs real and fake logits".into()));
    }
    let r = real_logits.iter().map(|&v| softplus(-clamp(v))).sum::<f64>() / real_logits.len() as f64;
    let f = fake_logits.iter().map(|&v| softplus(clamp(v))).sum::<f64>() / fake_logits.len() as f64;
    Ok(r + f)
}

/// Non-saturating generator loss `mean(−log σ(fake))`.
pub fn loss_generator(fake_logits: &[f64]) -> Result<f64> {
    if fake_logits.is_empty() {
        return Err(Error::InvalidArgument("generator loss needs fake logits".into()));
    }
    Ok(fake_logits.iter().map(|&v| softplus(-clamp(v))).sum::<f64>() / fake_logits.len() as f64)
}

/// Mean over aligned pairs of the mean squared difference.
pub fn loss_reconstruction(etas: &[FeatureMap], betas: &[FeatureMap]) -> Result<f64> {
    if etas.len() != betas.len() || etas.is_empty() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", etas.len(), betas.len())));
    }
    let mut acc = 0.0;
    for (e, b) in etas.iter().zip(betas) {
        if !e.same_shape(b) {
            return Err(Error::Shape(format!("{:?} vs {:?}", e.values.shape(), b.values.shape())));
        }
        let d: f64 = e.values.data().iter().zip(b.values.data()).map(|(x, y)| (x - y).powi(2)).sum();
        acc += d / e.values.len() as f64;
    }
    Ok(acc / etas.len() as f64)
}

/// Discriminator loss on graph variables. Condition and fake candidates are
/// detached here, so no gradient reaches whatever produced them.
#[allow(clippy::too_many_arguments)]
pub fn loss_discriminator_graph(
    g: &mut Graph,
    params: &DiscriminatorParams,
    b: &BoundDiscriminator,
    condition: Var,
    real: Var,
    fake: Var,
    train: bool,
) -> (Var, Vec<BatchStats>) {
    let c = g.detach(condition);
    let r = g.detach(real);
    let f = g.detach(fake);
    let (real_logits, mut stats) = params.forward_graph(g, b, c, r, train);
    let (fake_logits, fake_stats) = params.forward_graph(g, b, c, f, train);
    stats.extend(fake_stats);
    let lr = g.softplus_mean(real_logits, -1.0);
    let lf = g.softplus_mean(fake_logits, 1.0);
    (g.add(lr, lf), stats)
}

/// Generator loss on graph variables; gradients flow into `fake`.
pub fn loss_generator_graph(
    g: &mut Graph,
    params: &DiscriminatorParams,
    b: &BoundDiscriminator,
    condition: Var,
    fake: Var,
    train: bool,
) -> Var {
    let c = g.detach(condition);
    let (logits, _) = params.forward_graph(g, b, c, fake, train);
    g.softplus_mean(logits, -1.0)
}

/// Graph form of [`loss_reconstruction`].
pub fn loss_reconstruction_graph(g: &mut Graph, etas: &[Var], betas: &[Var]) -> Var {
    assert_eq!(etas.len(), betas.len());
    assert!(!etas.is_empty());
    let terms: Vec<Var> = etas
        .iter()
        .zip(betas)
        .map(|(&e, &b)| {
            let d = g.sub(e, b);
            let sq = g.mul(d, d);
            g.mean_all(sq)
        })
        .collect();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Geometry;
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::predictor::{PredictorConfig, PredictorParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    const GEOM: Geometry = Geometry {
        stride: 8.0,
        offset: 0.5,
    };

    fn small_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            feature_channels: 3,
            widths: [4, 4, 4],
            strides: [2, 2, 1],
        }
    }

    fn fm(rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::new(Tensor::randn(&[3, 8, 8], 1.0, rng), GEOM).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DiscriminatorParams::zeroed(&small_cfg());
        assert_eq!(discriminate(&d, &fm(&mut rng), &fm(&mut rng)).unwrap(), 0.0);
    }

    #[test]
    fn candidate_changes_the_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = DiscriminatorParams::new(&small_cfg(), &mut rng);
        let c = fm(&mut rng);
        let a = discriminate(&d, &c, &fm(&mut rng)).unwrap();
        let b = discriminate(&d, &c, &fm(&mut rng)).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.to_bits(), a.to_bits());
    }

    #[test]
    fn rejects_mismatched_and_non_finite_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DiscriminatorParams::new(&small_cfg(), &mut rng);
        let c = fm(&mut rng);
        let other = FeatureMap::new(Tensor::zeros(&[3, 4, 4]), GEOM).unwrap();
        assert!(discriminate(&d, &c, &other).is_err());
        let mut bad = fm(&mut rng);
        bad.values.data_mut()[0] = f64::INFINITY;
        assert!(discriminate(&d, &c, &bad).is_err());
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = DiscriminatorParams::new(&small_cfg(), &mut rng);
        let mut inputs: Vec<Tensor> = d.trainable().into_iter().cloned().collect();
        inputs.push(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng));
        inputs.push(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng));
        let n = inputs.len();
        let report = check_gradients(
            &inputs,
            |g, v| {
                let layers = v[..12]
                    .chunks(4)
                    .map(|c| BoundConvBn {
                        weight: c[0],
                        bias: c[1],
                        gamma: c[2],
                        beta: c[3],
                    })
                    .collect();
                let b = BoundDiscriminator {
                    layers,
                    head_w: v[12],
                    head_b: v[13],
                };
                let (logits, _) = d.forward_graph(g, &b, v[n - 2], v[n - 1], true);
                g.softplus_mean(logits, -1.0)
            },
            &GradCheck::default(),
        );
        assert!(report.max_rel_error() < 1e-3, "{report:?}");
    }

    #[test]
    fn losses_at_zero_logits() {
        assert!((loss_discriminator(&[0.0; 3], &[0.0; 2]).unwrap() - 2.0 * LN_2).abs() < 1e-12);
        assert!((loss_generator(&[0.0; 4]).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn losses_in_the_limits() {
        assert!(loss_discriminator(&[1e6], &[-1e6]).unwrap() < 1e-12);
        assert!(loss_generator(&[1e6]).unwrap() < 1e-12);
        let a = loss_discriminator(&[0.5, 1.0], &[0.2]).unwrap();
        let b = loss_discriminator(&[0.9, 1.0], &[0.2]).unwrap();
        assert!(b < a);
        assert!(loss_generator(&[f64::MAX]).unwrap().is_finite());
        assert!(loss_discriminator(&[], &[0.0]).is_err());
    }

    #[test]
    fn generator_loss_gradient_at_zero() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[4, 1]));
        let l = g.softplus_mean(logits, -1.0);
        let grads = g.backward(l);
        assert!(grads.get(logits).unwrap().data().iter().all(|&v| (v + 0.5 / 4.0).abs() < 1e-15));
    }

    #[test]
    fn reconstruction_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b: Vec<FeatureMap> = (0..3).map(|_| fm(&mut rng)).collect();
        assert_eq!(loss_reconstruction(&b, &b).unwrap(), 0.0);
        let e: Vec<FeatureMap> = b
            .iter()
            .map(|x| FeatureMap::new(x.values.map(|v| v + 1.0), GEOM).unwrap())
            .collect();
        assert!((loss_reconstruction(&e, &b).unwrap() - 1.0).abs() < 1e-12);
        let c: Vec<FeatureMap> = (0..3).map(|_| fm(&mut rng)).collect();
        let fwd = loss_reconstruction(&c, &b).unwrap();
        let mut cr = c.clone();
        let mut br = b.clone();
        cr.reverse();
        br.reverse();
        assert!((fwd - loss_reconstruction(&cr, &br).unwrap()).abs() < 1e-12);
        assert!(loss_reconstruction(&c[..2], &b).is_err());
    }

    #[test]
    fn discriminator_loss_sends_no_gradient_to_the_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = DiscriminatorParams::new(&small_cfg(), &mut rng);
        let p = PredictorParams::new(&PredictorConfig { channels: 3, hidden: 3 }, &mut rng);
        let mut g = Graph::new();
        let bp = p.bind(&mut g, true);
        let bd = d.bind(&mut g, true);
        let t = g.constant(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng));
        let a = g.constant(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng));
        let real = g.constant(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng));
        let eta = p.rollout_graph(&mut g, &bp, t, &[a])[0];
        let (l, _) = loss_discriminator_graph(&mut g, &d, &bd, a, real, eta, true);
        let grads = g.backward(l);
        for v in PredictorParams::vars(&bp) {
            assert!(grads.get(v).is_none());
        }
        assert!(DiscriminatorParams::vars(&bd).iter().any(|&v| grads.get(v).is_some()));
        let gl = loss_generator_graph(&mut g, &d, &bd, a, eta, true);
        let grads = g.backward(gl);
        assert!(PredictorParams::vars(&bp).iter().all(|&v| grads.get(v).is_some()));
    }
}
