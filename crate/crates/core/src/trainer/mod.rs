//! Offline training: clip sampling, the four losses and their weighted sum,
//! alternating discriminator and generator updates, the learning-rate
//! schedule and checkpointing.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, ArrayEntry, Checkpoint, CheckpointMeta, Manifest, OptimState,
    MANIFEST_FILE,
};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{loss_discriminator_graph, loss_generator_graph, loss_reconstruction_graph, DiscriminatorParams};
use crate::backbone::{BackboneParams, FeatureMap, Geometry};
use crate::data_io::{apply_random_mask, crop_search_region, JitterConfig, MaskConfig, OcclusionMask, SamplePatch, Sequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::localizer::{
    correlate_graph, gaussian_label, learn_filter, localization_loss_graph, region_weight, Filter, LocalizerConfig,
    SampleMemory,
};
use crate::model::{Model, ModelConfig};
use crate::nn::{clip_global_norm, Adam, AdamConfig, Parameterized};
use crate::predictor::PredictorParams;
use crate::rng::substream;
use crate::size_estimator::{sample_candidates, size_loss_graph, IouHeadParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_v: f64,
    pub w_r: f64,
    pub w_l: f64,
    pub w_s: f64,
    /// Share of the forecast in the fused feature.
    pub lambda_fuse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_v: 0.1,
            w_r: 1.0,
            w_l: 1.0,
            w_s: 1.0,
            lambda_fuse: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_V", self.w_v), ("w_R", self.w_r), ("w_L", self.w_l), ("w_S", self.w_s)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_fuse) {
            return Err(Error::Config(format!("lambda_fuse = {} must lie in [0, 1]", self.lambda_fuse)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Observed frames per clip; one more frame is cropped as the last target.
    pub clip_length: usize,
    pub batch_size: usize,
    pub iterations_per_epoch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub decay_period: usize,
    pub seed: u64,
    pub mask: MaskConfig,
    pub weights: LossWeights,
    pub jitter: JitterConfig,
    /// Jittered boxes per frame for the IoU regression loss.
    pub size_candidates: usize,
    /// Candidate jitter, as a fraction of the box size.
    pub size_sigma: f64,
    /// Filter-learning iterations on the clip template.
    pub filter_iters: usize,
    pub grad_clip: f64,
    pub max_consecutive_skips: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_length: 8,
            batch_size: 2,
            iterations_per_epoch: 100,
            epochs: 20,
            learning_rate: 1e-3,
            decay_factor: 0.2,
            decay_period: 15,
            seed: 0,
            mask: MaskConfig::default(),
            weights: LossWeights::default(),
            jitter: JitterConfig {
                scale_range: 0.1,
                shift_range: 0.1,
            },
            size_candidates: 8,
            size_sigma: 0.3,
            filter_iters: 10,
            grad_clip: 10.0,
            max_consecutive_skips: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.clip_length < 2 {
            return Err(Error::Config(format!("clip_length = {} must be at least 2", self.clip_length)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor {} must lie in (0, 1]", self.decay_factor)));
        }
        if self.batch_size == 0 || self.iterations_per_epoch == 0 || self.decay_period == 0 || self.size_candidates == 0
        {
            return Err(Error::Config(
                "batch size, iterations per epoch, decay period and size candidates must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::Config("learning rate and gradient clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask.probability) {
            return Err(Error::Config(format!("p_mask = {} must lie in [0, 1]", self.mask.probability)));
        }
        if self.max_consecutive_skips == 0 {
            return Err(Error::Config("max_consecutive_skips must be positive".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> u64 {
        (self.epochs * self.iterations_per_epoch) as u64
    }

    /// Learning rate during 1-based `epoch`.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let decays = epoch.saturating_sub(1) / self.decay_period;
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }

    /// Learning rate for 0-based step `iteration`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.lr_for_epoch(iteration as usize / self.iterations_per_epoch + 1)
    }
}

/// `clip_length + 1` consecutive cropped frames. Crop 0 is the template,
/// cropped on its own box; crop `j` is cropped around frame `j − 1`'s box.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingClip {
    pub sequence: usize,
    pub start: usize,
    pub crops: Vec<SamplePatch>,
    /// Masked replacement for input `t`, if one was drawn.
    pub masked_inputs: Vec<Option<SamplePatch>>,
    pub masks: Vec<OcclusionMask>,
}

impl TrainingClip {
    /// Number of observed inputs.
    pub fn len(&self) -> usize {
        self.crops.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Predictor input `t` (`0 ≤ t < len`), masked or not.
    pub fn input(&self, t: usize) -> &SamplePatch {
        self.masked_inputs[t].as_ref().unwrap_or(&self.crops[t])
    }

    /// Unmasked frame following input `t`.
    pub fn target(&self, t: usize) -> &SamplePatch {
        &self.crops[t + 1]
    }
}

/// Draw one clip: a random sequence long enough, a random start, jittered
/// crops, and random masks on inputs after the template.
pub fn sample_clip<R: Rng + ?Sized>(
    dataset: &[Sequence],
    cfg: &TrainConfig,
    crop: &crate::data_io::CropParams,
    rng: &mut R,
) -> Result<TrainingClip> {
    let need = cfg.clip_length + 1;
    let eligible: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].len() >= need).collect();
    if eligible.is_empty() {
        return Err(Error::Dataset(format!(
            "no sequence has the {need} frames a clip of length {} needs",
            cfg.clip_length
        )));
    }
    let sequence = eligible[rng.random_range(0..eligible.len())];
    let seq = &dataset[sequence];
    let start = rng.random_range(0..=seq.len() - need);
    let mut crops = Vec::with_capacity(need);
    crops.push(crop_search_region(
        &seq.frames[start],
        &seq.boxes[start],
        &seq.boxes[start],
        &JitterConfig::none(),
        crop,
        rng,
    )?);
    for j in 1..need {
        let f = start + j;
        crops.push(crop_search_region(&seq.frames[f], &seq.boxes[f - 1], &seq.boxes[f], &cfg.jitter, crop, rng)?);
    }
    let s = crop.patch_size;
    let mut masked_inputs = vec![None];
    let mut masks = vec![OcclusionMask::empty(s, s)];
    for c in &crops[1..cfg.clip_length] {
        let (patch, mask) = apply_random_mask(c, &cfg.mask, rng);
        masked_inputs.push((!mask.is_empty()).then_some(patch));
        masks.push(mask);
    }
    Ok(TrainingClip {
        sequence,
        start,
        crops,
        masked_inputs,
        masks,
    })
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_v: f64,
    pub l_r: f64,
    pub l_l: f64,
    pub l_s: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub components: LossComponents,
    pub total: f64,
    /// Discriminator loss of the same step.
    pub l_d: f64,
    /// Generator gradient norm before clipping.
    pub grad_norm: f64,
    pub skipped: bool,
}

/// Weighted sum of the four components.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<(f64, LossReport)> {
    for (name, v) in [("l_V", c.l_v), ("l_R", c.l_r), ("l_L", c.l_l), ("l_S", c.l_s)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} = {v}")));
        }
    }
    let total = w.w_v * c.l_v + w.w_r * c.l_r + w.w_l * c.l_l + w.w_s * c.l_s;
    Ok((
        total,
        LossReport {
            components: *c,
            total,
            ..LossReport::default()
        },
    ))
}

/// Parameters and optimizer moments evolving during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub iteration: u64,
    pub consecutive_skips: usize,
    pub skipped_steps: u64,
}

impl TrainState {
    pub fn new(model: Model, adam: AdamConfig) -> Self {
        let adam_g = Adam::new(&model.generator_trainable(), adam);
        let adam_d = Adam::new(&model.discriminator.trainable(), adam);
        Self {
            model,
            adam_g,
            adam_d,
            iteration: 0,
            consecutive_skips: 0,
            skipped_steps: 0,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, adam: AdamConfig) -> Self {
        let mut s = Self::new(ck.model, adam);
        if let Some(o) = ck.optim {
            s.adam_g = o.generator;
            s.adam_d = o.discriminator;
        }
        s.iteration = ck.meta.iteration;
        s.consecutive_skips = ck.meta.consecutive_skips;
        s.skipped_steps = ck.meta.skipped_steps;
        s
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.model.clone(),
            optim: Some(OptimState {
                generator: self.adam_g.clone(),
                discriminator: self.adam_d.clone(),
            }),
            meta: CheckpointMeta {
                iteration: self.iteration,
                epoch: self.iteration / cfg.iterations_per_epoch as u64,
                seed: cfg.seed,
                consecutive_skips: self.consecutive_skips,
                skipped_steps: self.skipped_steps,
                train_config: serde_json::to_value(cfg)?,
            },
        })
    }

    fn skip(&mut self, cfg: &TrainConfig, why: &str) -> Result<LossReport> {
        self.consecutive_skips += 1;
        self.skipped_steps += 1;
        log::warn!("step {} skipped: {why}", self.iteration);
        self.iteration += 1;
        if self.consecutive_skips >= cfg.max_consecutive_skips {
            return Err(Error::Diverged(format!(
                "{} consecutive steps skipped, last: {why}",
                self.consecutive_skips
            )));
        }
        Ok(LossReport {
            skipped: true,
            ..LossReport::default()
        })
    }
}

fn label_and_weight(patch: &SamplePatch, geometry: Geometry, size: usize, loc: &LocalizerConfig) -> Result<(Tensor, Tensor)> {
    let b = patch.target_box;
    let center = (geometry.patch_to_cell(b.cy()), geometry.patch_to_cell(b.cx()));
    let label = gaussian_label(center, loc.sigma, (size, size))?;
    let weight = region_weight(center, loc.sigma, loc.center_weight, (size, size));
    Ok((label.values, weight))
}

fn stack_patches(patches: &[&SamplePatch]) -> Tensor {
    let s = patches[0].size;
    let mut data = Vec::with_capacity(patches.len() * 3 * s * s);
    for p in patches {
        data.extend_from_slice(p.pixels.data());
    }
    Tensor::from_vec(&[patches.len(), 3, s, s], data)
}

fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(Tensor::all_finite)
}

fn weighted_sum(g: &mut Graph, terms: &[(Var, f64)]) -> Var {
    let mut acc = g.scale(terms[0].0, terms[0].1);
    for &(v, w) in &terms[1..] {
        let s = g.scale(v, w);
        acc = g.add(acc, s);
    }
    acc
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// One discriminator update followed by one generator update on `clips`.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    clips: &[TrainingClip],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<LossReport> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("train_step needs at least one clip".into()));
    }
    let n = clips[0].len();
    if n < 1 || clips.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidArgument("clips must share a positive length".into()));
    }
    let model = &state.model;
    let geom = model.geometry();
    let fs = model.feature_size();
    let loc = model.config.localizer;
    let lambda = cfg.weights.lambda_fuse;
    let bsz = clips.len();
    let per = n + 1;
    let unmasked = |b: usize, j: usize| b * per + j;

    let mut patches: Vec<&SamplePatch> = clips.iter().flat_map(|c| c.crops.iter()).collect();
    let mut input_idx = vec![vec![0; n]; bsz];
    for (b, clip) in clips.iter().enumerate() {
        for (t, slot) in input_idx[b].iter_mut().enumerate() {
            *slot = match &clip.masked_inputs[t] {
                Some(p) => {
                    patches.push(p);
                    patches.len() - 1
                }
                None => unmasked(b, t),
            };
        }
    }

    let mut g = Graph::new();
    let bb = model.backbone.bind(&mut g, true);
    let pixels = g.constant(stack_patches(&patches));
    let (feats, bn_stats) = model.backbone.forward(&mut g, &bb, pixels, true);

    let template_idx: Vec<usize> = (0..bsz).map(|b| unmasked(b, 0)).collect();
    let template = g.gather_batch(feats, &template_idx);
    let alphas: Vec<Var> = (0..n)
        .map(|t| {
            let idx: Vec<usize> = (0..bsz).map(|b| input_idx[b][t]).collect();
            g.gather_batch(feats, &idx)
        })
        .collect();
    let pb = model.predictor.bind(&mut g, true);
    let etas = model.predictor.rollout_graph(&mut g, &pb, template, &alphas);
    let betas: Vec<Var> = (0..n)
        .map(|t| {
            let idx: Vec<usize> = (0..bsz).map(|b| unmasked(b, t + 1)).collect();
            g.gather_batch(feats, &idx)
        })
        .collect();

    let detached: Vec<Var> = betas.iter().map(|&b| g.detach(b)).collect();
    let l_r = loss_reconstruction_graph(&mut g, &etas, &detached);

    let fused: Vec<Var> = etas
        .iter()
        .zip(&betas)
        .map(|(&e, &b)| {
            let se = g.scale(e, lambda);
            let sb = g.scale(b, 1.0 - lambda);
            g.add(se, sb)
        })
        .collect();
    let fused_all = g.stack_batch(&fused);

    // filter fitted to each clip's template, held fixed
    let c = model.backbone.out_channels();
    let mut l_l_terms = Vec::with_capacity(bsz);
    for (b, clip) in clips.iter().enumerate() {
        let tf = FeatureMap::from_batched(g.value(feats).slice_outer(unmasked(b, 0)), geom);
        let (label0, weight0) = label_and_weight(&clip.crops[0], geom, fs, &loc)?;
        let mut memory = SampleMemory::new(1, 1.0);
        let center = clip.crops[0].target_box;
        let label0 = crate::localizer::LabelMap {
            values: label0,
            center: (geom.patch_to_cell(center.cy()), geom.patch_to_cell(center.cx())),
        };
        memory.insert(tf, label0, weight0);
        let fit = learn_filter(&memory, &Filter::zeros(c, loc.filter_size), cfg.filter_iters, loc.reg_lambda)?;
        let kernel = g.constant(fit.filter.kernel());
        let idx: Vec<usize> = (0..n).map(|t| t * bsz + b).collect();
        let xb = g.gather_batch(fused_all, &idx);
        let resp = correlate_graph(&mut g, xb, kernel);
        let mut labels = Vec::with_capacity(n * fs * fs);
        let mut weights = Vec::with_capacity(n * fs * fs);
        for t in 0..n {
            let (l, w) = label_and_weight(clip.target(t), geom, fs, &loc)?;
            labels.extend_from_slice(l.data());
            weights.extend_from_slice(w.data());
        }
        let labels = Tensor::from_vec(&[n, 1, fs, fs], labels);
        let weights = Tensor::from_vec(&[n, 1, fs, fs], weights);
        l_l_terms.push(localization_loss_graph(&mut g, resp, &labels, &weights));
    }
    let l_l = mean_of(&mut g, &l_l_terms);

    let hb = model.iou_head.bind(&mut g, true);
    let mut l_s_terms = Vec::with_capacity(bsz * n);
    for (b, clip) in clips.iter().enumerate() {
        let tb = g.gather_batch(feats, &[unmasked(b, 0)]);
        let bx = g.constant(Tensor::from_vec(&[4], clip.crops[0].target_box.to_array().to_vec()));
        let tp = g.pool_region(tb, bx, geom.stride, geom.offset, model.iou_head.k);
        let m = model.iou_head.modulation_graph(&mut g, &hb, tp);
        for t in 0..n {
            let cands = sample_candidates(&clip.target(t).target_box, cfg.size_candidates, cfg.size_sigma, rng)?;
            let xbt = g.gather_batch(fused_all, &[t * bsz + b]);
            l_s_terms.push(size_loss_graph(&mut g, &model.iou_head, &hb, m, xbt, geom, &cands));
        }
    }
    let l_s = mean_of(&mut g, &l_s_terms);

    for (name, v) in [("l_R", l_r), ("l_L", l_l), ("l_S", l_s)] {
        let x = g.value(v).data()[0];
        if !x.is_finite() {
            return state.skip(cfg, &format!("{name} = {x}"));
        }
    }

    // discriminator step on detached pairs
    let cond_idx: Vec<usize> = (0..n).flat_map(|t| (0..bsz).map(move |b| unmasked(b, t))).collect();
    let real_idx: Vec<usize> = (0..n).flat_map(|t| (0..bsz).map(move |b| unmasked(b, t + 1))).collect();
    let cond = g.gather_batch(feats, &cond_idx);
    let fake = g.stack_batch(&etas);
    let real_v = {
        let fv = g.value(feats);
        let refs: Vec<Tensor> = real_idx.iter().map(|&i| fv.slice_outer(i)).collect();
        Tensor::stack(&refs.iter().collect::<Vec<_>>())
    };
    let mut gd = Graph::new();
    let db = model.discriminator.bind(&mut gd, true);
    let dc = gd.constant(g.value(cond).clone());
    let dr = gd.constant(real_v);
    let df = gd.constant(g.value(fake).clone());
    let (ld, d_stats) = loss_discriminator_graph(&mut gd, &model.discriminator, &db, dc, dr, df, true);
    let l_d = gd.value(ld).data()[0];
    if !l_d.is_finite() {
        return state.skip(cfg, &format!("l_D = {l_d}"));
    }
    let dgrads = gd.backward(ld);
    let dvars = DiscriminatorParams::vars(&db);
    let mut d_grads: Vec<Tensor> = dvars.iter().map(|&v| dgrads.get_or_zeros(v, gd.value(v).shape())).collect();
    if !all_finite(&d_grads) {
        return state.skip(cfg, "non-finite discriminator gradient");
    }
    clip_global_norm(&mut d_grads, cfg.grad_clip);
    let model = &mut state.model;
    state.adam_d.step(model.discriminator.trainable_mut(), &d_grads, lr);
    let n_layers = model.discriminator.layers.len();
    model.discriminator.update_running(&d_stats[..n_layers]);

    // generator step against the updated discriminator
    let dbound = model.discriminator.bind(&mut g, false);
    let l_v = loss_generator_graph(&mut g, &model.discriminator, &dbound, cond, fake, true);
    let comps = LossComponents {
        l_v: g.value(l_v).data()[0],
        l_r: g.value(l_r).data()[0],
        l_l: g.value(l_l).data()[0],
        l_s: g.value(l_s).data()[0],
    };
    let mut report = match total_loss(&comps, &cfg.weights) {
        Ok((_, r)) => r,
        Err(e) => return state.skip(cfg, &e.to_string()),
    };
    report.l_d = l_d;
    let w = cfg.weights;
    let total = weighted_sum(&mut g, &[(l_v, w.w_v), (l_r, w.w_r), (l_l, w.w_l), (l_s, w.w_s)]);
    let grads = g.backward(total);
    let mut vars = BackboneParams::vars(&bb);
    vars.extend(PredictorParams::vars(&pb));
    vars.extend(IouHeadParams::vars(&hb));
    let mut g_grads: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v, g.value(v).shape())).collect();
    if !all_finite(&g_grads) {
        return state.skip(cfg, "non-finite generator gradient");
    }
    report.grad_norm = clip_global_norm(&mut g_grads, cfg.grad_clip);
    state.adam_g.step(model.generator_trainable_mut(), &g_grads, lr);
    model.backbone.update_running(&bn_stats);
    state.consecutive_skips = 0;
    state.iteration += 1;
    Ok(report)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub lr: f64,
    pub report: LossReport,
}

pub const LOG_HEADER: &str = "iteration,lr,l_V,l_R,l_L,l_S,total";

impl LogRow {
    /// One CSV line; skipped steps carry `NaN` losses.
    pub fn csv(&self) -> String {
        let c = self.report.components;
        let v = [c.l_v, c.l_r, c.l_l, c.l_s, self.report.total].map(|x| if self.report.skipped { f64::NAN } else { x });
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.lr, v[0], v[1], v[2], v[3], v[4]
        )
    }
}

/// Parse a `train_log.csv` written by [`train`].
pub fn read_train_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LOG_HEADER => {}
        _ => {
            return Err(Error::Dataset(format!("{} does not start with `{LOG_HEADER}`", path.display())));
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", f.len())));
            }
            let iteration = f[0].parse::<u64>().map_err(|e| bad(e.to_string()))?;
            let v = f[1..]
                .iter()
                .map(|x| x.parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let skipped = v[1..].iter().any(|x| x.is_nan());
            Ok(LogRow {
                iteration,
                lr: v[0],
                report: LossReport {
                    components: LossComponents {
                        l_v: v[1],
                        l_r: v[2],
                        l_l: v[3],
                        l_s: v[4],
                    },
                    total: v[5],
                    skipped,
                    ..LossReport::default()
                },
            })
        })
        .collect()
}

/// Where and how [`train`] persists its progress.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `train_log.csv`, `epoch_NNN/` checkpoints and `final/`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    pub resume: Option<Checkpoint>,
    /// Stop after this many total iterations (for interruption).
    pub stop_at: Option<u64>,
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Rows produced by this call.
    pub log: Vec<LogRow>,
}

pub fn final_checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("final")
}

/// Run `cfg.epochs × cfg.iterations_per_epoch` steps, or continue a resumed
/// run to the same total.
pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig, dataset: &[Sequence], opts: TrainOptions) -> Result<TrainRun> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut state = match opts.resume {
        Some(ck) => {
            if ck.model.config != *model_cfg {
                return Err(Error::Config("resumed checkpoint has a different model configuration".into()));
            }
            TrainState::from_checkpoint(ck, cfg.adam)
        }
        None => TrainState::new(Model::new(model_cfg, cfg.seed)?, cfg.adam),
    };
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("train_log.csv");
            let fresh = state.iteration == 0 || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(path)?;
            if fresh {
                writeln!(f, "{LOG_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };
    let total = cfg.total_iterations();
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let ipe = cfg.iterations_per_epoch as u64;
    let mut log = Vec::new();
    while state.iteration < end {
        let it = state.iteration;
        let lr = cfg.lr_at(it);
        let mut rng = substream(cfg.seed, "train.step", it);
        let clips = (0..cfg.batch_size)
            .map(|_| sample_clip(dataset, cfg, &model_cfg.crop, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let report = train_step(&mut state, &clips, cfg, lr, &mut rng)?;
        let row = LogRow {
            iteration: it,
            lr,
            report,
        };
        if let Some(f) = &mut log_file {
            writeln!(f, "{}", row.csv())?;
        }
        if it % 50 == 0 {
            let c = report.components;
            log::info!(
                "iter {it} lr {lr:.2e} l_V {:.4} l_R {:.4} l_L {:.4} l_S {:.4} total {:.4}",
                c.l_v,
                c.l_r,
                c.l_l,
                c.l_s,
                report.total
            );
        }
        log.push(row);
        if state.iteration % ipe == 0 {
            if let Some(dir) = &opts.out_dir {
                let epoch = state.iteration / ipe;
                save_checkpoint(&state.to_checkpoint(cfg)?, &dir.join(format!("epoch_{epoch:03}")))?;
            }
        }
    }
    let checkpoint = state.to_checkpoint(cfg)?;
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&checkpoint, &final_checkpoint_dir(dir))?;
    }
    Ok(TrainRun { checkpoint, log })
}

/// Population variance of the generator loss over the last `window` rows.
pub fn generator_loss_variance(log: &[LogRow], window: usize) -> f64 {
    let rows: Vec<f64> = log
        .iter()
        .rev()
        .filter(|r| !r.report.skipped)
        .take(window)
        .map(|r| r.report.components.l_v)
        .collect();
    if rows.is_empty() {
        return 0.0;
    }
    let mean = rows.iter().sum::<f64>() / rows.len() as f64;
    rows.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows.len() as f64
}
