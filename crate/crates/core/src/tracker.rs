//! Online tracking: augmented initialization, fusion of the forecast and
//! observed features, filter localization, IoU-guided box refinement,
//! memory updates and recurrent-state propagation.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{extract_batch, extract_features, FeatureMap, Geometry};
use crate::data_io::{
    crop_rotated, crop_search_region, flip_horizontal, gaussian_blur, BoundingBox, Frame, JitterConfig, SamplePatch,
    Sequence,
};
use crate::error::{Error, Result};
use crate::localizer::{
    correlate, gaussian_label, learn_filter, localize, region_weight, Filter, LocalizerConfig, Peak, SampleMemory,
};
use crate::model::Model;
use crate::predictor::{init_state, predict_next, PredictorState};
use crate::rng::{substream, StreamRng};
use crate::size_estimator::{estimate_box, pool_region, PooledFeature, MIN_BOX_SIDE};
use crate::tensor::Tensor;

/// Number of augmented samples built from the first frame.
pub const INIT_SAMPLES: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Share of the forecast in the fused feature.
    pub lambda_fuse: f64,
    /// When false the predictor is never run (observed features only).
    pub use_predictor: bool,
    pub refine_steps: usize,
    /// Refinement starts, the localizer's box included.
    pub refine_candidates: usize,
    /// Results averaged into the final box.
    pub refine_top: usize,
    /// Jitter of the extra starts, relative to box size.
    pub refine_jitter: f64,
    /// When false the box center stays at the correlation peak and only the
    /// size comes from refinement.
    pub refine_position: bool,
    /// Weight of the cosine window that favors small displacements; 0 leaves
    /// the response untouched.
    pub window_influence: f64,
    /// Fraction of the refined size change applied each frame.
    pub size_update_rate: f64,
    /// Largest per-frame change of either box side, as a ratio.
    pub max_scale_step: f64,
    /// Translation of the shifted init samples, relative to box size.
    pub augment_shift: f64,
    pub augment_rotation_deg: f64,
    pub seed: u64,
    /// Overrides the checkpoint's localizer settings.
    pub localizer: Option<LocalizerConfig>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            lambda_fuse: 0.2,
            use_predictor: true,
            refine_steps: 1,
            refine_candidates: 1,
            refine_top: 1,
            refine_jitter: 0.0,
            refine_position: false,
            window_influence: 0.3,
            size_update_rate: 0.3,
            max_scale_step: 1.1,
            augment_shift: 0.1,
            augment_rotation_deg: 10.0,
            seed: 0,
            localizer: None,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_fuse) {
            return Err(Error::Config(format!("lambda_fuse = {} must lie in [0, 1]", self.lambda_fuse)));
        }
        if self.refine_steps == 0 || self.refine_candidates == 0 || self.refine_top == 0 {
            return Err(Error::Config("refinement steps, candidates and top must be positive".into()));
        }
        if !(self.size_update_rate > 0.0 && self.size_update_rate <= 1.0) {
            return Err(Error::Config("size_update_rate must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.window_influence) {
            return Err(Error::Config("window_influence must lie in [0, 1]".into()));
        }
        if self.max_scale_step.is_nan() || self.max_scale_step < 1.0 || self.refine_jitter.is_nan() || self.refine_jitter < 0.0 {
            return Err(Error::Config("max_scale_step must be ≥ 1 and refine_jitter ≥ 0".into()));
        }
        Ok(())
    }
}

/// Everything carried from one frame to the next.
#[derive(Clone, Debug)]
pub struct TrackerState {
    pub predictor_state: Option<PredictorState>,
    /// Forecast for the upcoming frame.
    pub eta_pending: Option<FeatureMap>,
    pub filter: Filter,
    pub memory: SampleMemory,
    pub template_pool: PooledFeature,
    pub modulation: Vec<f64>,
    /// Current estimate in frame pixels.
    pub current_box: BoundingBox,
    /// Frames processed, the init frame being 0.
    pub frame_index: usize,
    pub confidence_history: Vec<f64>,
    pub localizer: LocalizerConfig,
    pub rng: StreamRng,
}

/// Output of one tracker step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame_index: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// `λ·η + (1 − λ)·β`; the endpoints return an input unchanged.
pub fn fuse_features(eta: &FeatureMap, beta: &FeatureMap, lambda_fuse: f64) -> Result<FeatureMap> {
    if !eta.same_shape(beta) {
        return Err(Error::Shape(format!(
            "forecast {:?} vs observation {:?}",
            eta.values.shape(),
            beta.values.shape()
        )));
    }
    if !(0.0..=1.0).contains(&lambda_fuse) {
        return Err(Error::InvalidArgument(format!("lambda_fuse = {lambda_fuse} outside [0, 1]")));
    }
    if lambda_fuse == 0.0 {
        return Ok(beta.clone());
    }
    if lambda_fuse == 1.0 {
        return Ok(eta.clone());
    }
    let values = eta
        .values
        .zip_map(&beta.values, |e, b| lambda_fuse * e + (1.0 - lambda_fuse) * b);
    Ok(FeatureMap {
        values,
        geometry: beta.geometry,
    })
}

fn label_and_region(center_px: (f64, f64), geometry: Geometry, fm: &FeatureMap, loc: &LocalizerConfig) -> Result<(crate::localizer::LabelMap, Tensor)> {
    let cell = (geometry.patch_to_cell(center_px.1), geometry.patch_to_cell(center_px.0));
    let shape = (fm.height(), fm.width());
    let label = gaussian_label(cell, loc.sigma, shape)?;
    let region = region_weight(cell, loc.sigma, loc.center_weight, shape);
    Ok((label, region))
}

/// The fifteen first-frame samples: identity, four shifts, two scales, a
/// mirror, two rotations, two blurs and three random jitters. Index 0 is
/// the identity crop.
pub fn init_samples(model: &Model, frame: &Frame, init_box: &BoundingBox, cfg: &TrackerConfig, rng: &mut StreamRng) -> Result<Vec<SamplePatch>> {
    let crop = &model.config.crop;
    let none = JitterConfig::none();
    let b = *init_box;
    let identity = crop_search_region(frame, &b, &b, &none, crop, rng)?;
    let mut out = vec![identity.clone()];
    let (sx, sy) = (cfg.augment_shift * b.w, cfg.augment_shift * b.h);
    for (dx, dy) in [(sx, 0.0), (-sx, 0.0), (0.0, sy), (0.0, -sy)] {
        let r = BoundingBox::from_center(b.cx() + dx, b.cy() + dy, b.w, b.h);
        out.push(crop_search_region(frame, &r, &b, &none, crop, rng)?);
    }
    for s in [0.95, 1.05] {
        let r = BoundingBox::from_center(b.cx(), b.cy(), b.w * s, b.h * s);
        out.push(crop_search_region(frame, &r, &b, &none, crop, rng)?);
    }
    out.push(flip_horizontal(&identity));
    let side = crop.context_factor * b.area().sqrt();
    for deg in [cfg.augment_rotation_deg, -cfg.augment_rotation_deg] {
        let (pixels, transform) = crop_rotated(frame, b.cx(), b.cy(), side, deg.to_radians(), crop.patch_size);
        out.push(SamplePatch {
            pixels,
            transform,
            ..identity.clone()
        });
    }
    for sigma in [1.0, 2.0] {
        out.push(gaussian_blur(&identity, sigma));
    }
    let jitter = JitterConfig {
        scale_range: 0.05,
        shift_range: cfg.augment_shift,
    };
    for _ in 0..3 {
        out.push(crop_search_region(frame, &b, &b, &jitter, crop, rng)?);
    }
    debug_assert_eq!(out.len(), INIT_SAMPLES);
    Ok(out)
}

fn check_box_in_frame(b: &BoundingBox, frame: &Frame) -> Result<()> {
    b.validate()?;
    let inside = b.right() > 0.0 && b.bottom() > 0.0 && b.x < frame.width() as f64 && b.y < frame.height() as f64;
    if !inside {
        return Err(Error::InvalidBox(format!(
            "({}, {}, {}, {}) lies outside the {}x{} frame",
            b.x,
            b.y,
            b.w,
            b.h,
            frame.width(),
            frame.height()
        )));
    }
    Ok(())
}

/// Build the tracker state from the first frame and its box.
pub fn init(model: &Model, first_frame: &Frame, init_box: &BoundingBox, cfg: &TrackerConfig) -> Result<TrackerState> {
    cfg.validate()?;
    check_box_in_frame(init_box, first_frame)?;
    let loc = cfg.localizer.unwrap_or(model.config.localizer);
    let mut rng = substream(cfg.seed, "track", 0);
    let samples = init_samples(model, first_frame, init_box, cfg, &mut rng)?;
    let refs: Vec<&SamplePatch> = samples.iter().collect();
    let feats = extract_batch(&model.backbone, &refs)?;
    let geometry = model.geometry();
    let mut memory = SampleMemory::new(loc.memory_capacity, loc.memory_decay);
    for (p, f) in samples.iter().zip(&feats) {
        let (label, region) = label_and_region((p.target_box.cx(), p.target_box.cy()), geometry, f, &loc)?;
        memory.insert(f.clone(), label, region);
    }
    let fit = learn_filter(&memory, &Filter::zeros(feats[0].channels(), loc.filter_size), loc.init_iters, loc.reg_lambda)?;
    let template_pool = pool_region(&feats[0], &samples[0].target_box, model.iou_head.k)?;
    let modulation = model.iou_head.modulation(&template_pool);
    let (predictor_state, eta_pending) = if cfg.use_predictor {
        let s = init_state(&model.predictor, &feats[0])?;
        let (s, eta) = predict_next(&model.predictor, &s, &feats[0])?;
        (Some(s), Some(eta))
    } else {
        (None, None)
    };
    Ok(TrackerState {
        predictor_state,
        eta_pending,
        filter: fit.filter,
        memory,
        template_pool,
        modulation,
        current_box: *init_box,
        frame_index: 0,
        confidence_history: vec![1.0],
        localizer: loc,
        rng,
    })
}

fn clamp_to_frame(b: BoundingBox, frame: &Frame) -> BoundingBox {
    let (fw, fh) = (frame.width() as f64, frame.height() as f64);
    let w = b.w.clamp(MIN_BOX_SIDE, fw);
    let h = b.h.clamp(MIN_BOX_SIDE, fh);
    BoundingBox::from_center(b.cx().clamp(0.0, fw), b.cy().clamp(0.0, fh), w, h)
}

/// Response scaled by `(1 - w) + w * hann`, a separable raised cosine.
pub fn apply_window(response: &Tensor, w: f64) -> Tensor {
    let (h, wd) = (response.dim(0), response.dim(1));
    let hann = |n: usize, i: usize| {
        if n < 2 {
            1.0
        } else {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos()
        }
    };
    let mut out = response.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let (i, j) = (k / wd, k % wd);
        *v *= (1.0 - w) + w * hann(h, i) * hann(wd, j);
    }
    out
}

/// Process one frame; returns the new box (frame pixels) and confidence.
pub fn step(model: &Model, cfg: &TrackerConfig, state: &mut TrackerState, frame: &Frame) -> Result<TrackPoint> {
    state.frame_index += 1;
    let prev = state.current_box;
    let crop = &model.config.crop;
    let patch = crop_search_region(frame, &prev, &prev, &JitterConfig::none(), crop, &mut state.rng)?;
    let beta = extract_features(&model.backbone, &patch)?;
    if !beta.all_finite() {
        log::warn!("frame {}: non-finite features, box carried over", state.frame_index);
        state.confidence_history.push(0.0);
        return Ok(TrackPoint {
            frame_index: state.frame_index,
            bbox: prev,
            confidence: 0.0,
        });
    }
    let x = match (&state.eta_pending, cfg.use_predictor) {
        (Some(eta), true) => fuse_features(eta, &beta, cfg.lambda_fuse)?,
        _ => beta.clone(),
    };
    let response = correlate(&x, &state.filter)?;
    let peak = if cfg.window_influence > 0.0 {
        let windowed = apply_window(&response, cfg.window_influence);
        let p = localize(&windowed, x.geometry);
        let i = (p.cell.0.round() as usize).min(response.dim(0) - 1);
        let j = (p.cell.1.round() as usize).min(response.dim(1) - 1);
        Peak {
            confidence: response.data()[i * response.dim(1) + j],
            ..p
        }
    } else {
        localize(&response, x.geometry)
    };
    let t = patch.transform;
    let box0 = BoundingBox::from_center(peak.center.0, peak.center.1, prev.w / t.scale, prev.h / t.scale);
    let refined = estimate_box(
        &model.iou_head,
        &state.modulation,
        &x,
        &box0,
        cfg.refine_candidates,
        cfg.refine_steps,
        cfg.refine_top,
        cfg.refine_jitter,
        &mut state.rng,
    )?;
    let sized = if cfg.refine_position {
        refined.bbox
    } else {
        BoundingBox::from_center(box0.cx(), box0.cy(), refined.bbox.w, refined.bbox.h)
    };
    let mut est = t.to_frame(&sized);
    let k = cfg.max_scale_step;
    let r = cfg.size_update_rate;
    est = BoundingBox::from_center(
        est.cx(),
        est.cy(),
        (prev.w + r * (est.w - prev.w)).clamp(prev.w / k, prev.w * k),
        (prev.h + r * (est.h - prev.h)).clamp(prev.h / k, prev.h * k),
    );
    let bbox = clamp_to_frame(est, frame);
    let confidence = peak.confidence;

    let loc = state.localizer;
    let confident = confidence > loc.update_threshold;
    if confident {
        let in_patch = t.to_patch(&bbox);
        let (label, region) = label_and_region((in_patch.cx(), in_patch.cy()), x.geometry, &x, &loc)?;
        state.memory.insert(x.clone(), label, region);
    }
    if confident || state.frame_index.is_multiple_of(loc.update_interval.max(1)) {
        let fit = learn_filter(&state.memory, &state.filter, loc.update_iters, loc.reg_lambda)?;
        state.filter = fit.filter;
    }

    if let Some(ps) = &state.predictor_state {
        let (ps, eta) = predict_next(&model.predictor, ps, &beta)?;
        state.predictor_state = Some(ps);
        state.eta_pending = Some(eta);
    }
    state.current_box = bbox;
    state.confidence_history.push(confidence);
    Ok(TrackPoint {
        frame_index: state.frame_index,
        bbox,
        confidence,
    })
}

/// Initialize on frame 0's ground truth and track the rest. The first
/// output is the ground-truth box with confidence 1.
pub fn track_sequence(model: &Model, seq: &Sequence, cfg: &TrackerConfig) -> Result<Vec<TrackPoint>> {
    if seq.is_empty() {
        return Err(Error::Dataset(format!("sequence {} is empty", seq.name)));
    }
    let mut state = init(model, &seq.frames[0], &seq.boxes[0], cfg)?;
    let mut out = Vec::with_capacity(seq.len());
    out.push(TrackPoint {
        frame_index: 0,
        bbox: seq.boxes[0],
        confidence: 1.0,
    });
    for f in &seq.frames[1..] {
        out.push(step(model, cfg, &mut state, f)?);
    }
    Ok(out)
}

pub const TRACK_HEADER: &str = "frame_index,x,y,w,h,confidence";

pub fn write_tracking_csv(path: &Path, points: &[TrackPoint]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    writeln!(f, "{TRACK_HEADER}")?;
    for p in points {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            p.frame_index, p.bbox.x, p.bbox.y, p.bbox.w, p.bbox.h, p.confidence
        )?;
    }
    Ok(())
}

pub fn read_tracking_csv(path: &Path) -> Result<Vec<TrackPoint>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if i == 0 {
            if line != TRACK_HEADER {
                return Err(Error::Parse {
                    path: path.into(),
                    line: 1,
                    msg: format!("expected header {TRACK_HEADER:?}"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_err(format!("expected 6 fields, found {}", fields.len())));
        }
        let frame_index = fields[0].parse::<usize>().map_err(|e| parse_err(e.to_string()))?;
        let v = fields[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| parse_err(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        out.push(TrackPoint {
            frame_index,
            bbox: BoundingBox::new(v[0], v[1], v[2], v[3])?,
            confidence: v[4],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Geometry;
    use crate::data_io::{generate_synthetic, SynthConfig};
    use crate::model::ModelConfig;

    const GEOM: Geometry = Geometry {
        stride: 8.0,
        offset: 0.5,
    };

    fn fm(v: f64) -> FeatureMap {
        FeatureMap::new(Tensor::full(&[2, 3, 3], v), GEOM).unwrap()
    }

    #[test]
    fn fusion_endpoints_and_midpoint() {
        let mut rng = substream(1, "t", 0);
        let eta = FeatureMap::new(Tensor::randn(&[2, 3, 3], 1.0, &mut rng), GEOM).unwrap();
        let beta = FeatureMap::new(Tensor::randn(&[2, 3, 3], 1.0, &mut rng), GEOM).unwrap();
        assert_eq!(fuse_features(&eta, &beta, 0.0).unwrap(), beta);
        assert_eq!(fuse_features(&eta, &beta, 1.0).unwrap(), eta);
        let mid = fuse_features(&fm(1.0), &fm(0.5), 0.2).unwrap();
        assert!(mid.values.data().iter().all(|v| (v - 0.6).abs() < 1e-15));
        let other = FeatureMap::new(Tensor::zeros(&[2, 3, 4]), GEOM).unwrap();
        assert!(fuse_features(&eta, &other, 0.5).is_err());
        assert!(fuse_features(&eta, &beta, 1.5).is_err());
    }

    fn small_model() -> Model {
        Model::new(&ModelConfig::default(), 4).unwrap()
    }

    fn seq(len: usize) -> Sequence {
        generate_synthetic(
            &SynthConfig {
                length: len,
                ..SynthConfig::default()
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn init_builds_fifteen_samples() {
        let model = small_model();
        let s = seq(2);
        let st = init(&model, &s.frames[0], &s.boxes[0], &TrackerConfig::default()).unwrap();
        assert_eq!(st.memory.len(), INIT_SAMPLES);
        let first = st.memory.samples().next().unwrap();
        let c = model.geometry().patch_to_cell(model.config.crop.patch_size as f64 / 2.0);
        assert!((first.label.center.0 - c).abs() < 1e-9 && (first.label.center.1 - c).abs() < 1e-9);
        let again = init(&model, &s.frames[0], &s.boxes[0], &TrackerConfig::default()).unwrap();
        assert_eq!(st.filter, again.filter);
    }

    #[test]
    fn degenerate_init_box_is_rejected() {
        let model = small_model();
        let s = seq(2);
        let bad = BoundingBox {
            x: 10.0,
            y: 10.0,
            w: 0.0,
            h: 5.0,
        };
        assert!(init(&model, &s.frames[0], &bad, &TrackerConfig::default()).is_err());
        let outside = BoundingBox::new(500.0, 500.0, 10.0, 10.0).unwrap();
        assert!(init(&model, &s.frames[0], &outside, &TrackerConfig::default()).is_err());
    }

    #[test]
    fn length_one_sequence_echoes_the_ground_truth() {
        let s = seq(1);
        let out = track_sequence(&small_model(), &s, &TrackerConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, s.boxes[0]);
    }

    #[test]
    fn zero_lambda_equals_the_observation_only_tracker() {
        let model = small_model();
        let s = seq(8);
        let fused = track_sequence(
            &model,
            &s,
            &TrackerConfig {
                lambda_fuse: 0.0,
                ..TrackerConfig::default()
            },
        )
        .unwrap();
        let baseline = track_sequence(
            &model,
            &s,
            &TrackerConfig {
                use_predictor: false,
                ..TrackerConfig::default()
            },
        )
        .unwrap();
        assert_eq!(fused, baseline);
        assert!(fused.iter().all(|p| p.bbox.w >= MIN_BOX_SIDE && p.bbox.h >= MIN_BOX_SIDE));
    }

    #[test]
    fn forecast_ignores_the_frame_it_forecasts() {
        let model = small_model();
        let s = seq(6);
        let mut changed = s.clone();
        let mut inv = s.frames[4].rgb8().to_vec();
        inv.iter_mut().for_each(|v| *v = 255 - *v);
        changed.frames[4] = Frame::from_rgb8(s.frames[4].width(), s.frames[4].height(), inv, 4).unwrap();
        let cfg = TrackerConfig::default();
        let run_to = |seq: &Sequence, last: usize| {
            let mut st = init(&model, &seq.frames[0], &seq.boxes[0], &cfg).unwrap();
            for f in &seq.frames[1..=last] {
                step(&model, &cfg, &mut st, f).unwrap();
            }
            st
        };
        // the forecast for frame 4 is fixed once frame 3 is processed
        let a = run_to(&s, 3);
        let b = run_to(&changed, 3);
        assert_eq!(a.eta_pending, b.eta_pending);
        // the next forecast does see frame 4
        let a = run_to(&s, 4);
        let b = run_to(&changed, 4);
        assert_ne!(a.eta_pending, b.eta_pending);
    }

    #[test]
    fn tracking_is_deterministic_and_csv_round_trips() {
        let model = small_model();
        let s = seq(5);
        let cfg = TrackerConfig::default();
        let a = track_sequence(&model, &s, &cfg).unwrap();
        let b = track_sequence(&model, &s, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_tracking_csv(&p, &a).unwrap();
        let back = read_tracking_csv(&p).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let s = Sequence::new("empty", vec![], vec![], None).unwrap();
        assert!(track_sequence(&small_model(), &s, &TrackerConfig::default()).is_err());
    }

    #[test]
    fn window_is_identity_at_zero_and_symmetric() {
        let mut rng = substream(2, "t", 0);
        let r = Tensor::randn(&[6, 8], 1.0, &mut rng);
        assert_eq!(apply_window(&r, 0.0), r);
        let ones = Tensor::full(&[6, 8], 1.0);
        let w = apply_window(&ones, 1.0);
        let d = w.data();
        for i in 0..6 {
            for j in 0..8 {
                assert!((d[i * 8 + j] - d[(5 - i) * 8 + (7 - j)]).abs() < 1e-12);
                assert!(d[i * 8 + j] > 0.0 && d[i * 8 + j] <= 1.0);
            }
        }
        assert!(d[3 * 8 + 4] > d[0]);
        let half = apply_window(&ones, 0.5);
        assert!(half.data().iter().zip(d).all(|(h, f)| (h - (0.5 + 0.5 * f)).abs() < 1e-12));
    }

    #[test]
    fn config_ranges_are_validated() {
        let ok = TrackerConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrackerConfig { lambda_fuse: 1.5, ..ok.clone() },
            TrackerConfig { window_influence: -0.1, ..ok.clone() },
            TrackerConfig { size_update_rate: 0.0, ..ok.clone() },
            TrackerConfig { size_update_rate: 1.5, ..ok.clone() },
            TrackerConfig { max_scale_step: 0.9, ..ok.clone() },
            TrackerConfig { refine_steps: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
