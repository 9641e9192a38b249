//! Metrics over completed tracks: IoU, success and precision curves,
//! occlusion-segment statistics, ablation sweeps and report files.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{BoundingBox, Sequence};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tracker::{track_sequence, TrackPoint, TrackerConfig};

pub const N_THRESHOLDS: usize = 21;
pub const PRECISION_RADIUS: f64 = 20.0;
/// Ground-truth visibility below which a frame counts as occluded.
pub const OCCLUSION_VISIBILITY: f64 = 0.5;
/// Frames after an occlusion segment that form its recovery window.
pub const RECOVERY_FRAMES: usize = 5;
/// IoU under which a frame counts as lost.
pub const FAILURE_IOU: f64 = 0.1;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

pub fn center_error(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (a.cx() - b.cx()).hypot(a.cy() - b.cy())
}

/// `k / 20` for `k = 0..=20`.
pub fn success_thresholds() -> [f64; N_THRESHOLDS] {
    std::array::from_fn(|k| k as f64 / 20.0)
}

/// Fraction of frames with IoU ≥ each threshold, and the mean of that curve.
pub fn success_curve(ious: &[f64]) -> Result<(Vec<f64>, f64)> {
    if ious.is_empty() {
        return Err(Error::InvalidArgument("success curve of an empty IoU list".into()));
    }
    let n = ious.len() as f64;
    let curve: Vec<f64> = success_thresholds()
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v >= t).count() as f64 / n)
        .collect();
    let auc = curve.iter().sum::<f64>() / N_THRESHOLDS as f64;
    Ok((curve, auc))
}

/// Fraction of frames whose center error is at most `tau` pixels.
pub fn precision_at(center_errors: &[f64], tau: f64) -> Result<f64> {
    if center_errors.is_empty() {
        return Err(Error::InvalidArgument("precision of an empty error list".into()));
    }
    Ok(center_errors.iter().filter(|&&e| e <= tau).count() as f64 / center_errors.len() as f64)
}

/// Maximal runs `[start, end]` (inclusive) with visibility below 0.5.
pub fn occlusion_segments(visibility: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &v) in visibility.iter().enumerate() {
        match (v < OCCLUSION_VISIBILITY, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, visibility.len() - 1));
    }
    out
}

/// Entries of `ious` with IoU under 0.1 whose predecessor was at least 0.1;
/// the entry before the first counts as tracked.
pub fn count_failures(ious: &[f64]) -> usize {
    let mut prev_ok = true;
    let mut n = 0;
    for &v in ious {
        let ok = v >= FAILURE_IOU;
        if prev_ok && !ok {
            n += 1;
        }
        prev_ok = ok;
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub start: usize,
    pub end: usize,
    pub mean_iou: f64,
    /// Mean IoU over up to five frames after `end`; `None` at sequence end.
    pub recovery_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionReport {
    pub segments: Vec<SegmentStats>,
    pub failures: usize,
    /// Mean IoU over all occluded frames.
    pub occl_mean_iou: Option<f64>,
    /// Mean IoU over all recovery frames.
    pub recovery_iou: Option<f64>,
    /// Mean IoU over occluded and recovery frames together.
    pub occl_recovery_iou: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Segment statistics for a sequence with visibility annotations. The init
/// frame is left out of every average.
pub fn occlusion_report(seq: &Sequence, boxes: &[BoundingBox]) -> Result<OcclusionReport> {
    let vis = seq
        .visibility
        .as_ref()
        .ok_or_else(|| Error::Dataset(format!("sequence {} has no visibility annotation", seq.name)))?;
    if boxes.len() != seq.len() {
        return Err(Error::CountMismatch {
            frames: seq.len(),
            boxes: boxes.len(),
        });
    }
    let ious: Vec<f64> = boxes.iter().zip(&seq.boxes).map(|(a, b)| iou(a, b)).collect();
    let mut segments = Vec::new();
    let mut in_occ = vec![false; seq.len()];
    let mut in_rec = vec![false; seq.len()];
    for (s, e) in occlusion_segments(vis) {
        let inside: Vec<f64> = (s.max(1)..=e).map(|i| ious[i]).collect();
        let rec_end = (e + RECOVERY_FRAMES).min(seq.len() - 1);
        let rec: Vec<f64> = (e + 1..=rec_end).map(|i| ious[i]).collect();
        (s.max(1)..=e).for_each(|i| in_occ[i] = true);
        (e + 1..=rec_end).for_each(|i| in_rec[i] = true);
        segments.push(SegmentStats {
            start: s,
            end: e,
            mean_iou: mean(&inside).unwrap_or(f64::NAN),
            recovery_iou: mean(&rec),
        });
    }
    let pick = |f: &dyn Fn(usize) -> bool| -> Vec<f64> { (1..seq.len()).filter(|&i| f(i)).map(|i| ious[i]).collect() };
    Ok(OcclusionReport {
        segments,
        failures: count_failures(&ious[1.min(ious.len())..]),
        occl_mean_iou: mean(&pick(&|i| in_occ[i])),
        recovery_iou: mean(&pick(&|i| in_rec[i] && !in_occ[i])),
        occl_recovery_iou: mean(&pick(&|i| in_occ[i] || in_rec[i])),
    })
}

/// Metrics for one tracked sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub sequence: String,
    /// Per tracked frame (init frame excluded).
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    pub curve: Vec<f64>,
    pub auc: f64,
    pub precision20: f64,
    pub failures: usize,
    pub occlusion: Option<OcclusionReport>,
}

impl EvalResult {
    pub fn occl_recovery_iou(&self) -> Option<f64> {
        self.occlusion.as_ref().and_then(|o| o.occl_recovery_iou)
    }
}

/// Score a track against a sequence's ground truth.
pub fn evaluate_sequence(seq: &Sequence, track: &[BoundingBox]) -> Result<EvalResult> {
    if track.len() != seq.len() {
        return Err(Error::CountMismatch {
            frames: seq.len(),
            boxes: track.len(),
        });
    }
    if seq.len() < 2 {
        return Err(Error::Dataset(format!(
            "sequence {} has no frames after the init frame",
            seq.name
        )));
    }
    let ious: Vec<f64> = track[1..].iter().zip(&seq.boxes[1..]).map(|(a, b)| iou(a, b)).collect();
    let center_errors: Vec<f64> = track[1..].iter().zip(&seq.boxes[1..]).map(|(a, b)| center_error(a, b)).collect();
    let (curve, auc) = success_curve(&ious)?;
    let precision20 = precision_at(&center_errors, PRECISION_RADIUS)?;
    let occlusion = match seq.visibility {
        Some(_) => Some(occlusion_report(seq, track)?),
        None => None,
    };
    Ok(EvalResult {
        sequence: seq.name.clone(),
        failures: count_failures(&ious),
        ious,
        center_errors,
        curve,
        auc,
        precision20,
        occlusion,
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Track and score every sequence; results keep the input order.
pub fn evaluate_model(model: &Model, seqs: &[Sequence], cfg: &TrackerConfig, jobs: usize) -> Result<Vec<EvalResult>> {
    pool(jobs)?.install(|| {
        seqs.par_iter()
            .map(|s| {
                let track = track_sequence(model, s, cfg)?;
                let boxes: Vec<BoundingBox> = track.iter().map(|p: &TrackPoint| p.bbox).collect();
                evaluate_sequence(s, &boxes)
            })
            .collect()
    })
}

pub fn mean_auc(results: &[EvalResult]) -> f64 {
    results.iter().map(|r| r.auc).sum::<f64>() / results.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub mean_auc: f64,
}

/// Track every sequence at each λ with one model.
pub fn lambda_sweep(
    model: &Model,
    seqs: &[Sequence],
    lambdas: &[f64],
    base: &TrackerConfig,
    jobs: usize,
) -> Result<(Vec<LambdaRow>, Vec<Vec<EvalResult>>)> {
    if lambdas.is_empty() || seqs.is_empty() {
        return Err(Error::InvalidArgument("λ sweep needs at least one λ and one sequence".into()));
    }
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &lambda in lambdas {
        let cfg = TrackerConfig {
            lambda_fuse: lambda,
            ..base.clone()
        };
        let res = evaluate_model(model, seqs, &cfg, jobs)?;
        rows.push(LambdaRow {
            lambda,
            mean_auc: mean_auc(&res),
        });
        all.push(res);
    }
    Ok((rows, all))
}

/// One checkpoint's line in the loss ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub adversarial: bool,
    pub reconstruction: bool,
    pub mean_auc: f64,
    pub mean_precision20: f64,
    pub mean_occl_recovery_iou: f64,
    /// Generator-loss variance over the final training window.
    pub generator_loss_variance: Option<f64>,
}

/// Score each named checkpoint on the same sequences.
pub fn run_ablation(
    models: &[(String, bool, bool, &Model, Option<f64>)],
    seqs: &[Sequence],
    cfg: &TrackerConfig,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if models.is_empty() || seqs.is_empty() {
        return Err(Error::InvalidArgument("ablation needs checkpoints and sequences".into()));
    }
    models
        .iter()
        .map(|(name, adv, rec, model, var)| {
            let res = evaluate_model(model, seqs, cfg, jobs)?;
            let occ: Vec<f64> = res.iter().filter_map(EvalResult::occl_recovery_iou).collect();
            Ok(AblationRow {
                name: name.clone(),
                adversarial: *adv,
                reconstruction: *rec,
                mean_auc: mean_auc(&res),
                mean_precision20: res.iter().map(|r| r.precision20).sum::<f64>() / res.len() as f64,
                mean_occl_recovery_iou: mean(&occ).unwrap_or(f64::NAN),
                generator_loss_variance: *var,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const SUMMARY_HEADER: &str = "sequence,auc,precision20,failures,occl_mean_iou,recovery_iou";
pub const LAMBDA_HEADER: &str = "lambda,mean_auc";
pub const ABLATION_HEADER: &str = "name,adversarial,reconstruction,mean_auc,mean_precision20,mean_occl_recovery_iou,generator_loss_variance";

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Write `summary.csv`, one CSV per sequence under `sequences/`, and the
/// success and precision plots. Rows are ordered by sequence name.
pub fn emit_report(results: &[EvalResult], out_dir: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no results to report".into()));
    }
    let mut sorted: Vec<&EvalResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.sequence.cmp(&b.sequence));
    let results = sorted;
    fs::create_dir_all(out_dir.join("sequences"))?;
    let mut summary = fs::File::create(out_dir.join("summary.csv"))?;
    writeln!(summary, "{SUMMARY_HEADER}")?;
    for r in &results {
        let (occ, rec) = r
            .occlusion
            .as_ref()
            .map_or((None, None), |o| (o.occl_mean_iou, o.recovery_iou));
        writeln!(
            summary,
            "{},{},{},{},{},{}",
            r.sequence,
            r.auc,
            r.precision20,
            r.failures,
            opt(occ),
            opt(rec)
        )?;
        let mut f = fs::File::create(out_dir.join("sequences").join(format!("{}.csv", sanitize(&r.sequence))))?;
        writeln!(f, "frame_index,iou,center_error")?;
        for (i, (iou, err)) in r.ious.iter().zip(&r.center_errors).enumerate() {
            writeln!(f, "{},{},{}", i + 1, iou, err)?;
        }
    }
    let th = success_thresholds();
    let mean_curve: Vec<(f64, f64)> = (0..N_THRESHOLDS)
        .map(|k| (th[k], results.iter().map(|r| r.curve[k]).sum::<f64>() / results.len() as f64))
        .collect();
    plot_lines(&out_dir.join("success.png"), &[(mean_curve, [200, 40, 40])], (0.0, 1.0), (0.0, 1.0))?;
    let prec: Vec<(f64, f64)> = (0..=50)
        .map(|t| {
            let t = t as f64;
            let p = results
                .iter()
                .map(|r| precision_at(&r.center_errors, t).unwrap_or(0.0))
                .sum::<f64>()
                / results.len() as f64;
            (t, p)
        })
        .collect();
    plot_lines(&out_dir.join("precision.png"), &[(prec, [40, 40, 200])], (0.0, 50.0), (0.0, 1.0))?;
    Ok(())
}

/// `lambda_sweep.csv` and its plot.
pub fn emit_lambda_sweep(rows: &[LambdaRow], out_dir: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty λ sweep".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut f = fs::File::create(out_dir.join("lambda_sweep.csv"))?;
    writeln!(f, "{LAMBDA_HEADER}")?;
    for r in rows {
        writeln!(f, "{},{}", r.lambda, r.mean_auc)?;
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.lambda, r.mean_auc)).collect();
    plot_lines(&out_dir.join("lambda_sweep.png"), &[(pts, [30, 140, 60])], (0.0, 1.0), (0.0, 1.0))
}

/// `loss_ablation.csv`, one row per checkpoint.
pub fn emit_ablation(rows: &[AblationRow], out_dir: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty ablation table".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut f = fs::File::create(out_dir.join("loss_ablation.csv"))?;
    writeln!(f, "{ABLATION_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.name,
            r.adversarial,
            r.reconstruction,
            r.mean_auc,
            r.mean_precision20,
            r.mean_occl_recovery_iou,
            opt(r.generator_loss_variance)
        )?;
    }
    Ok(())
}

const PLOT_W: u32 = 400;
const PLOT_H: u32 = 300;
const MARGIN: u32 = 30;

fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round();
        let y = (a.1 + t * (b.1 - a.1)).round();
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x as i64 + dx, y as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < PLOT_W && (py as u32) < PLOT_H {
                img.put_pixel(px as u32, py as u32, Rgb(color));
            }
        }
    }
}

/// Polyline points with an RGB color.
pub type Series = (Vec<(f64, f64)>, [u8; 3]);

/// Axes plus one polyline per series, scaled to the given ranges.
pub fn plot_lines(path: &Path, series: &[Series], xr: (f64, f64), yr: (f64, f64)) -> Result<()> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let (x0, y0) = (MARGIN as f64, (PLOT_H - MARGIN) as f64);
    let (x1, y1) = ((PLOT_W - 10) as f64, 10.0);
    let map = |(x, y): (f64, f64)| {
        let fx = (x - xr.0) / (xr.1 - xr.0);
        let fy = ((y - yr.0) / (yr.1 - yr.0)).clamp(0.0, 1.0);
        (x0 + fx * (x1 - x0), y0 + fy * (y1 - y0))
    };
    let grey = [200, 200, 200];
    for k in 1..=4 {
        let f = k as f64 / 4.0;
        draw_segment(&mut img, map((xr.0, yr.0 + f * (yr.1 - yr.0))), map((xr.1, yr.0 + f * (yr.1 - yr.0))), grey);
    }
    draw_segment(&mut img, (x0, y0), (x1, y0), [0, 0, 0]);
    draw_segment(&mut img, (x0, y0), (x0, y1), [0, 0, 0]);
    for (pts, color) in series {
        for w in pts.windows(2) {
            draw_segment(&mut img, map(w[0]), map(w[1]), *color);
        }
        if pts.len() == 1 {
            draw_segment(&mut img, map(pts[0]), map(pts[0]), *color);
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::Frame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        let b = bx(3.0, 4.0, 5.0, 6.0);
        assert_eq!(iou(&b, &b), 1.0);
        assert!((iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn success_curve_edges() {
        let (_, auc) = success_curve(&[1.0; 7]).unwrap();
        assert_eq!(auc, 1.0);
        let (curve, auc) = success_curve(&[0.0; 7]).unwrap();
        assert_eq!(curve[0], 1.0);
        assert!(curve[1..].iter().all(|&v| v == 0.0));
        assert_eq!(auc, 1.0 / 21.0);
        assert!(success_curve(&[]).is_err());
    }

    #[test]
    fn success_curve_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ious: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let (curve, auc) = success_curve(&ious).unwrap();
        assert!(curve.windows(2).all(|w| w[1] <= w[0]));
        assert!((0.0..=1.0).contains(&auc));
    }

    #[test]
    fn precision_boundary_counts() {
        assert_eq!(precision_at(&[0.0; 4], 20.0).unwrap(), 1.0);
        assert_eq!(precision_at(&[100.0; 4], 20.0).unwrap(), 0.0);
        assert_eq!(precision_at(&[20.0, 20.000001], 20.0).unwrap(), 0.5);
    }

    #[test]
    fn failures_count_transitions() {
        assert_eq!(count_failures(&[0.5, 0.05, 0.02, 0.6, 0.0, 0.3]), 2);
        assert_eq!(count_failures(&[0.0, 0.5]), 1);
        assert_eq!(count_failures(&[]), 0);
    }

    fn seq_with_visibility(vis: Vec<f64>) -> Sequence {
        let n = vis.len();
        let frames = (0..n).map(|i| Frame::from_rgb8(32, 32, vec![0; 32 * 32 * 3], i).unwrap()).collect();
        let boxes = (0..n).map(|i| bx(i as f64 * 0.1, 2.0, 8.0, 8.0)).collect();
        Sequence::new("s", frames, boxes, Some(vis)).unwrap()
    }

    #[test]
    fn occlusion_segments_follow_visibility() {
        let s = seq_with_visibility(vec![1.0; 12]);
        let r = occlusion_report(&s, &s.boxes).unwrap();
        assert!(r.segments.is_empty());
        assert_eq!(r.occl_mean_iou, None);

        let mut vis = vec![1.0; 60];
        for v in &mut vis[40..=50] {
            *v = 0.0;
        }
        vis[45] = 0.4;
        let s = seq_with_visibility(vis);
        let r = occlusion_report(&s, &s.boxes).unwrap();
        assert_eq!(r.segments.len(), 1);
        assert_eq!((r.segments[0].start, r.segments[0].end), (40, 50));
        assert_eq!(r.segments[0].recovery_iou, Some(1.0));
        assert_eq!(r.occl_recovery_iou, Some(1.0));
        assert_eq!(r.failures, 0);
    }

    #[test]
    fn segment_at_the_end_has_no_recovery() {
        let mut vis = vec![1.0; 10];
        vis[8] = 0.2;
        vis[9] = 0.0;
        assert_eq!(occlusion_segments(&vis), vec![(8, 9)]);
        let s = seq_with_visibility(vis);
        let r = occlusion_report(&s, &s.boxes).unwrap();
        assert_eq!(r.segments[0].recovery_iou, None);
    }

    #[test]
    fn evaluate_perfect_track() {
        let s = seq_with_visibility(vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let r = evaluate_sequence(&s, &s.boxes).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.precision20, 1.0);
        assert_eq!(r.ious.len(), 5);
        assert!(evaluate_sequence(&s, &s.boxes[..3]).is_err());
    }

    fn result(name: &str, auc: f64) -> EvalResult {
        EvalResult {
            sequence: name.into(),
            ious: vec![auc; 3],
            center_errors: vec![1.0, 30.0, 5.0],
            curve: success_curve(&[auc; 3]).unwrap().0,
            auc,
            precision20: 2.0 / 3.0,
            failures: 0,
            occlusion: None,
        }
    }

    #[test]
    fn report_files_are_deterministic() {
        let rs = vec![result("b", 0.7), result("a", 0.5), result("c/d", 0.2)];
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        emit_report(&rs, d1.path()).unwrap();
        emit_report(&rs, d2.path()).unwrap();
        let per: Vec<_> = fs::read_dir(d1.path().join("sequences")).unwrap().collect();
        assert_eq!(per.len(), 3);
        for f in ["summary.csv", "sequences/a.csv", "sequences/c_d.csv", "success.png", "precision.png"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let summary = fs::read_to_string(d1.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().next().unwrap(), SUMMARY_HEADER);
        assert_eq!(summary.lines().count(), 4);
        assert!(summary.lines().nth(1).unwrap().starts_with("a,"));
        assert!(emit_report(&[], d1.path()).is_err());
    }

    #[test]
    fn single_lambda_gives_single_row() {
        let d = tempfile::tempdir().unwrap();
        emit_lambda_sweep(&[LambdaRow { lambda: 0.2, mean_auc: 0.5 }], d.path()).unwrap();
        let text = fs::read_to_string(d.path().join("lambda_sweep.csv")).unwrap();
        assert_eq!(text, "lambda,mean_auc\n0.2,0.5\n");
    }
}
