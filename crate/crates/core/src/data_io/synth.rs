use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BoundingBox, Frame, Sequence};
use crate::error::{Error, Result};
use crate::rng::substream;

/// A static occluder that hides the target while it moves through frames
/// `start..=end`, covering at most `max_coverage` of it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccluderScript {
    pub start: usize,
    pub end: usize,
    pub max_coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub length: usize,
    pub width: usize,
    pub height: usize,
    pub target_min: f64,
    pub target_max: f64,
    /// Constant-velocity speed range, pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Sinusoidal perturbation on top of constant velocity.
    pub wobble_amplitude: f64,
    pub wobble_period: f64,
    /// Per-frame Gaussian pixel noise.
    pub noise: f64,
    pub texture_seed: u64,
    pub occluders: Vec<OccluderScript>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            length: 24,
            width: 160,
            height: 160,
            target_min: 16.0,
            target_max: 28.0,
            speed_min: 0.5,
            speed_max: 2.0,
            wobble_amplitude: 3.0,
            wobble_period: 30.0,
            noise: 0.02,
            texture_seed: 0,
            occluders: Vec::new(),
        }
    }
}

/// Collection-level settings: how many sequences and how occluders are
/// scripted into each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_sequences: usize,
    pub sequence: SynthConfig,
    pub occlusions_per_sequence: usize,
    pub occlusion_length: usize,
    pub occlusion_coverage: f64,
    pub name_prefix: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_sequences: 200,
            sequence: SynthConfig::default(),
            occlusions_per_sequence: 0,
            occlusion_length: 8,
            occlusion_coverage: 1.0,
            name_prefix: "synth".into(),
        }
    }
}

/// Fraction of `target` hidden by the union of `occluders` (exact, by
/// coordinate compression).
pub fn occluded_fraction(target: &BoundingBox, occluders: &[BoundingBox]) -> f64 {
    let contains = |o: &BoundingBox| {
        o.x <= target.x && o.y <= target.y && o.right() >= target.right() && o.bottom() >= target.bottom()
    };
    if occluders.iter().any(contains) {
        return 1.0;
    }
    let clipped: Vec<(f64, f64, f64, f64)> = occluders
        .iter()
        .filter_map(|o| {
            let x0 = o.x.max(target.x);
            let x1 = o.right().min(target.right());
            let y0 = o.y.max(target.y);
            let y1 = o.bottom().min(target.bottom());
            (x1 > x0 && y1 > y0).then_some((x0, x1, y0, y1))
        })
        .collect();
    if clipped.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = clipped.iter().flat_map(|r| [r.0, r.1]).collect();
    let mut ys: Vec<f64> = clipped.iter().flat_map(|r| [r.2, r.3]).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let mut area = 0.0;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let (mx, my) = ((xw[0] + xw[1]) / 2.0, (yw[0] + yw[1]) / 2.0);
            if clipped
                .iter()
                .any(|r| mx > r.0 && mx < r.1 && my > r.2 && my < r.3)
            {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    (area / target.area()).clamp(0.0, 1.0)
}

fn pixel_coverage(b: &BoundingBox, row: usize, col: usize) -> f64 {
    let (c, r) = (col as f64, row as f64);
    let ox = (b.right().min(c + 1.0) - b.x.max(c)).max(0.0);
    let oy = (b.bottom().min(r + 1.0) - b.y.max(r)).max(0.0);
    ox * oy
}

enum Pattern {
    Checker { cell: f64 },
    Stripes { period: f64, cos: f64, sin: f64 },
}

struct Texture {
    a: [f64; 3],
    b: [f64; 3],
    pattern: Pattern,
}

impl Texture {
    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let mut b: [f64; 3];
        loop {
            b = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            if dist > 0.8 {
                break;
            }
        }
        let pattern = if rng.random_bool(0.5) {
            Pattern::Checker {
                cell: rng.random_range(3.0..7.0),
            }
        } else {
            let ang = rng.random_range(0.0..PI);
            Pattern::Stripes {
                period: rng.random_range(3.0..7.0),
                cos: ang.cos(),
                sin: ang.sin(),
            }
        };
        Self { a, b, pattern }
    }

    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let odd = match self.pattern {
            Pattern::Checker { cell } => ((u / cell).floor() + (v / cell).floor()) as i64 % 2 != 0,
            Pattern::Stripes { period, cos, sin } => ((u * cos + v * sin) / period).floor() as i64 % 2 != 0,
        };
        if odd {
            self.b
        } else {
            self.a
        }
    }
}

fn background<R: Rng + ?Sized>(w: usize, h: usize, rng: &mut R) -> Vec<f64> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let gratings: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.02..0.1) * 2.0 * PI;
            let ang = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let weights = std::array::from_fn(|_| rng.random_range(-0.12..0.12));
            (freq * ang.cos(), freq * ang.sin(), phase, weights)
        })
        .collect();
    let mut out = vec![0.0; w * h * 3];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut v = base[ch] + rng.random_range(-0.06..0.06);
                for (fx, fy, ph, wt) in &gratings {
                    v += wt[ch] * (fx * c as f64 + fy * r as f64 + ph).sin();
                }
                out[(r * w + c) * 3 + ch] = v;
            }
        }
    }
    out
}

fn trajectory<R: Rng + ?Sized>(cfg: &SynthConfig, tw: f64, th: f64, rng: &mut R) -> Vec<BoundingBox> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let speed = if cfg.speed_max > cfg.speed_min {
        rng.random_range(cfg.speed_min..cfg.speed_max)
    } else {
        cfg.speed_min
    };
    let dir = rng.random_range(0.0..2.0 * PI);
    let (vx, vy) = (speed * dir.cos(), speed * dir.sin());
    let amp = cfg.wobble_amplitude * rng.random_range(0.5..1.0);
    let period = (cfg.wobble_period * rng.random_range(0.75..1.25)).max(1.0);
    let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let mid_x = w / 2.0 + rng.random_range(-0.15..0.15) * w;
    let mid_y = h / 2.0 + rng.random_range(-0.15..0.15) * h;
    let half = (cfg.length.saturating_sub(1)) as f64 / 2.0;
    (0..cfg.length)
        .map(|t| {
            let tt = t as f64;
            let phase = 2.0 * PI * tt / period;
            let cx = mid_x + vx * (tt - half) + amp * (phase + px).sin();
            let cy = mid_y + vy * (tt - half) + amp * (phase + py).sin();
            BoundingBox::from_center(cx, cy, tw, th)
        })
        .collect()
}

fn occluder_rect(boxes: &[BoundingBox], script: &OccluderScript) -> BoundingBox {
    let seg = &boxes[script.start..=script.end];
    let x0 = seg.iter().map(|b| b.x).fold(f64::INFINITY, f64::min).floor() - 1.0;
    let x1 = seg.iter().map(|b| b.right()).fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
    let y0 = seg.iter().map(|b| b.y).fold(f64::INFINITY, f64::min).floor() - 1.0;
    let y1 = if script.max_coverage >= 1.0 {
        seg.iter().map(|b| b.bottom()).fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0
    } else {
        let top = seg.iter().map(|b| b.y).fold(f64::INFINITY, f64::min);
        top + script.max_coverage * seg[0].h
    };
    BoundingBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: (y1 - y0).max(1.0),
    }
}

/// Render a textured target moving over a noisy background, with scripted
/// static occluders. Pure function of `(cfg, seed)`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Sequence> {
    if cfg.length == 0 {
        return Err(Error::InvalidArgument("synthetic sequence length must be positive".into()));
    }
    if cfg.target_min <= 0.0 || cfg.target_max < cfg.target_min {
        return Err(Error::InvalidArgument("target size range must be positive and ordered".into()));
    }
    for o in &cfg.occluders {
        if o.start > o.end || o.end >= cfg.length {
            return Err(Error::InvalidArgument(format!(
                "occluder interval [{}, {}] outside sequence of length {}",
                o.start, o.end, cfg.length
            )));
        }
    }
    let mut size_rng = substream(seed, "synth.size", 0);
    let tw = size_rng.random_range(cfg.target_min..=cfg.target_max);
    let th = size_rng.random_range(cfg.target_min..=cfg.target_max);

    let mut boxes = None;
    for attempt in 0..100 {
        let mut rng = substream(seed, "synth.motion", attempt);
        let candidate = trajectory(cfg, tw, th, &mut rng);
        let outside = candidate
            .iter()
            .filter(|b| b.cx() < 0.0 || b.cy() < 0.0 || b.cx() >= cfg.width as f64 || b.cy() >= cfg.height as f64)
            .count();
        if outside as f64 <= 0.2 * cfg.length as f64 {
            boxes = Some(candidate);
            break;
        }
    }
    let boxes = boxes.ok_or_else(|| {
        Error::Sampling("target leaves the image in more than 20% of frames for every sampled motion".into())
    })?;

    let mut tex_rng = substream(seed ^ cfg.texture_seed.rotate_left(17), "synth.texture", cfg.texture_seed);
    let texture = Texture::random(&mut tex_rng);
    let mut bg_rng = substream(seed, "synth.background", 0);
    let bg = background(cfg.width, cfg.height, &mut bg_rng);
    let occluders: Vec<(BoundingBox, [f64; 3])> = cfg
        .occluders
        .iter()
        .map(|o| {
            let color = std::array::from_fn(|_| bg_rng.random_range(0.1..0.9));
            (occluder_rect(&boxes, o), color)
        })
        .collect();
    let occluder_boxes: Vec<BoundingBox> = occluders.iter().map(|(b, _)| *b).collect();

    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (w, h) = (cfg.width, cfg.height);
    let mut frames = Vec::with_capacity(cfg.length);
    let mut visibility = Vec::with_capacity(cfg.length);
    for (t, b) in boxes.iter().enumerate() {
        let mut img = bg.clone();
        let r0 = b.y.floor().max(0.0) as usize;
        let r1 = (b.bottom().ceil().max(0.0) as usize).min(h);
        let c0 = b.x.floor().max(0.0) as usize;
        let c1 = (b.right().ceil().max(0.0) as usize).min(w);
        for r in r0..r1 {
            for c in c0..c1 {
                let cov = pixel_coverage(b, r, c);
                if cov <= 0.0 {
                    continue;
                }
                let u = (c as f64 + 0.5 - b.x).clamp(0.0, b.w);
                let v = (r as f64 + 0.5 - b.y).clamp(0.0, b.h);
                let col = texture.color(u, v);
                for ch in 0..3 {
                    let p = &mut img[(r * w + c) * 3 + ch];
                    *p = cov * col[ch] + (1.0 - cov) * *p;
                }
            }
        }
        for (o, color) in &occluders {
            for r in 0..h {
                for c in 0..w {
                    let cov = pixel_coverage(o, r, c);
                    if cov > 0.0 {
                        for ch in 0..3 {
                            let p = &mut img[(r * w + c) * 3 + ch];
                            *p = cov * color[ch] + (1.0 - cov) * *p;
                        }
                    }
                }
            }
        }
        if cfg.noise > 0.0 {
            let mut nrng = substream(seed, "synth.noise", t as u64);
            for p in img.iter_mut() {
                *p += noise.sample(&mut nrng);
            }
        }
        frames.push(Frame::from_f64(w, h, &img, t)?);
        visibility.push(1.0 - occluded_fraction(b, &occluder_boxes));
    }
    Sequence::new(format!("synth_{seed}"), frames, boxes, Some(visibility))
}

/// Generate `cfg.num_sequences` sequences with evenly spread occlusion
/// segments.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<Sequence>> {
    let len = cfg.sequence.length;
    let n_occ = cfg.occlusions_per_sequence;
    if n_occ > 0 && cfg.occlusion_length * n_occ * 2 > len {
        return Err(Error::InvalidArgument(format!(
            "{n_occ} occlusions of length {} do not fit a sequence of length {len}",
            cfg.occlusion_length
        )));
    }
    (0..cfg.num_sequences)
        .map(|i| {
            let mut rng = substream(seed, "dataset", i as u64);
            let seq_seed: u64 = rng.random();
            let mut sc = cfg.sequence.clone();
            sc.texture_seed = rng.random();
            sc.occluders = (0..n_occ)
                .map(|k| {
                    // one occlusion per slot, kept away from the first frames
                    let slot = len / n_occ;
                    let lo = k * slot + slot / 4;
                    let hi = ((k + 1) * slot).saturating_sub(cfg.occlusion_length + slot / 8).max(lo + 1);
                    let start = rng.random_range(lo..hi);
                    OccluderScript {
                        start,
                        end: (start + cfg.occlusion_length - 1).min(len - 1),
                        max_coverage: cfg.occlusion_coverage,
                    }
                })
                .collect();
            let mut seq = generate_synthetic(&sc, seq_seed)?;
            seq.name = format!("{}{:04}", cfg.name_prefix, i);
            Ok(seq)
        })
        .collect()
}
