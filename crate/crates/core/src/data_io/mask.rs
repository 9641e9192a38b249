use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BoundingBox, SamplePatch};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Probability that a patch receives a mask at all.
    pub probability: f64,
    pub min_coverage: f64,
    pub max_coverage: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            probability: 0.3,
            min_coverage: 0.3,
            max_coverage: 0.7,
        }
    }
}

/// Binary occluder map in patch coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    pub width: usize,
    pub height: usize,
    /// Pixel rectangle `[x0, x1) × [y0, y1)`; `None` when nothing was masked.
    pub rect: Option<(usize, usize, usize, usize)>,
    /// Fraction of the target box area under the mask.
    pub covered_fraction: f64,
}

impl OcclusionMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rect: None,
            covered_fraction: 0.0,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        match self.rect {
            Some((x0, x1, y0, y1)) => col >= x0 && col < x1 && row >= y0 && row < y1,
            None => false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rect.is_none()
    }
}

fn snap(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let mut a = lo.round().clamp(0.0, (limit - 1) as f64) as usize;
    let mut b = hi.round().clamp(0.0, limit as f64) as usize;
    if b <= a {
        b = a + 1;
        if b > limit {
            b = limit;
            a = limit - 1;
        }
    }
    (a, b)
}

/// With probability `cfg.probability`, paint a rectangle covering a random
/// `[min_coverage, max_coverage]` share of the target with the patch mean.
pub fn apply_random_mask<R: Rng + ?Sized>(
    patch: &SamplePatch,
    cfg: &MaskConfig,
    rng: &mut R,
) -> (SamplePatch, OcclusionMask) {
    let s = patch.size;
    if rng.random::<f64>() >= cfg.probability {
        return (patch.clone(), OcclusionMask::empty(s, s));
    }
    let t = patch.target_box;
    let coverage = if cfg.max_coverage > cfg.min_coverage {
        rng.random_range(cfg.min_coverage..cfg.max_coverage)
    } else {
        cfg.min_coverage
    };
    let fw = if coverage < 1.0 {
        rng.random_range(coverage..1.0)
    } else {
        1.0
    };
    let fh = (coverage / fw).min(1.0);
    let (mw, mh) = (t.w * fw, t.h * fh);
    let mx = t.x + rng.random::<f64>() * (t.w - mw);
    let my = t.y + rng.random::<f64>() * (t.h - mh);
    let (x0, x1) = snap(mx, mx + mw, s);
    let (y0, y1) = snap(my, my + mh, s);

    let mean = patch.channel_mean();
    let mut out = patch.clone();
    let plane = s * s;
    let data = out.pixels.data_mut();
    for (c, m) in mean.iter().enumerate() {
        for r in y0..y1 {
            data[c * plane + r * s + x0..c * plane + r * s + x1].fill(*m);
        }
    }
    let rect_box = BoundingBox {
        x: x0 as f64,
        y: y0 as f64,
        w: (x1 - x0) as f64,
        h: (y1 - y0) as f64,
    };
    let covered = (rect_box.intersection_area(&t) / t.area()).clamp(0.0, 1.0);
    (
        out,
        OcclusionMask {
            width: s,
            height: s,
            rect: Some((x0, x1, y0, y1)),
            covered_fraction: covered,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::CropTransform;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch(seed: u64, tb: BoundingBox) -> SamplePatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SamplePatch {
            size: 64,
            pixels: Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng),
            target_box: tb,
            transform: CropTransform {
                scale: 1.0,
                offset_x: 0.0,
                offset_y: 0.0,
            },
        }
    }

    #[test]
    fn zero_probability_leaves_patch_untouched() {
        let p = patch(1, BoundingBox::new(20.0, 20.0, 24.0, 24.0).unwrap());
        let cfg = MaskConfig {
            probability: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (out, m) = apply_random_mask(&p, &cfg, &mut rng);
        assert_eq!(out, p);
        assert_eq!(m.covered_fraction, 0.0);
        assert!(m.is_empty());
    }

    #[test]
    fn certain_mask_covers_configured_share() {
        let cfg = MaskConfig {
            probability: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..100 {
            let p = patch(i, BoundingBox::new(10.0, 12.0, 30.0, 26.0).unwrap());
            let (_, m) = apply_random_mask(&p, &cfg, &mut rng);
            // pixel snapping moves each edge by at most half a pixel
            assert!(m.covered_fraction > 0.3 - 0.08 && m.covered_fraction < 0.7 + 0.08);
        }
    }

    #[test]
    fn tiny_target_still_gets_one_pixel() {
        let p = patch(3, BoundingBox::new(10.2, 10.2, 0.3, 0.3).unwrap());
        let cfg = MaskConfig {
            probability: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, m) = apply_random_mask(&p, &cfg, &mut rng);
        let (x0, x1, y0, y1) = m.rect.unwrap();
        assert!(x1 > x0 && y1 > y0);
        assert!((0.0..=1.0).contains(&m.covered_fraction));
    }

    proptest! {
        #[test]
        fn pixels_outside_mask_are_unchanged(seed in 0u64..1000, x in 0.0f64..40.0, y in 0.0f64..40.0,
                                             w in 2.0f64..24.0, h in 2.0f64..24.0) {
            let p = patch(seed, BoundingBox::new(x, y, w, h).unwrap());
            let cfg = MaskConfig { probability: 1.0, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, m) = apply_random_mask(&p, &cfg, &mut rng);
            for c in 0..3 {
                for r in 0..64 {
                    for col in 0..64 {
                        let i = c * 4096 + r * 64 + col;
                        if !m.contains(r, col) {
                            prop_assert_eq!(out.pixels.data()[i].to_bits(), p.pixels.data()[i].to_bits());
                        }
                    }
                }
            }
        }
    }
}
