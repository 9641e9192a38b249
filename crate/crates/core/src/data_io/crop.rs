use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BoundingBox, Frame};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    /// Side of the square patch in pixels.
    pub patch_size: usize,
    /// Search-region side relative to `sqrt(w·h)` of the reference box.
    pub context_factor: f64,
}

impl Default for CropParams {
    fn default() -> Self {
        Self {
            patch_size: 128,
            context_factor: 5.0,
        }
    }
}

/// Random perturbation of the crop reference box, as fractions of its size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    /// Log-scale half range: the crop side is multiplied by `exp(U(-s, s))`.
    pub scale_range: f64,
    /// Center displacement half range, relative to box width/height.
    pub shift_range: f64,
}

impl JitterConfig {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Maps patch coordinates to frame coordinates: `frame = offset + scale·patch`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl CropTransform {
    pub fn to_frame(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x: self.offset_x + b.x * self.scale,
            y: self.offset_y + b.y * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    pub fn to_patch(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x: (b.x - self.offset_x) / self.scale,
            y: (b.y - self.offset_y) / self.scale,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }
}

/// A square crop resampled to `size×size`, channel-major (`3×S×S`).
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePatch {
    pub size: usize,
    pub pixels: Tensor,
    pub target_box: BoundingBox,
    pub transform: CropTransform,
}

impl SamplePatch {
    pub fn channel_mean(&self) -> [f64; 3] {
        let plane = self.size * self.size;
        let d = self.pixels.data();
        let mut m = [0.0; 3];
        for (c, mc) in m.iter_mut().enumerate() {
            *mc = d[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        m
    }
}

/// Bilinear sample at continuous frame coordinates; pixels outside the frame
/// read as the per-channel frame mean.
fn sample(frame: &Frame, fx: f64, fy: f64, out: &mut [f64; 3]) {
    let mean = frame.channel_mean();
    let qx = fx - 0.5;
    let qy = fy - 0.5;
    let x0 = qx.floor();
    let y0 = qy.floor();
    let tx = qx - x0;
    let ty = qy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    *out = [0.0; 3];
    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            let wgt = wy * wx;
            if wgt == 0.0 {
                continue;
            }
            let (xx, yy) = (x0 + dx, y0 + dy);
            let inside = xx >= 0 && yy >= 0 && xx < w && yy < h;
            for (c, o) in out.iter_mut().enumerate() {
                let v = if inside {
                    frame.get(yy as usize, xx as usize, c)
                } else {
                    mean[c]
                };
                *o += wgt * v;
            }
        }
    }
}

/// Resample the square of side `side` centered at `(cx, cy)` to `size×size`.
pub fn crop_square(frame: &Frame, cx: f64, cy: f64, side: f64, size: usize) -> (Tensor, CropTransform) {
    let transform = CropTransform {
        scale: side / size as f64,
        offset_x: cx - side / 2.0,
        offset_y: cy - side / 2.0,
    };
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    let mut px = [0.0; 3];
    for r in 0..size {
        let fy = transform.offset_y + (r as f64 + 0.5) * transform.scale;
        for c in 0..size {
            let fx = transform.offset_x + (c as f64 + 0.5) * transform.scale;
            sample(frame, fx, fy, &mut px);
            for ch in 0..3 {
                data[ch * plane + r * size + c] = px[ch];
            }
        }
    }
    (Tensor::from_vec(&[3, size, size], data), transform)
}

/// Like [`crop_square`] but with the sampling grid rotated by `angle`
/// radians about the crop center.
pub fn crop_rotated(frame: &Frame, cx: f64, cy: f64, side: f64, angle: f64, size: usize) -> (Tensor, CropTransform) {
    let transform = CropTransform {
        scale: side / size as f64,
        offset_x: cx - side / 2.0,
        offset_y: cy - side / 2.0,
    };
    let (sin, cos) = angle.sin_cos();
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    let mut px = [0.0; 3];
    let half = size as f64 / 2.0;
    for r in 0..size {
        let v = (r as f64 + 0.5 - half) * transform.scale;
        for c in 0..size {
            let u = (c as f64 + 0.5 - half) * transform.scale;
            sample(frame, cx + cos * u - sin * v, cy + sin * u + cos * v, &mut px);
            for ch in 0..3 {
                data[ch * plane + r * size + c] = px[ch];
            }
        }
    }
    (Tensor::from_vec(&[3, size, size], data), transform)
}

/// Crop a search region around `ref_box` (optionally jittered) and express
/// `target` in patch coordinates.
pub fn crop_search_region<R: Rng + ?Sized>(
    frame: &Frame,
    ref_box: &BoundingBox,
    target: &BoundingBox,
    jitter: &JitterConfig,
    params: &CropParams,
    rng: &mut R,
) -> Result<SamplePatch> {
    ref_box.validate()?;
    target.validate()?;
    let scale = if jitter.scale_range > 0.0 {
        rng.random_range(-jitter.scale_range..jitter.scale_range).exp()
    } else {
        1.0
    };
    let (dx, dy) = if jitter.shift_range > 0.0 {
        (
            rng.random_range(-jitter.shift_range..jitter.shift_range) * ref_box.w,
            rng.random_range(-jitter.shift_range..jitter.shift_range) * ref_box.h,
        )
    } else {
        (0.0, 0.0)
    };
    let side = params.context_factor * ref_box.area().sqrt() * scale;
    let (pixels, transform) = crop_square(
        frame,
        ref_box.cx() + dx,
        ref_box.cy() + dy,
        side,
        params.patch_size,
    );
    Ok(SamplePatch {
        size: params.patch_size,
        pixels,
        target_box: transform.to_patch(target),
        transform,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_frame(w: usize, h: usize) -> Frame {
        let mut v = Vec::with_capacity(w * h * 3);
        for r in 0..h {
            for c in 0..w {
                v.push(c as f64 / w as f64);
                v.push(r as f64 / h as f64);
                v.push(((r * 7 + c * 3) % 11) as f64 / 10.0);
            }
        }
        Frame::from_f64(w, h, &v, 0).unwrap()
    }

    #[test]
    fn zero_jitter_centers_the_target() {
        let f = gradient_frame(200, 200);
        let b = BoundingBox::new(90.0, 80.0, 20.0, 30.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = crop_search_region(&f, &b, &b, &JitterConfig::none(), &CropParams::default(), &mut rng)
            .unwrap();
        assert!((p.target_box.cx() - 64.0).abs() < 1e-9);
        assert!((p.target_box.cy() - 64.0).abs() < 1e-9);
        assert_eq!(p.pixels.shape(), &[3, 128, 128]);
    }

    #[test]
    fn transform_round_trips_the_ground_truth() {
        let f = gradient_frame(120, 90);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let jitter = JitterConfig {
            scale_range: 0.3,
            shift_range: 0.2,
        };
        for i in 0..50 {
            let prev = BoundingBox::new(10.0 + i as f64, 20.0, 15.0, 12.0).unwrap();
            let gt = BoundingBox::new(12.5 + i as f64, 21.0, 15.5, 11.0).unwrap();
            let p = crop_search_region(&f, &prev, &gt, &jitter, &CropParams::default(), &mut rng)
                .unwrap();
            let back = p.transform.to_frame(&p.target_box);
            for (a, b) in back.to_array().iter().zip(gt.to_array()) {
                assert!((a - b).abs() < 0.5);
            }
        }
    }

    #[test]
    fn degenerate_reference_box_is_rejected() {
        let f = gradient_frame(64, 64);
        let bad = BoundingBox {
            x: 1.0,
            y: 1.0,
            w: 0.0,
            h: 4.0,
        };
        let ok = BoundingBox::new(1.0, 1.0, 4.0, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(crop_search_region(&f, &bad, &ok, &JitterConfig::none(), &CropParams::default(), &mut rng)
            .is_err());
    }

    /// Reference crop over an explicitly mean-padded copy of the frame.
    #[test]
    fn corner_crop_matches_padded_reference() {
        let f = gradient_frame(64, 48);
        let pad = 200usize;
        let (pw, ph) = (64 + 2 * pad, 48 + 2 * pad);
        let mean = f.channel_mean();
        let mut padded = vec![0.0; pw * ph * 3];
        for r in 0..ph {
            for c in 0..pw {
                for ch in 0..3 {
                    let inside = r >= pad && c >= pad && r < pad + 48 && c < pad + 64;
                    padded[(r * pw + c) * 3 + ch] = if inside {
                        f.get(r - pad, c - pad, ch)
                    } else {
                        mean[ch]
                    };
                }
            }
        }
        let b = BoundingBox::new(-4.0, -3.0, 14.0, 10.0).unwrap();
        let side = 5.0 * b.area().sqrt();
        let (patch, t) = crop_square(&f, b.cx(), b.cy(), side, 32);
        // Explicit bilinear on the padded buffer, no bounds handling needed.
        let get = |r: i64, c: i64, ch: usize| padded[((r as usize) * pw + c as usize) * 3 + ch];
        let mut max_err: f64 = 0.0;
        let mut saw_padding = false;
        for r in 0..32 {
            for c in 0..32 {
                let fx = t.offset_x + (c as f64 + 0.5) * t.scale + pad as f64 - 0.5;
                let fy = t.offset_y + (r as f64 + 0.5) * t.scale + pad as f64 - 0.5;
                let (x0, y0) = (fx.floor() as i64, fy.floor() as i64);
                let (tx, ty) = (fx - fx.floor(), fy - fy.floor());
                if x0 < pad as i64 - 1 || y0 < pad as i64 - 1 {
                    saw_padding = true;
                }
                for ch in 0..3 {
                    let v = (1.0 - ty) * ((1.0 - tx) * get(y0, x0, ch) + tx * get(y0, x0 + 1, ch))
                        + ty * ((1.0 - tx) * get(y0 + 1, x0, ch) + tx * get(y0 + 1, x0 + 1, ch));
                    let got = patch.data()[ch * 1024 + r * 32 + c];
                    max_err = max_err.max((v - got).abs());
                }
            }
        }
        assert!(saw_padding);
        assert!(max_err < 1e-12, "max err {max_err}");
    }

    #[test]
    fn rotated_crop_matches_square_crop_at_zero_and_turns_the_grid() {
        let f = gradient_frame(120, 120);
        let (a, ta) = crop_square(&f, 60.0, 60.0, 40.0, 16);
        let (b, tb) = crop_rotated(&f, 60.0, 60.0, 40.0, 0.0, 16);
        assert_eq!(ta, tb);
        assert!(a.zip_map(&b, |x, y| (x - y).abs()).max_abs() < 1e-9);
        // after a quarter turn the red ramp (frame x) runs up the patch rows
        let (q, _) = crop_rotated(&f, 60.0, 60.0, 40.0, std::f64::consts::FRAC_PI_2, 16);
        for r in 1..16 {
            for c in 0..16 {
                assert!(q.data()[r * 16 + c] <= q.data()[(r - 1) * 16 + c] + 1e-9);
            }
        }
        assert!(q.data()[0] > q.data()[15 * 16]);
    }
}
