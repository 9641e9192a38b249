//! Sequences, frames and boxes; sequence I/O, synthetic generation, search
//! region cropping and occlusion masks.

mod augment;
mod crop;
mod mask;
mod sequence_io;
mod synth;

pub use augment::{flip_horizontal, gaussian_blur};
pub use crop::{crop_rotated, crop_search_region, crop_square, CropParams, CropTransform, JitterConfig, SamplePatch};
pub use mask::{apply_random_mask, MaskConfig, OcclusionMask};
pub use sequence_io::{is_sequence_dir, load_dataset, load_sequence, save_dataset, save_sequence};
pub use synth::{
    generate_dataset, generate_synthetic, occluded_fraction, DatasetConfig, OccluderScript,
    SynthConfig,
};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels; `(x, y)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "({}, {}, {}, {}) must be finite with positive size",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn cx(&self) -> f64 {
        self.x + self.w / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Area of the intersection with `other` (0 when disjoint).
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    /// Intersection over union; 0 when disjoint.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        if self == other && self.area() > 0.0 {
            return 1.0;
        }
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            w: a[2],
            h: a[3],
        }
    }
}

/// One RGB image, stored 8-bit interleaved; values read back in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    mean: [f64; 3],
    pub index: usize,
}

pub const MIN_FRAME_SIZE: usize = 32;

impl Frame {
    pub fn from_rgb8(width: usize, height: usize, pixels: Vec<u8>, index: usize) -> Result<Self> {
        if width < MIN_FRAME_SIZE || height < MIN_FRAME_SIZE {
            return Err(Error::InvalidArgument(format!(
                "frame {width}x{height} is smaller than {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "frame buffer has {} bytes, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        let mut sums = [0u64; 3];
        for px in pixels.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as u64;
            }
        }
        let n = (width * height) as f64 * 255.0;
        let mean = [sums[0] as f64 / n, sums[1] as f64 / n, sums[2] as f64 / n];
        Ok(Self {
            width,
            height,
            pixels,
            mean,
            index,
        })
    }

    /// Quantize a `[0,1]` float image (row-major, interleaved RGB).
    pub fn from_f64(width: usize, height: usize, values: &[f64], index: usize) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::from_rgb8(width, height, pixels, index)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb8(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[(row * self.width + col) * 3 + channel] as f64 / 255.0
    }

    /// Per-channel mean over the whole frame.
    pub fn channel_mean(&self) -> [f64; 3] {
        self.mean
    }
}

/// Ordered frames with one ground-truth box each.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub boxes: Vec<BoundingBox>,
    /// Per-frame visible fraction of the target (1 = fully visible).
    pub visibility: Option<Vec<f64>>,
}

impl Sequence {
    pub fn new(
        name: impl Into<String>,
        frames: Vec<Frame>,
        boxes: Vec<BoundingBox>,
        visibility: Option<Vec<f64>>,
    ) -> Result<Self> {
        if frames.len() != boxes.len() {
            return Err(Error::CountMismatch {
                frames: frames.len(),
                boxes: boxes.len(),
            });
        }
        if let Some(v) = &visibility {
            if v.len() != frames.len() {
                return Err(Error::Dataset(format!(
                    "count mismatch: {} visibility values for {} frames",
                    v.len(),
                    frames.len()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            frames,
            boxes,
            visibility,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_rejects_non_positive_size() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 3.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 3.0, -1.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 3.0, 1.0).is_err());
        assert!(BoundingBox::new(-5.0, -5.0, 3.0, 1.0).is_ok());
    }

    #[test]
    fn frame_rejects_small_images() {
        assert!(Frame::from_rgb8(31, 40, vec![0; 31 * 40 * 3], 0).is_err());
        let f = Frame::from_rgb8(32, 32, vec![255; 32 * 32 * 3], 0).unwrap();
        assert_eq!(f.get(5, 5, 1), 1.0);
        assert_eq!(f.channel_mean(), [1.0, 1.0, 1.0]);
    }
}
