use image::{imageops, ImageBuffer, Rgb};

use super::SamplePatch;
use crate::tensor::Tensor;

type FloatImage = ImageBuffer<Rgb<f32>, Vec<f32>>;

fn to_image(p: &SamplePatch) -> FloatImage {
    let s = p.size;
    let plane = s * s;
    let d = p.pixels.data();
    ImageBuffer::from_fn(s as u32, s as u32, |x, y| {
        let i = y as usize * s + x as usize;
        Rgb([d[i] as f32, d[plane + i] as f32, d[2 * plane + i] as f32])
    })
}

fn from_image(img: &FloatImage, like: &SamplePatch) -> SamplePatch {
    let s = like.size;
    let plane = s * s;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * s + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f64;
        }
    }
    SamplePatch {
        pixels: Tensor::from_vec(&[3, s, s], data),
        ..like.clone()
    }
}

/// Mirror left to right; the target box is mirrored with it.
pub fn flip_horizontal(p: &SamplePatch) -> SamplePatch {
    let s = p.size;
    let mut out = p.clone();
    let src = p.pixels.data();
    let dst = out.pixels.data_mut();
    for c in 0..3 {
        for r in 0..s {
            for col in 0..s {
                dst[(c * s + r) * s + col] = src[(c * s + r) * s + s - 1 - col];
            }
        }
    }
    out.target_box.x = s as f64 - p.target_box.x - p.target_box.w;
    out
}

/// Gaussian blur with standard deviation `sigma` pixels.
pub fn gaussian_blur(p: &SamplePatch, sigma: f64) -> SamplePatch {
    let img = imageops::blur(&to_image(p), sigma as f32);
    from_image(&img, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{BoundingBox, CropTransform};

    fn patch() -> SamplePatch {
        let s = 16;
        let data = (0..3 * s * s).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        SamplePatch {
            size: s,
            pixels: Tensor::from_vec(&[3, s, s], data),
            target_box: BoundingBox::new(2.0, 3.0, 5.0, 4.0).unwrap(),
            transform: CropTransform {
                scale: 1.0,
                offset_x: 0.0,
                offset_y: 0.0,
            },
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let p = patch();
        let f = flip_horizontal(&p);
        assert_eq!(f.target_box.x, 9.0);
        assert_eq!(f.pixels.data()[0], p.pixels.data()[15]);
        assert_eq!(flip_horizontal(&f), p);
    }

    #[test]
    fn blur_keeps_constants_and_smooths() {
        let mut c = patch();
        c.pixels = Tensor::full(&[3, 16, 16], 0.25);
        let b = gaussian_blur(&c, 2.0);
        assert!(b.pixels.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
        let p = patch();
        let var = |t: &Tensor| {
            let m = t.sum() / t.len() as f64;
            t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>()
        };
        assert!(var(&gaussian_blur(&p, 1.0).pixels) < var(&p.pixels));
    }
}
