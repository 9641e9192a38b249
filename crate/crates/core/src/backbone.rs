//! Fully convolutional feature extractor mapping an image patch to a dense
//! feature map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::SamplePatch;
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::nn::{BoundConvBn, ConvBn, Parameterized};
use crate::tensor::Tensor;

/// Maps feature cells to patch pixels: `pixel = offset + stride · cell`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub stride: f64,
    pub offset: f64,
}

impl Geometry {
    pub fn cell_to_patch(&self, cell: f64) -> f64 {
        self.offset + self.stride * cell
    }

    pub fn patch_to_cell(&self, px: f64) -> f64 {
        (px - self.offset) / self.stride
    }
}

/// Dense `C×h×w` embedding of a patch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub geometry: Geometry,
}

impl FeatureMap {
    pub fn new(values: Tensor, geometry: Geometry) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "feature map must be C×h×w, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values, geometry })
    }

    pub fn channels(&self) -> usize {
        self.values.dim(0)
    }

    pub fn height(&self) -> usize {
        self.values.dim(1)
    }

    pub fn width(&self) -> usize {
        self.values.dim(2)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.values.shape() == other.values.shape()
    }

    /// `1×C×h×w` copy for graph input.
    pub fn batched(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.values.shape());
        self.values.clone().reshape(&shape)
    }

    /// Inverse of [`FeatureMap::batched`] for a single-item batch.
    pub fn from_batched(t: Tensor, geometry: Geometry) -> Self {
        let shape = t.shape()[1..].to_vec();
        Self {
            values: t.reshape(&shape),
            geometry,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.all_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channel counts from the RGB input through every layer.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![3, 16, 32, 32, 32],
            strides: vec![2, 2, 2, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub layers: Vec<ConvBn>,
}

impl BackboneParams {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        assert_eq!(cfg.channels.len(), cfg.strides.len() + 1);
        let layers = cfg
            .strides
            .iter()
            .enumerate()
            .map(|(i, &s)| ConvBn::new(cfg.channels[i], cfg.channels[i + 1], 3, s, rng))
            .collect();
        Self { layers }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.weight.dim(0)).unwrap_or(3)
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            stride: self.total_stride() as f64,
            offset: 0.5,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<BoundConvBn> {
        self.layers.iter().map(|l| l.bind(g, trainable)).collect()
    }

    pub fn vars(bound: &[BoundConvBn]) -> Vec<Var> {
        bound.iter().flat_map(ConvBn::vars).collect()
    }

    /// Conv → norm → rectification for every layer. `x` is `N×3×S×S`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &[BoundConvBn],
        mut x: Var,
        train: bool,
    ) -> (Var, Vec<BatchStats>) {
        let mut stats = Vec::new();
        for (layer, b) in self.layers.iter().zip(bound) {
            let (y, s) = layer.forward(g, b, x, train);
            stats.extend(s);
            x = g.relu(y);
        }
        (x, stats)
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            layer.update_running(s);
        }
    }

    fn check_patch(&self, patch: &SamplePatch) -> Result<()> {
        let stride = self.total_stride();
        if patch.size == 0 || !patch.size.is_multiple_of(stride) {
            return Err(Error::Shape(format!(
                "patch size {} is not divisible by the total stride {stride}",
                patch.size
            )));
        }
        if patch.pixels.shape() != [3, patch.size, patch.size] {
            return Err(Error::Shape(format!("patch pixels have shape {:?}", patch.pixels.shape())));
        }
        Ok(())
    }
}

impl Parameterized for BackboneParams {
    fn trainable(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.trainable()).collect()
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.trainable_mut()).collect()
    }

    fn named_arrays(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named(&format!("backbone.conv{}", i + 1)))
            .collect()
    }

    fn named_arrays_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.named_mut(&format!("backbone.conv{}", i + 1)))
            .collect()
    }
}

/// Inference-mode features for one patch.
pub fn extract_features(params: &BackboneParams, patch: &SamplePatch) -> Result<FeatureMap> {
    Ok(extract_batch(params, &[patch])?.remove(0))
}

/// Inference-mode features for several patches in one batched pass.
pub fn extract_batch(params: &BackboneParams, patches: &[&SamplePatch]) -> Result<Vec<FeatureMap>> {
    for p in patches {
        params.check_patch(p)?;
    }
    if patches.is_empty() {
        return Ok(Vec::new());
    }
    let s = patches[0].size;
    let refs: Vec<Tensor> = patches
        .iter()
        .map(|p| p.pixels.clone().reshape(&[1, 3, s, s]))
        .collect();
    let batch = Tensor::stack(&refs.iter().collect::<Vec<_>>());
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(batch);
    let (y, _) = params.forward(&mut g, &bound, x, false);
    let out = g.value(y);
    let geom = params.geometry();
    Ok((0..patches.len())
        .map(|i| FeatureMap::from_batched(out.slice_outer(i), geom))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{BoundingBox, CropTransform};
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch(size: usize, pixels: Tensor) -> SamplePatch {
        SamplePatch {
            size,
            pixels,
            target_box: BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
            transform: CropTransform {
                scale: 1.0,
                offset_x: 0.0,
                offset_y: 0.0,
            },
        }
    }

    #[test]
    fn output_shape_is_input_over_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = BackboneParams::new(&BackboneConfig::default(), &mut rng);
        let p = patch(128, Tensor::uniform(&[3, 128, 128], 0.0, 1.0, &mut rng));
        let fm = extract_features(&params, &p).unwrap();
        assert_eq!(fm.values.shape(), &[32, 16, 16]);
        assert!(fm.all_finite());
    }

    #[test]
    fn zero_patch_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = BackboneParams::new(&BackboneConfig::default(), &mut rng);
        let p = patch(64, Tensor::zeros(&[3, 64, 64]));
        let a = extract_features(&params, &p).unwrap();
        let b = extract_features(&params, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_sizes_not_divisible_by_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = BackboneParams::new(&BackboneConfig::default(), &mut rng);
        let p = patch(60, Tensor::zeros(&[3, 60, 60]));
        assert!(extract_features(&params, &p).is_err());
    }

    #[test]
    fn shifting_input_by_stride_shifts_output_by_one_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = BackboneParams::new(&BackboneConfig::default(), &mut rng);
        for l in &mut params.layers {
            l.running_mean = Tensor::randn(l.running_mean.shape(), 0.1, &mut rng);
            l.running_var = Tensor::uniform(l.running_var.shape(), 0.5, 2.0, &mut rng);
        }
        let s = 96;
        let big = Tensor::uniform(&[3, s, s + 8], 0.0, 1.0, &mut rng);
        let window = |x0: usize| {
            let mut d = Vec::with_capacity(3 * s * s);
            for c in 0..3 {
                for r in 0..s {
                    let row = (c * s + r) * (s + 8);
                    d.extend_from_slice(&big.data()[row + x0..row + x0 + s]);
                }
            }
            patch(s, Tensor::from_vec(&[3, s, s], d))
        };
        let a = extract_features(&params, &window(0)).unwrap();
        let b = extract_features(&params, &window(8)).unwrap();
        let (c, h, w) = (a.channels(), a.height(), a.width());
        let mut max_dev: f64 = 0.0;
        // receptive field of 4 stacked 3×3 layers stays clear of the border
        for ch in 0..c {
            for i in 3..h - 3 {
                for j in 3..w - 4 {
                    let va = a.values.data()[(ch * h + i) * w + j + 1];
                    let vb = b.values.data()[(ch * h + i) * w + j];
                    max_dev = max_dev.max((va - vb).abs());
                }
            }
        }
        assert!(max_dev < 1e-4, "max deviation {max_dev}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = BackboneConfig {
            channels: vec![3, 4, 4, 4, 4],
            strides: vec![2, 2, 2, 1],
        };
        let params = BackboneParams::new(&cfg, &mut rng);
        let x = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 4, 2, 2], 1.0, &mut rng);
        let mut inputs: Vec<Tensor> = params.trainable().into_iter().cloned().collect();
        inputs.push(x);
        let n = inputs.len();
        let report = check_gradients(
            &inputs,
            |g, v| {
                let bound: Vec<BoundConvBn> = v[..n - 1]
                    .chunks(4)
                    .map(|c| BoundConvBn {
                        weight: c[0],
                        bias: c[1],
                        gamma: c[2],
                        beta: c[3],
                    })
                    .collect();
                let (y, _) = params.forward(g, &bound, v[n - 1], true);
                let y = g.mul_const(y, probe.clone());
                g.mean_all(y)
            },
            &GradCheck::default(),
        );
        assert!(report.max_rel_error() < 1e-3, "{report:?}");
    }
}
