//! The full set of networks trained together and deployed to the tracker.

use serde::{Deserialize, Serialize};

use crate::adversary::{DiscriminatorConfig, DiscriminatorParams};
use crate::backbone::{BackboneConfig, BackboneParams, Geometry};
use crate::data_io::CropParams;
use crate::error::{Error, Result};
use crate::localizer::LocalizerConfig;
use crate::nn::Parameterized;
use crate::predictor::{PredictorConfig, PredictorParams};
use crate::rng::substream;
use crate::size_estimator::{IouHeadConfig, IouHeadParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub predictor: PredictorConfig,
    pub iou_head: IouHeadConfig,
    pub discriminator: DiscriminatorConfig,
    pub crop: CropParams,
    pub localizer: LocalizerConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bb = &self.backbone;
        if bb.channels.len() < 2 || bb.channels[0] != 3 || bb.strides.len() + 1 != bb.channels.len() {
            return Err(Error::Config(format!(
                "backbone channels {:?} and strides {:?} are inconsistent",
                bb.channels, bb.strides
            )));
        }
        if bb.strides.contains(&0) {
            return Err(Error::Config("backbone strides must be positive".into()));
        }
        let c = *bb.channels.last().unwrap();
        for (what, got) in [
            ("predictor.channels", self.predictor.channels),
            ("iou_head.channels", self.iou_head.channels),
            ("discriminator.feature_channels", self.discriminator.feature_channels),
        ] {
            if got != c {
                return Err(Error::Config(format!("{what} = {got} but the backbone emits {c} channels")));
            }
        }
        let stride: usize = bb.strides.iter().product();
        if self.crop.patch_size == 0 || !self.crop.patch_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "patch size {} is not divisible by the backbone stride {stride}",
                self.crop.patch_size
            )));
        }
        if self.crop.context_factor <= 0.0 {
            return Err(Error::Config("crop context factor must be positive".into()));
        }
        let loc = &self.localizer;
        if loc.filter_size.is_multiple_of(2) || loc.sigma <= 0.0 || loc.memory_capacity == 0 {
            return Err(Error::Config(
                "localizer needs an odd filter size, positive sigma and non-empty memory".into(),
            ));
        }
        if !(0.0..=1.0).contains(&loc.memory_decay) || loc.memory_decay == 0.0 || loc.reg_lambda < 0.0 {
            return Err(Error::Config("localizer decay must lie in (0,1] and reg_lambda ≥ 0".into()));
        }
        if self.predictor.hidden == 0 || self.iou_head.k == 0 {
            return Err(Error::Config("predictor hidden width and pooling grid must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone, predictor, IoU head and the training-only discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub predictor: PredictorParams,
    pub iou_head: IouHeadParams,
    pub discriminator: DiscriminatorParams,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            backbone: BackboneParams::new(&config.backbone, &mut substream(seed, "init.backbone", 0)),
            predictor: PredictorParams::new(&config.predictor, &mut substream(seed, "init.predictor", 0)),
            iou_head: IouHeadParams::new(&config.iou_head, &mut substream(seed, "init.iou_head", 0)),
            discriminator: DiscriminatorParams::new(
                &config.discriminator,
                &mut substream(seed, "init.discriminator", 0),
            ),
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.backbone.geometry()
    }

    /// Side of the feature map for one search patch.
    pub fn feature_size(&self) -> usize {
        self.config.crop.patch_size / self.backbone.total_stride()
    }

    /// Trainable generator-side tensors: backbone, predictor, IoU head.
    pub fn generator_trainable(&self) -> Vec<&Tensor> {
        let mut v = self.backbone.trainable();
        v.extend(self.predictor.trainable());
        v.extend(self.iou_head.trainable());
        v
    }

    pub fn generator_trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.trainable_mut();
        v.extend(self.predictor.trainable_mut());
        v.extend(self.iou_head.trainable_mut());
        v
    }

    /// Every persisted array with a flag marking training-only ones.
    pub fn named_arrays(&self) -> Vec<(String, &Tensor, bool)> {
        let mut v: Vec<(String, &Tensor, bool)> = Vec::new();
        v.extend(self.backbone.named_arrays().into_iter().map(|(n, t)| (n, t, false)));
        v.extend(self.predictor.named_arrays().into_iter().map(|(n, t)| (n, t, false)));
        v.extend(self.iou_head.named_arrays().into_iter().map(|(n, t)| (n, t, false)));
        v.extend(self.discriminator.named_arrays().into_iter().map(|(n, t)| (n, t, true)));
        v
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        let mut v: Vec<(String, &mut Tensor, bool)> = Vec::new();
        v.extend(self.backbone.named_arrays_mut().into_iter().map(|(n, t)| (n, t, false)));
        v.extend(self.predictor.named_arrays_mut().into_iter().map(|(n, t)| (n, t, false)));
        v.extend(self.iou_head.named_arrays_mut().into_iter().map(|(n, t)| (n, t, false)));
        v.extend(self.discriminator.named_arrays_mut().into_iter().map(|(n, t)| (n, t, true)));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_consistent() {
        let m = Model::new(&ModelConfig::default(), 1).unwrap();
        assert_eq!(m.feature_size(), 16);
        let names: Vec<String> = m.named_arrays().into_iter().map(|(n, _, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.predictor.channels = 7;
        assert!(matches!(Model::new(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(&ModelConfig::default(), 3).unwrap();
        let b = Model::new(&ModelConfig::default(), 3).unwrap();
        assert_eq!(a, b);
    }
}
