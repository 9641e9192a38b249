//! Occlusion-robust single-object tracking with hallucinated feature
//! forecasting.
//!
//! A recurrent predictor forecasts the next frame's feature map from the
//! template and past observations. At track time the forecast is blended
//! with the observed feature before filter-based localization and IoU-guided
//! size refinement.

pub mod adversary;
pub mod backbone;
pub mod data_io;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod graph;
pub mod localizer;
pub mod model;
pub mod nn;
pub mod predictor;
pub mod rng;
pub mod size_estimator;
pub mod tensor;
pub mod tracker;
pub mod trainer;

pub use backbone::{extract_features, BackboneConfig, BackboneParams, FeatureMap, Geometry};
pub use data_io::{BoundingBox, Frame, SamplePatch, Sequence};
pub use error::{Error, Result};
pub use evaluator::{EvalResult, OcclusionReport};
pub use localizer::{Filter, LabelMap, SampleMemory};
pub use model::{Model, ModelConfig};
pub use predictor::{PredictorParams, PredictorState};
pub use size_estimator::{IouHeadParams, PooledFeature};
pub use tensor::Tensor;
pub use tracker::{fuse_features, TrackPoint, TrackerConfig, TrackerState};
pub use trainer::{Checkpoint, LossReport, LossWeights, TrainConfig};
