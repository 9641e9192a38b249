//! Shared fixtures for the benchmarks.

use occtrack_core::data_io::{crop_square, generate_synthetic, SamplePatch, SynthConfig};
use occtrack_core::{Model, ModelConfig, Sequence};

/// Default-sized model with fixed initial weights.
pub fn model() -> Model {
    Model::new(&ModelConfig::default(), 0).expect("default config is valid")
}

/// A 30-frame synthetic sequence.
pub fn sequence() -> Sequence {
    let cfg = SynthConfig {
        length: 30,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, 11).expect("default synthetic settings are valid")
}

/// Search patch around the first ground-truth box.
pub fn patch(model: &Model, seq: &Sequence) -> SamplePatch {
    let b = seq.boxes[0];
    let crop = model.config.crop;
    let side = (b.w * b.h).sqrt() * crop.context_factor;
    let (pixels, transform) = crop_square(&seq.frames[0], b.cx(), b.cy(), side, crop.patch_size);
    SamplePatch {
        size: crop.patch_size,
        target_box: transform.to_patch(&b),
        pixels,
        transform,
    }
}
