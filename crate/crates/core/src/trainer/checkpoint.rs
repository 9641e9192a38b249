use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "occtrack-checkpoint-v1";

/// Optimizer moments for both parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub generator: Adam,
    pub discriminator: Adam,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed training steps.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Root seed; per-iteration streams derive from it and `iteration`.
    pub seed: u64,
    pub consecutive_skips: usize,
    pub skipped_steps: u64,
    /// Training configuration snapshot (or `null`).
    pub train_config: serde_json::Value,
}

/// Model weights plus the state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Absent for deployment-only checkpoints.
    pub optim: Option<OptimState>,
    pub meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub train_only: bool,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    format: String,
    model_config: ModelConfig,
    meta: CheckpointMeta,
    optim: Option<BTreeMap<String, AdamMeta>>,
    pub arrays: Vec<ArrayEntry>,
    /// SHA-256 over the manifest serialized with this field empty.
    pub manifest_sha256: String,
}

impl Manifest {
    fn digest(&self) -> Result<String> {
        let mut m = self.clone();
        m.manifest_sha256.clear();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&m)?)))
    }
}

fn adam_arrays<'a>(prefix: &str, a: &'a Adam) -> Vec<(String, &'a Tensor)> {
    let mut v = Vec::new();
    for (i, t) in a.m.iter().enumerate() {
        v.push((format!("optim.{prefix}.m.{i}"), t));
    }
    for (i, t) in a.v.iter().enumerate() {
        v.push((format!("optim.{prefix}.v.{i}"), t));
    }
    v
}

fn adam_arrays_mut<'a>(prefix: &str, a: &'a mut Adam) -> Vec<(String, &'a mut Tensor)> {
    let mut v = Vec::new();
    for (i, t) in a.m.iter_mut().enumerate() {
        v.push((format!("optim.{prefix}.m.{i}"), t));
    }
    for (i, t) in a.v.iter_mut().enumerate() {
        v.push((format!("optim.{prefix}.v.{i}"), t));
    }
    v
}

fn encode(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode(bytes: &[u8], shape: &[usize], name: &str) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Shape(format!(
            "array {name}: {} bytes for shape {shape:?}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Tensor::from_vec(shape, data))
}

/// Write `ck` as a directory of raw little-endian arrays plus a manifest.
pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut arrays: Vec<(String, &Tensor, bool)> = ck.model.named_arrays();
    let mut optim = None;
    if let Some(o) = &ck.optim {
        for (n, t) in adam_arrays("generator", &o.generator) {
            arrays.push((n, t, true));
        }
        for (n, t) in adam_arrays("discriminator", &o.discriminator) {
            arrays.push((n, t, true));
        }
        let mut m = BTreeMap::new();
        m.insert(
            "generator".to_string(),
            AdamMeta {
                config: o.generator.cfg,
                steps: o.generator.steps,
            },
        );
        m.insert(
            "discriminator".to_string(),
            AdamMeta {
                config: o.discriminator.cfg,
                steps: o.discriminator.steps,
            },
        );
        optim = Some(m);
    }
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, t, train_only) in arrays {
        let bytes = encode(t);
        let file = format!("{name}.bin");
        fs::write(dir.join(&file), &bytes)?;
        entries.push(ArrayEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            file,
            train_only,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let mut manifest = Manifest {
        format: FORMAT.into(),
        model_config: ck.model.config.clone(),
        meta: ck.meta.clone(),
        optim,
        arrays: entries,
        manifest_sha256: String::new(),
    };
    manifest.manifest_sha256 = manifest.digest()?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Config(format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    if manifest.digest()? != manifest.manifest_sha256 {
        return Err(Error::HashMismatch(MANIFEST_FILE.into()));
    }
    Ok(manifest)
}

/// Load a checkpoint. With `strict = false`, training-only arrays
/// (discriminator, optimizer moments) are skipped and `optim` is `None`.
pub fn load_checkpoint(dir: &Path, strict: bool) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(&manifest.model_config, manifest.meta.seed)?;
    let mut optim = match (&manifest.optim, strict) {
        (Some(meta), true) => {
            let g = meta
                .get("generator")
                .ok_or_else(|| Error::MissingArray("optimizer state generator".into()))?;
            let d = meta
                .get("discriminator")
                .ok_or_else(|| Error::MissingArray("optimizer state discriminator".into()))?;
            let mut generator = Adam::new(&model.generator_trainable(), g.config);
            generator.steps = g.steps;
            let disc_params: Vec<&Tensor> = crate::nn::Parameterized::trainable(&model.discriminator);
            let mut discriminator = Adam::new(&disc_params, d.config);
            discriminator.steps = d.steps;
            Some(OptimState {
                generator,
                discriminator,
            })
        }
        _ => None,
    };

    let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
    for e in &manifest.arrays {
        if e.train_only && !strict {
            continue;
        }
        if e.dtype != "f64" {
            return Err(Error::Config(format!("array {} has dtype {}", e.name, e.dtype)));
        }
        let bytes = fs::read(dir.join(&e.file))?;
        if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
            return Err(Error::HashMismatch(e.name.clone()));
        }
        loaded.insert(e.name.clone(), decode(&bytes, &e.shape, &e.name)?);
    }

    let mut targets: Vec<(String, &mut Tensor, bool)> = model.named_arrays_mut();
    if let Some(o) = &mut optim {
        targets.extend(adam_arrays_mut("generator", &mut o.generator).into_iter().map(|(n, t)| (n, t, true)));
        targets.extend(
            adam_arrays_mut("discriminator", &mut o.discriminator)
                .into_iter()
                .map(|(n, t)| (n, t, true)),
        );
    }
    for (name, slot, train_only) in targets {
        if train_only && !strict {
            continue;
        }
        match loaded.remove(&name) {
            Some(t) => {
                if t.shape() != slot.shape() {
                    return Err(Error::Shape(format!(
                        "array {name}: stored {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
            None => return Err(Error::MissingArray(name)),
        }
    }
    if let Some(name) = loaded.into_keys().next() {
        return Err(Error::UnknownArray(name));
    }
    Ok(Checkpoint {
        model,
        optim,
        meta: manifest.meta,
    })
}
