//! Flat `key = value` configuration with dotted namespaces.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use occtrack_core::data_io::DatasetConfig;
use occtrack_core::{Error, ModelConfig, Result, TrackerConfig, TrainConfig};

pub const RESOLVED_FILE: &str = "config.resolved";

/// Held-out evaluation set and sweep settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub num_sequences: usize,
    pub length: usize,
    pub occlusions_per_sequence: usize,
    pub occlusion_length: usize,
    pub lambdas: Vec<f64>,
    /// Trailing iterations used for the generator-loss variance.
    pub variance_window: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            num_sequences: 20,
            length: 60,
            occlusions_per_sequence: 1,
            occlusion_length: 8,
            lambdas: (0..=10).map(|k| k as f64 / 10.0).collect(),
            variance_window: 500,
        }
    }
}

impl EvalSettings {
    pub fn dataset(&self, synth: &DatasetConfig) -> DatasetConfig {
        let mut d = synth.clone();
        d.num_sequences = self.num_sequences;
        d.sequence.length = self.length;
        d.occlusions_per_sequence = self.occlusions_per_sequence;
        d.occlusion_length = self.occlusion_length;
        d.name_prefix = "heldout".into();
        d
    }
}

/// Every setting the commands read, defaults included.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub track: TrackerConfig,
    pub synth: DatasetConfig,
    pub eval: EvalSettings,
}

/// Keys owned by the top-level `seed` or overwritten per sequence.
const DERIVED_KEYS: [&str; 3] = ["train.seed", "track.seed", "synth.sequence.texture_seed"];

fn tree(cfg: &RunConfig) -> Result<Value> {
    let mut train = serde_json::to_value(&cfg.train)?;
    train
        .as_object_mut()
        .expect("struct serializes to an object")
        .insert("model".into(), serde_json::to_value(&cfg.model)?);
    let mut root = Map::new();
    root.insert("seed".into(), Value::Number(cfg.seed.into()));
    root.insert("train".into(), train);
    root.insert("track".into(), serde_json::to_value(&cfg.track)?);
    root.insert("synth".into(), serde_json::to_value(&cfg.synth)?);
    root.insert("eval".into(), serde_json::to_value(&cfg.eval)?);
    Ok(Value::Object(root))
}

fn is_scalar(v: &Value) -> bool {
    matches!(v, Value::Bool(_) | Value::Number(_) | Value::String(_))
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Array(a) if a.iter().all(is_scalar) => {
            out.insert(prefix.to_string(), v.clone());
        }
        v if is_scalar(v)
            && !DERIVED_KEYS.contains(&prefix) => {
                out.insert(prefix.to_string(), v.clone());
            }
        _ => {}
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn parse_like(template: &Value, raw: &str, key: &str) -> Result<Value> {
    let bad = || Error::Config(format!("`{key}` cannot take the value `{raw}`"));
    match template {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad()),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(|x| Value::Number(x.into())).map_err(|_| bad()),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .and_then(Number::from_f64)
            .map(Value::Number)
            .ok_or_else(bad),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(a) => {
            let elem = a.first().cloned().unwrap_or(Value::Number(Number::from_f64(0.0).unwrap()));
            if raw.trim().is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            raw.split(',')
                .map(|x| parse_like(&elem, x.trim(), key))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        _ => Err(bad()),
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        node = node.get_mut(*p).expect("flattened keys exist in the tree");
    }
    node[parts[parts.len() - 1]] = v;
}

fn nearest<'a>(key: &str, known: impl Iterator<Item = &'a String>) -> Option<&'a String> {
    known.min_by(|a, b| {
        strsim::jaro_winkler(key, b)
            .partial_cmp(&strsim::jaro_winkler(key, a))
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

impl RunConfig {
    /// Flat view with every documented key.
    pub fn to_flat(&self) -> Result<BTreeMap<String, Value>> {
        let mut out = BTreeMap::new();
        flatten("", &tree(self)?, &mut out);
        Ok(out)
    }

    /// Apply `key → raw value` overrides on top of the defaults.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let base = Self::default();
        let known = base.to_flat()?;
        let mut root = tree(&base)?;
        for (k, raw) in pairs {
            let Some(template) = known.get(k) else {
                let hint = nearest(k, known.keys())
                    .map(|n| format!("; nearest match: `{n}`"))
                    .unwrap_or_default();
                return Err(Error::Config(format!("unknown config key `{k}`{hint}")));
            };
            set_path(&mut root, k, parse_like(template, raw, k)?);
        }
        let cfg = Self::from_tree(root)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_tree(mut root: Value) -> Result<Self> {
        let conf = |e: serde_json::Error| Error::Config(e.to_string());
        let model = root["train"]
            .as_object_mut()
            .and_then(|m| m.remove("model"))
            .ok_or_else(|| Error::Config("missing train.model".into()))?;
        let seed = root["seed"].as_u64().unwrap_or_default();
        let mut train: TrainConfig = serde_json::from_value(root["train"].take()).map_err(conf)?;
        let mut track: TrackerConfig = serde_json::from_value(root["track"].take()).map_err(conf)?;
        train.seed = seed;
        track.seed = seed;
        Ok(Self {
            seed,
            train,
            model: serde_json::from_value(model).map_err(conf)?,
            track,
            synth: serde_json::from_value(root["synth"].take()).map_err(conf)?,
            eval: serde_json::from_value(root["eval"].take()).map_err(conf)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.track.validate()?;
        if self.synth.num_sequences == 0 || self.eval.num_sequences == 0 {
            return Err(Error::Config("synth.num_sequences and eval.num_sequences must be positive".into()));
        }
        if self.eval.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config("eval.lambdas must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Replace the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.track.seed = seed;
        self
    }

    /// `key = value` lines, sorted by key.
    pub fn render(&self) -> Result<String> {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in self.to_flat()? {
            s.push_str(&format!("{k} = {}\n", render(&v)));
        }
        Ok(s)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_FILE), self.render()?)?;
        Ok(())
    }
}

/// Split config text into `(key, value)` pairs; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some(prev) = seen.insert(k.clone(), i + 1) {
            return Err(Error::Config(format!("line {}: `{k}` already set on line {prev}", i + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

pub fn load(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => RunConfig::from_pairs(&[]),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_pairs(&parse_pairs(&text)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.render().unwrap();
        let back = RunConfig::from_pairs(&parse_pairs(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_structs() {
        let text = "# comment\nseed = 9\ntrain.learning_rate = 0.5 # trailing\ntrain.model.backbone.channels = 3,4,8\ntrain.model.backbone.strides = 2,2\ntrain.model.predictor.channels = 8\ntrain.model.iou_head.channels = 8\ntrain.model.discriminator.feature_channels = 8\ntrack.use_predictor = false\neval.lambdas = 0,0.5\n";
        let cfg = RunConfig::from_pairs(&parse_pairs(text).unwrap()).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.track.seed, 9);
        assert_eq!(cfg.train.learning_rate, 0.5);
        assert_eq!(cfg.model.backbone.channels, vec![3, 4, 8]);
        assert!(!cfg.track.use_predictor);
        assert_eq!(cfg.eval.lambdas, vec![0.0, 0.5]);
    }

    #[test]
    fn unknown_key_names_nearest_match() {
        let err = RunConfig::from_pairs(&[("trian.epochs".into(), "3".into())]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`trian.epochs`"), "{msg}");
        assert!(msg.contains("nearest match: `train.epochs`"), "{msg}");
    }

    #[test]
    fn derived_seeds_are_not_keys() {
        let flat = RunConfig::default().to_flat().unwrap();
        assert!(flat.contains_key("seed"));
        assert!(!flat.contains_key("train.seed"));
        assert!(RunConfig::from_pairs(&[("train.seed".into(), "1".into())]).is_err());
    }

    #[test]
    fn malformed_input_is_a_config_error() {
        assert!(matches!(parse_pairs("novalue\n"), Err(Error::Config(_))));
        assert!(matches!(parse_pairs("a = 1\na = 2\n"), Err(Error::Config(_))));
        let bad = [("train.epochs".to_string(), "-1".to_string())];
        assert!(matches!(RunConfig::from_pairs(&bad), Err(Error::Config(_))));
        let bad = [("train.model.discriminator.widths".to_string(), "1,2".to_string())];
        assert!(matches!(RunConfig::from_pairs(&bad), Err(Error::Config(_))));
        let bad = [("train.weights.lambda_fuse".to_string(), "2".to_string())];
        assert!(RunConfig::from_pairs(&bad).is_err());
    }
}
