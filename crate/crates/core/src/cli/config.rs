//! Run configuration: defaults, then a JSON file, then command-line flags.
//!
//! Merging happens on JSON values so a file may set any subset of keys. A
//! key that does not exist in the defaults is rejected by name. The
//! per-component seed fields (`protocol.seed`, `pretrain.seed`, ...) always
//! equal the global `seed`; a file may repeat them only with that value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{BackboneSpec, PretrainConfig};
use crate::classifier::TrainConfig;
use crate::datagen::{Context, ProtocolKind, ProtocolSpec, Species};
use crate::experiments::{AblationAxes, GridAxes, HeadConfig};
use crate::extraction::{ExtractionConfig, CACHE_ENV};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("malformed config JSON: {0}")]
    Malformed(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("`{path}` is {value} but must equal the global seed {seed}")]
    SeedConflict { path: String, value: Value, seed: Value },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizeSettings {
    /// Patches per side.
    pub grid: usize,
    /// Test clips to localize (those with at least one sprite-free patch).
    pub clips: usize,
}

/// Fully resolved settings of one invocation; `config.json` in every run
/// directory is this struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 means one per logical core.
    pub jobs: usize,
    pub out: PathBuf,
    pub cache: PathBuf,
    /// Corpus directory written by `gen-data` (`train/`, `test/`, `test_in_domain/`).
    pub corpus: PathBuf,
    pub backbone: PathBuf,
    pub classifier: PathBuf,
    pub protocol: ProtocolSpec,
    pub multi_label: Option<f64>,
    pub backbone_spec: BackboneSpec,
    pub pretrain: PretrainConfig,
    pub extraction: ExtractionConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub grid: GridAxes,
    pub ablation: AblationAxes,
    pub sweep_layers: Vec<usize>,
    pub localize: LocalizeSettings,
}

/// Default protocol of each kind at desk-scale counts.
pub fn protocol_preset(kind: ProtocolKind) -> ProtocolSpec {
    match kind {
        ProtocolKind::CrossSpecies => {
            ProtocolSpec::cross_species(&[Species::Circle, Species::Square, Species::Cross], &[Species::Triangle, Species::Star]).with_counts(100, 75)
        }
        ProtocolKind::CrossView => ProtocolSpec::cross_view(false).with_counts(60, 30),
        ProtocolKind::CrossContext => ProtocolSpec::cross_context(&[Context::Plain, Context::Gradient], &[Context::Textured]).with_counts(30, 30),
        ProtocolKind::InDomain => ProtocolSpec::in_domain(Species::ALL).with_counts(60, 6),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 0,
            out: "run".into(),
            cache: ".actiondiff-cache".into(),
            corpus: "data".into(),
            backbone: "backbone.ck".into(),
            classifier: "classifier.bundle".into(),
            protocol: protocol_preset(ProtocolKind::CrossSpecies),
            multi_label: None,
            backbone_spec: BackboneSpec::default(),
            pretrain: PretrainConfig::default(),
            extraction: ExtractionConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            grid: GridAxes::default(),
            ablation: AblationAxes::default(),
            sweep_layers: vec![1, 3, 6],
            localize: LocalizeSettings { grid: 2, clips: 10 },
        }
    }
}

const SUB_SEEDS: [&str; 4] = ["protocol.seed", "backbone_spec.seed", "pretrain.seed", "train.seed"];

fn get<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |cur, k| cur.get(k))
}

fn set(v: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let mut cur = v;
    for k in path.split('.') {
        cur = cur.get_mut(k).ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
    }
    *cur = value;
    Ok(())
}

/// Enum values are `kind`-tagged objects or single-key objects (`{"raw": 5}`).
/// A different variant of the same style replaces the default instead of merging.
fn switches_variant(b: &serde_json::Map<String, Value>, o: &serde_json::Map<String, Value>) -> bool {
    let kind = |m: &serde_json::Map<String, Value>| m.get("kind").and_then(Value::as_str).map(str::to_owned);
    match (kind(b), kind(o)) {
        (Some(x), Some(y)) => x != y,
        (Some(_), None) | (None, Some(_)) => false,
        (None, None) => b.len() == 1 && o.len() == 1 && b.keys().next() != o.keys().next(),
    }
}

/// Merge `over` into `base`, rejecting keys `base` does not have.
pub fn merge(base: &mut Value, over: &Value, path: &str) -> Result<(), ConfigError> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            if switches_variant(b, o) {
                *b = o.clone();
                return Ok(());
            }
            for (k, ov) in o {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(bv) => merge(bv, ov, &p)?,
                    None => return Err(ConfigError::UnknownKey(p)),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

/// `defaults <- file <- flags`, then seeds and the cache override. `flags`
/// are dotted paths with JSON values.
pub fn resolve(file: Option<&str>, flags: &[(String, Value)]) -> Result<RunConfig, ConfigError> {
    let mut v = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(text) = file {
        let f: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(|e| ConfigError::Malformed(e.to_string()))?
        };
        if !f.is_object() {
            return Err(ConfigError::Malformed("top level must be an object".into()));
        }
        if let Some(kind) = get(&f, "protocol.kind").and_then(Value::as_str) {
            let kind = ProtocolKind::parse(kind).ok_or_else(|| ConfigError::Invalid(format!("unknown protocol kind `{kind}`")))?;
            v["protocol"] = serde_json::to_value(protocol_preset(kind)).expect("protocol serializes");
        }
        merge(&mut v, &f, "")?;
        let seed = v["seed"].clone();
        for p in SUB_SEEDS {
            if let Some(val) = get(&f, p) {
                if *val != seed {
                    return Err(ConfigError::SeedConflict { path: p.to_string(), value: val.clone(), seed });
                }
            }
        }
    }
    for (path, val) in flags {
        if path == "protocol.kind" {
            let kind = val.as_str().and_then(ProtocolKind::parse).ok_or_else(|| ConfigError::Invalid(format!("unknown protocol kind {val}")))?;
            let mut p = protocol_preset(kind);
            p.seed = v["seed"].as_u64().unwrap_or(0);
            v["protocol"] = serde_json::to_value(p).expect("protocol serializes");
            continue;
        }
        set(&mut v, path, val.clone())?;
    }
    let seed = v["seed"].clone();
    for p in SUB_SEEDS {
        set(&mut v, p, seed.clone())?;
    }
    if let Some(root) = std::env::var_os(CACHE_ENV).filter(|r| !r.is_empty()) {
        v["cache"] = Value::String(PathBuf::from(root).to_string_lossy().into_owned());
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.check()?;
    Ok(cfg)
}

pub fn resolve_file(file: Option<&Path>, flags: &[(String, Value)]) -> Result<RunConfig, ConfigError> {
    let text = file.map(std::fs::read_to_string).transpose()?;
    resolve(text.as_deref(), flags)
}

impl RunConfig {
    fn check(&self) -> Result<(), ConfigError> {
        for (name, p) in [("out", &self.out), ("cache", &self.cache), ("corpus", &self.corpus), ("backbone", &self.backbone), ("classifier", &self.classifier)]
        {
            if p.as_os_str().is_empty() {
                return Err(ConfigError::Invalid(format!("`{name}` is empty")));
            }
        }
        if self.sweep_layers.is_empty() {
            return Err(ConfigError::Invalid("`sweep_layers` is empty".into()));
        }
        if self.localize.grid < 2 || self.localize.clips == 0 {
            return Err(ConfigError::Invalid("`localize` needs grid >= 2 and clips >= 1".into()));
        }
        self.backbone_spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_file_is_defaults() {
        std::env::remove_var(CACHE_ENV);
        assert_eq!(resolve(Some(""), &[]).unwrap(), RunConfig::default());
        assert_eq!(resolve(Some("{}"), &[]).unwrap(), RunConfig::default());
        assert_eq!(resolve(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = resolve(Some(r#"{"foo": 1}"#), &[]).unwrap_err();
        assert!(e.to_string().contains("foo"), "{e}");
        let e = resolve(Some(r#"{"train": {"epochz": 3}}"#), &[]).unwrap_err();
        assert!(e.to_string().contains("train.epochz"), "{e}");
    }

    #[test]
    fn flags_beat_file_beats_defaults() {
        let c = resolve(Some(r#"{"seed": 3, "train": {"epochs": 2}}"#), &[("seed".into(), json!(7))]).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.protocol.seed, 7);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.peak_lr, TrainConfig::default().peak_lr);
    }

    #[test]
    fn snapshot_is_a_fixed_point() {
        let c = resolve(Some(r#"{"seed": 5, "extraction": {"time": {"raw": 400}}, "protocol": {"kind": "cross_view"}}"#), &[]).unwrap();
        assert_eq!(c.protocol.kind, ProtocolKind::CrossView);
        let snap = serde_json::to_string(&c).unwrap();
        assert_eq!(resolve(Some(&snap), &[]).unwrap(), c);
    }

    #[test]
    fn malformed_and_conflicting() {
        assert!(matches!(resolve(Some("{"), &[]), Err(ConfigError::Malformed(_))));
        assert!(matches!(resolve(Some("[1]"), &[]), Err(ConfigError::Malformed(_))));
        assert!(matches!(resolve(Some(r#"{"train": {"seed": 4}}"#), &[]), Err(ConfigError::SeedConflict { .. })));
        assert!(resolve(Some(r#"{"seed": 4, "train": {"seed": 4}}"#), &[]).is_ok());
    }

    #[test]
    fn variants_replace() {
        let c = resolve(Some(r#"{"protocol": {"imbalance": {"kind": "skewed", "strength": 1.5, "seed": 2}}}"#), &[]).unwrap();
        assert!(matches!(c.protocol.imbalance, crate::datagen::Imbalance::Skewed { .. }));
    }
}
