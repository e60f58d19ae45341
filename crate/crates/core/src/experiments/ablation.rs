use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{domain_tags, fit_and_evaluate, headline, label_indices, write_csv, write_json, EvalSet, ExperimentError, Prepared, Result, RunSpec, VERSION};
use crate::backbone::{Backbone, CondMode};
use crate::classifier::{HeadType, LossKind};
use crate::extraction::{Extractor, FeatureCache};
use crate::numerics::Tensor;

/// Values swept on each axis; every other setting stays at the base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationAxes {
    pub heads: Vec<HeadType>,
    pub windows: Vec<usize>,
    pub losses: Vec<LossKind>,
    pub conds: Vec<CondMode>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        AblationAxes {
            heads: HeadType::ALL.to_vec(),
            windows: vec![4, 6, 8],
            losses: vec![LossKind::Bce, LossKind::Focal],
            conds: CondMode::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub base: RunSpec,
    pub axes: AblationAxes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    /// Accuracy or mAP on the test split.
    pub metric: f64,
    pub seed: u64,
    /// Middle-frame condition encodes performed for this row.
    pub frame_condition_encodes: u64,
    /// Config paths that differ from the base.
    pub changed: Vec<String>,
    pub config: RunSpec,
}

/// Leaf paths (`a.b.c`) at which two JSON values differ.
pub fn config_diff(a: &Value, b: &Value) -> Vec<String> {
    fn walk(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, &p, out),
                        _ => out.push(p),
                    }
                }
            }
            _ if a != b => out.push(path.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}

fn variants(cfg: &AblationConfig) -> Vec<(&'static str, String, &'static str, RunSpec)> {
    let base = &cfg.base;
    let mut out = Vec::new();
    for &h in &cfg.axes.heads {
        let mut r = base.clone();
        r.head.head = h;
        out.push(("head", h.name().to_string(), "head.head", r));
    }
    for &w in &cfg.axes.windows {
        let mut r = base.clone();
        r.extraction.window = w;
        out.push(("window", w.to_string(), "extraction.window", r));
    }
    for &l in &cfg.axes.losses {
        let mut r = base.clone();
        r.train.loss = l;
        out.push(("loss", l.name().to_string(), "train.loss", r));
    }
    for &c in &cfg.axes.conds {
        let mut r = base.clone();
        r.extraction.cond = c;
        out.push(("cond", c.name().to_string(), "extraction.cond", r));
    }
    out
}

/// One-factor sweeps: one row per axis value, trained with the base seed and
/// evaluated on the test split. Each row gets its own extractor (so the
/// instrumentation counters are per row); `cache_root` is shared.
pub fn run_ablations(cfg: &AblationConfig, prepared: &Prepared, backbone: &Backbone, cache_root: Option<&Path>) -> Result<Vec<AblationRow>> {
    let rows = variants(cfg);
    if rows.is_empty() {
        return Err(ExperimentError::Invalid("every ablation axis is empty".into()));
    }
    let base_json = serde_json::to_value(&cfg.base)?;
    let kind = cfg.base.protocol.kind;
    let (ytr, yte, dte) = (label_indices(&prepared.train), label_indices(&prepared.test), domain_tags(kind, &prepared.test));
    let mode = prepared.task_mode();
    rows.into_par_iter()
        .map(|(axis, value, field, run)| {
            run.extraction.validate(backbone.spec())?;
            let changed = config_diff(&base_json, &serde_json::to_value(&run)?);
            if changed.iter().any(|c| c != field) {
                return Err(ExperimentError::Invalid(format!("ablation {axis}={value} changed {changed:?}, expected only {field}")));
            }
            let mut ex = Extractor::new(backbone);
            if let Some(root) = cache_root {
                ex = ex.with_cache(FeatureCache::new(root));
            }
            let feats = |clips| -> Result<Vec<Tensor>> { Ok(ex.extract_all(clips, &run.extraction)?.into_iter().map(|f| f.features).collect()) };
            let (ftr, fte) = (feats(&prepared.train)?, feats(&prepared.test)?);
            let fitted = fit_and_evaluate(&ftr, &ytr, mode, &run.head, &run.train, &[EvalSet { features: &fte, labels: &yte, domains: &dte }])?;
            Ok(AblationRow {
                axis: axis.to_string(),
                value,
                metric: headline(&fitted.reports[0], mode)?,
                seed: run.train.seed,
                frame_condition_encodes: ex.stats().frame_condition_encodes(),
                changed,
                config: run,
            })
        })
        .collect()
}

/// `ablations.csv` (one row per configuration, its full config as JSON in
/// the last column) and `report.json`.
pub fn write_ablations(dir: &Path, cfg: &AblationConfig, backbone: &Backbone, rows: &[AblationRow]) -> Result<()> {
    let emb = serde_json::json!({"version": VERSION, "backbone": backbone.fingerprint_hex(), "config": cfg});
    let table = rows
        .iter()
        .map(|r| {
            Ok(vec![
                r.axis.clone(),
                r.value.clone(),
                r.metric.to_string(),
                r.seed.to_string(),
                r.changed.join(";"),
                serde_json::to_string(&r.config)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(&dir.join("ablations.csv"), &emb, &["axis", "value", "metric", "seed", "changed", "config"], &table)?;
    let mut report = emb;
    report["rows"] = serde_json::to_value(rows)?;
    write_json(&dir.join("report.json"), &report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{ProtocolSpec, Species};

    #[test]
    fn diff_lists_leaf_paths() {
        let a = serde_json::json!({"x": 1, "y": {"z": [1, 2], "w": "a"}});
        let b = serde_json::json!({"x": 1, "y": {"z": [1, 3], "w": "a"}, "v": null});
        assert_eq!(config_diff(&a, &b), vec!["v".to_string(), "y.z".to_string()]);
        assert!(config_diff(&a, &a).is_empty());
    }

    #[test]
    fn default_axes_give_eleven_single_field_variants() {
        let cfg = AblationConfig { base: RunSpec::new(ProtocolSpec::in_domain(&[Species::Circle])), axes: AblationAxes::default() };
        let v = variants(&cfg);
        assert_eq!(v.len(), 11);
        assert_eq!(v.iter().filter(|x| x.0 == "head").count(), 3);
        let base = serde_json::to_value(&cfg.base).unwrap();
        for (_, _, field, run) in &v {
            let d = config_diff(&base, &serde_json::to_value(run).unwrap());
            assert!(d.iter().all(|p| p == field), "{d:?}");
        }
        let focal = &v.iter().find(|x| x.1 == "focal").unwrap().3;
        let bce = &v.iter().find(|x| x.1 == "bce").unwrap().3;
        let d = config_diff(&serde_json::to_value(focal).unwrap(), &serde_json::to_value(bce).unwrap());
        assert_eq!(d, vec!["train.loss".to_string()]);
    }
}
