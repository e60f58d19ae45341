use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, domain_tags, fit_and_evaluate, headline, label_indices, prepare, write_csv, write_json, EvalSet, ExperimentError, HeadConfig, Result, VERSION};
use crate::backbone::BackboneSpec;
use crate::classifier::TrainConfig;
use crate::datagen::{Context, ProtocolSpec, Species};
use crate::extraction::{ExtractionConfig, Extractor};

/// Cross-species, cross-view, cross-context and in-domain, at the given
/// clip counts per domain.
pub fn default_sweep_protocols(train_per_domain: usize, test_per_domain: usize) -> Vec<ProtocolSpec> {
    vec![
        ProtocolSpec::cross_species(&[Species::Circle, Species::Square, Species::Cross], &[Species::Triangle, Species::Star]),
        ProtocolSpec::cross_view(false),
        ProtocolSpec::cross_context(&[Context::Plain, Context::Gradient], &[Context::Textured]),
        ProtocolSpec::in_domain(Species::ALL),
    ]
    .into_iter()
    .map(|p| p.with_counts(train_per_domain, test_per_domain))
    .collect()
}

/// Layer sweep at the extraction config's single timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub layers: Vec<usize>,
    pub protocols: Vec<ProtocolSpec>,
    #[serde(default)]
    pub multi_label: Option<f64>,
    /// Its `layer` is replaced by each swept layer.
    pub extraction: ExtractionConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
}

impl SweepConfig {
    pub fn new(protocols: Vec<ProtocolSpec>) -> Self {
        SweepConfig {
            layers: vec![1, 3, 6],
            protocols,
            multi_label: None,
            extraction: ExtractionConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub protocol: String,
    /// Test-split metric.
    pub metric: f64,
    pub seed: u64,
}

/// One classifier per (protocol, layer). Cells are sorted by protocol
/// position, then layer.
pub fn layer_sweep(cfg: &SweepConfig, extractor: &Extractor<'_>) -> Result<Vec<SweepCell>> {
    if cfg.layers.is_empty() || cfg.protocols.is_empty() {
        return Err(ExperimentError::Invalid("layer sweep needs layers and protocols".into()));
    }
    if let Some(l) = cfg.layers.iter().find(|&&l| l == 0 || l > BackboneSpec::NUM_LAYERS) {
        return Err(ExperimentError::Invalid(format!("layer {l} outside 1..={}", BackboneSpec::NUM_LAYERS)));
    }
    cfg.extraction.validate(extractor.backbone().spec())?;
    let mut cells = Vec::new();
    for (pi, protocol) in cfg.protocols.iter().enumerate() {
        let prepared = prepare(protocol, cfg.multi_label)?;
        let name = format!("{pi}:{}", protocol.kind.name());
        let ftr = extractor.extract_all_layers(&prepared.train, &cfg.extraction, &cfg.layers)?;
        let fte = extractor.extract_all_layers(&prepared.test, &cfg.extraction, &cfg.layers)?;
        let (ytr, yte) = (label_indices(&prepared.train), label_indices(&prepared.test));
        let dte = domain_tags(protocol.kind, &prepared.test);
        let mode = prepared.task_mode();
        let mut part = cfg
            .layers
            .par_iter()
            .enumerate()
            .map(|(li, &layer)| {
                let seed = derive_seed(cfg.train.seed, &format!("sweep:{name}:layer={layer}"));
                let train = TrainConfig { seed, ..cfg.train.clone() };
                let tr: Vec<_> = ftr[li].iter().map(|f| f.features.clone()).collect();
                let te: Vec<_> = fte[li].iter().map(|f| f.features.clone()).collect();
                let fitted = fit_and_evaluate(&tr, &ytr, mode, &cfg.head, &train, &[EvalSet { features: &te, labels: &yte, domains: &dte }])?;
                Ok(SweepCell { layer, protocol: name.clone(), metric: headline(&fitted.reports[0], mode)?, seed })
            })
            .collect::<Result<Vec<_>>>()?;
        part.sort_by_key(|c| c.layer);
        cells.extend(part);
    }
    Ok(cells)
}

/// `layersweep.csv`: one row per layer, one column per protocol; plus `report.json`.
pub fn write_sweep(dir: &Path, cfg: &SweepConfig, backbone: &str, cells: &[SweepCell]) -> Result<()> {
    let emb = serde_json::json!({"version": VERSION, "backbone": backbone, "config": cfg});
    let mut protocols: Vec<&str> = Vec::new();
    for c in cells {
        if !protocols.contains(&c.protocol.as_str()) {
            protocols.push(&c.protocol);
        }
    }
    let mut layers: Vec<usize> = cells.iter().map(|c| c.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let rows: Vec<Vec<String>> = layers
        .iter()
        .map(|&l| {
            let mut row = vec![l.to_string()];
            for p in &protocols {
                let v = cells.iter().find(|c| c.layer == l && c.protocol == *p).map_or(String::new(), |c| c.metric.to_string());
                row.push(v);
            }
            row
        })
        .collect();
    let mut header = vec!["layer"];
    header.extend(protocols.iter().copied());
    write_csv(&dir.join("layersweep.csv"), &emb, &header, &rows)?;
    let mut report = emb;
    report["cells"] = serde_json::to_value(cells)?;
    write_json(&dir.join("report.json"), &report)
}
