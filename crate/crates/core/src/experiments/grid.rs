use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, domain_tags, fit_and_evaluate, headline, label_indices, write_csv, write_json, EvalSet, ExperimentError, Prepared, Result,
    RunSpec, VERSION,
};
use crate::backbone::BackboneSpec;
use crate::extraction::Extractor;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridAxes {
    pub layers: Vec<usize>,
    /// Generative steps, each out of `total_steps`.
    pub steps: Vec<usize>,
    pub total_steps: usize,
}

impl Default for GridAxes {
    fn default() -> Self {
        GridAxes { layers: vec![1, 3, 6], steps: vec![5, 10, 20, 30], total_steps: 30 }
    }
}

impl GridAxes {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.steps.is_empty() {
            return Err(ExperimentError::Invalid("grid needs at least one layer and one step".into()));
        }
        if let Some(l) = self.layers.iter().find(|&&l| l == 0 || l > BackboneSpec::NUM_LAYERS) {
            return Err(ExperimentError::Invalid(format!("layer {l} outside 1..={}", BackboneSpec::NUM_LAYERS)));
        }
        if let Some(s) = self.steps.iter().find(|&&s| s == 0 || s > self.total_steps) {
            return Err(ExperimentError::Invalid(format!("generative step {s} outside 1..={}", self.total_steps)));
        }
        let unique = |v: &[usize]| v.iter().collect::<std::collections::BTreeSet<_>>().len() == v.len();
        if !unique(&self.layers) || !unique(&self.steps) {
            return Err(ExperimentError::Invalid("grid axes contain duplicates".into()));
        }
        Ok(())
    }
}

/// The base run supplies protocol, extraction settings other than layer and
/// step, classifier and training settings; the axes supply the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub base: RunSpec,
    pub axes: GridAxes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub layer: usize,
    pub step: usize,
    /// Metric on held-out clips of the training domains.
    pub in_domain: f64,
    /// Metric on the shifted test domains, same weights.
    pub out_of_domain: f64,
    pub seed: u64,
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Best layer for one step, for each evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepBest {
    pub step: usize,
    pub in_domain: f64,
    pub in_domain_layer: usize,
    pub out_of_domain: f64,
    pub out_of_domain_layer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub version: String,
    pub config: GridConfig,
    pub backbone: String,
    pub rows: Vec<GridRow>,
    pub best_per_step: Vec<StepBest>,
    pub in_domain_argmax_step: usize,
    pub out_of_domain_argmax_step: usize,
    pub observation: String,
    #[serde(skip)]
    pub cache_hits: u64,
    #[serde(skip)]
    pub cache_misses: u64,
}

impl GridResult {
    /// Fraction of cache lookups that hit during this run, if a cache was used.
    pub fn cache_hit_rate(&self) -> Option<f64> {
        let total = self.cache_hits + self.cache_misses;
        (total > 0).then(|| self.cache_hits as f64 / total as f64)
    }
}

fn first_max<T: Copy>(items: impl Iterator<Item = (T, f64)>) -> (T, f64) {
    let mut best: Option<(T, f64)> = None;
    for (k, v) in items {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.expect("nonempty")
}

/// One classifier per (layer, step), seeded from (base seed, layer, step),
/// evaluated with the same weights on the in-domain hold-out and on the
/// shifted test split. Features for all layers of a step come from one
/// pass per window.
pub fn grid_search(cfg: &GridConfig, prepared: &Prepared, extractor: &Extractor<'_>) -> Result<GridResult> {
    let bb = extractor.backbone();
    let axes = &cfg.axes;
    axes.validate()?;
    let (h0, m0) = extractor.cache().map_or((0, 0), |c| (c.hits(), c.misses()));
    let kind = cfg.base.protocol.kind;
    let ytr = label_indices(&prepared.train);
    let (yid, did) = (label_indices(&prepared.test_in_domain), domain_tags(kind, &prepared.test_in_domain));
    let (yod, dod) = (label_indices(&prepared.test), domain_tags(kind, &prepared.test));
    let mode = prepared.task_mode();

    // feats[step][layer] = (train, in-domain, out-of-domain)
    let mut feats: Vec<Vec<[Vec<Tensor>; 3]>> = Vec::with_capacity(axes.steps.len());
    for &s in &axes.steps {
        let ec = cfg.base.extraction.clone().with_step(s, axes.total_steps);
        for &l in &axes.layers {
            ec.clone().with_layer(l).validate(bb.spec())?;
        }
        let mut per_split = Vec::new();
        for clips in [&prepared.train, &prepared.test_in_domain, &prepared.test] {
            per_split.push(extractor.extract_all_layers(clips, &ec, &axes.layers)?);
        }
        let mut by_layer = Vec::with_capacity(axes.layers.len());
        for li in 0..axes.layers.len() {
            let take = |k: usize| per_split[k][li].iter().map(|f| f.features.clone()).collect::<Vec<_>>();
            by_layer.push([take(0), take(1), take(2)]);
        }
        feats.push(by_layer);
    }

    let cells: Vec<(usize, usize)> = (0..axes.steps.len()).flat_map(|si| (0..axes.layers.len()).map(move |li| (si, li))).collect();
    let mut rows = cells
        .par_iter()
        .map(|&(si, li)| {
            let (layer, step) = (axes.layers[li], axes.steps[si]);
            let seed = derive_seed(cfg.base.train.seed, &format!("grid:layer={layer}:step={step}"));
            let train = crate::classifier::TrainConfig { seed, ..cfg.base.train.clone() };
            let [ftr, fid, fod] = &feats[si][li];
            let start = Instant::now();
            let fitted = fit_and_evaluate(
                ftr,
                &ytr,
                mode,
                &cfg.base.head,
                &train,
                &[
                    EvalSet { features: fid, labels: &yid, domains: &did },
                    EvalSet { features: fod, labels: &yod, domains: &dod },
                ],
            )?;
            Ok(GridRow {
                layer,
                step,
                in_domain: headline(&fitted.reports[0], mode)?,
                out_of_domain: headline(&fitted.reports[1], mode)?,
                seed,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.layer, r.step));

    let mut steps = axes.steps.clone();
    steps.sort_unstable();
    let best_per_step: Vec<StepBest> = steps
        .iter()
        .map(|&s| {
            let at: Vec<&GridRow> = rows.iter().filter(|r| r.step == s).collect();
            let (il, iv) = first_max(at.iter().map(|r| (r.layer, r.in_domain)));
            let (ol, ov) = first_max(at.iter().map(|r| (r.layer, r.out_of_domain)));
            StepBest { step: s, in_domain: iv, in_domain_layer: il, out_of_domain: ov, out_of_domain_layer: ol }
        })
        .collect();
    let (in_step, _) = first_max(best_per_step.iter().map(|b| (b.step, b.in_domain)));
    let (out_step, _) = first_max(best_per_step.iter().map(|b| (b.step, b.out_of_domain)));
    let relation = match out_step.cmp(&in_step) {
        std::cmp::Ordering::Less => "earlier than",
        std::cmp::Ordering::Equal => "the same as",
        std::cmp::Ordering::Greater => "later than",
    };
    let observation = format!(
        "best out-of-domain step {out_step} is {relation} best in-domain step {in_step} (of {} generative steps)",
        axes.total_steps
    );
    let (h1, m1) = extractor.cache().map_or((0, 0), |c| (c.hits(), c.misses()));
    Ok(GridResult {
        version: VERSION.to_string(),
        config: cfg.clone(),
        backbone: bb.fingerprint_hex(),
        rows,
        best_per_step,
        in_domain_argmax_step: in_step,
        out_of_domain_argmax_step: out_step,
        observation,
        cache_hits: h1 - h0,
        cache_misses: m1 - m0,
    })
}

#[derive(Serialize)]
struct Embedded<'a> {
    version: &'a str,
    backbone: &'a str,
    config: &'a GridConfig,
}

/// `grid.csv` (the heatmap rows), `best_per_step.csv`, `report.json`, and
/// `stats.json` with wall times and cache counters. Only `stats.json` varies
/// between identical runs.
pub fn write_grid(dir: &Path, result: &GridResult) -> Result<()> {
    let emb = Embedded { version: &result.version, backbone: &result.backbone, config: &result.config };
    let rows: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|r| vec![r.layer.to_string(), r.step.to_string(), r.in_domain.to_string(), r.out_of_domain.to_string(), r.seed.to_string()])
        .collect();
    write_csv(&dir.join("grid.csv"), &emb, &["layer", "step", "in_domain", "out_of_domain", "seed"], &rows)?;
    let best: Vec<Vec<String>> = result
        .best_per_step
        .iter()
        .map(|b| {
            vec![
                b.step.to_string(),
                b.in_domain.to_string(),
                b.in_domain_layer.to_string(),
                b.out_of_domain.to_string(),
                b.out_of_domain_layer.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("best_per_step.csv"),
        &emb,
        &["step", "in_domain", "in_domain_layer", "out_of_domain", "out_of_domain_layer"],
        &best,
    )?;
    write_json(&dir.join("report.json"), result)?;
    let timings: Vec<serde_json::Value> =
        result.rows.iter().map(|r| serde_json::json!({"layer": r.layer, "step": r.step, "wall_ms": r.wall_ms})).collect();
    write_json(
        &dir.join("stats.json"),
        &serde_json::json!({
            "cache_hits": result.cache_hits,
            "cache_misses": result.cache_misses,
            "cache_hit_rate": result.cache_hit_rate(),
            "cells": timings,
        }),
    )
}
