//! Studies on top of the extraction/classifier pipeline: single protocol
//! runs, the layer x timestep grid, one-factor ablations, the layer sweep
//! and patch localization. Every study writes CSV/JSON into a run directory.

mod ablation;
mod artifacts;
mod corpus;
mod grid;
mod localize;
mod sweep;

use serde::{Deserialize, Serialize};

pub use ablation::{config_diff, run_ablations, write_ablations, AblationAxes, AblationConfig, AblationRow};
pub use artifacts::{read_csv_config, write_csv, write_json, VERSION};
pub use corpus::{pretrained_backbone, pretraining_corpus};
pub use grid::{grid_search, write_grid, GridAxes, GridConfig, GridResult, GridRow, StepBest};
pub use localize::{
    background_patches, localization_study, localize, patch_masses, patch_video, sprite_patch, uniform_clip, write_heatmap, LocalizationMap,
    LocalizationOutcome, MIN_PATCH,
};
pub use sweep::{default_sweep_protocols, layer_sweep, write_sweep, SweepCell, SweepConfig};

use crate::backbone::BackboneError;
use crate::classifier::{
    predict_batch, split_metric, train_classifier, ClassifierConfig, ClassifierError, ClassifierModel, EpochLog, HeadType, TrainConfig,
};
use crate::datagen::{make_protocol, multi_label_variant, render_manifest, DatagenError, ProtocolKind, ProtocolSpec, ProtocolSplits, VideoClip, NUM_ACTIONS};
use crate::extraction::{ExtractionConfig, ExtractionError, Extractor};
use crate::metrics::{freq_baseline, EvalReport, MetricsError};
use crate::numerics::{Rng, Tensor};
use crate::TaskMode;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Classifier shape, minus what the data decides (input width, classes, task).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub pos_emb: bool,
    pub head: HeadType,
    pub max_len: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        let c = ClassifierConfig::new(1, NUM_ACTIONS, TaskMode::SingleLabel);
        HeadConfig {
            model_dim: c.model_dim,
            depth: c.depth,
            heads: c.heads,
            ff_mult: c.ff_mult,
            pos_emb: c.pos_emb,
            head: c.head,
            max_len: c.max_len,
        }
    }
}

impl HeadConfig {
    /// 64-wide, 2 blocks, 4 heads: for studies that train dozens of models.
    pub fn small() -> Self {
        HeadConfig { model_dim: 64, depth: 2, heads: 4, ..Default::default() }
    }

    pub fn classifier(&self, input_dim: usize, mode: TaskMode, seed: u64) -> ClassifierConfig {
        ClassifierConfig {
            input_dim,
            model_dim: self.model_dim,
            depth: self.depth,
            heads: self.heads,
            ff_mult: self.ff_mult,
            classes: NUM_ACTIONS,
            task_mode: mode,
            pos_emb: self.pos_emb,
            head: self.head,
            max_len: self.max_len,
            seed,
        }
    }
}

/// Everything one protocol run depends on besides the backbone weights.
/// The classifier is initialised from `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub protocol: ProtocolSpec,
    /// Turn every split into its multi-label variant at this partner rate.
    #[serde(default)]
    pub multi_label: Option<f64>,
    pub extraction: ExtractionConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn new(protocol: ProtocolSpec) -> Self {
        RunSpec {
            protocol,
            multi_label: None,
            extraction: ExtractionConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn with_head(mut self, head: HeadConfig) -> Self {
        self.head = head;
        self
    }

    pub fn with_extraction(mut self, extraction: ExtractionConfig) -> Self {
        self.extraction = extraction;
        self
    }

    pub fn with_train(mut self, train: TrainConfig) -> Self {
        self.train = train;
        self
    }

    pub fn with_multi_label(mut self, rate: f64) -> Self {
        self.multi_label = Some(rate);
        self
    }
}

/// Manifests of a protocol plus their rendered clips.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub splits: ProtocolSplits,
    pub train: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
    pub test_in_domain: Vec<VideoClip>,
}

impl Prepared {
    pub fn task_mode(&self) -> TaskMode {
        self.splits.train.task_mode
    }

    pub fn all_clips(&self) -> Vec<VideoClip> {
        let mut v = self.train.clone();
        v.extend(self.test.iter().cloned());
        v.extend(self.test_in_domain.iter().cloned());
        v
    }
}

/// Build and render the manifests of `protocol`.
pub fn prepare(protocol: &ProtocolSpec, multi_label: Option<f64>) -> Result<Prepared> {
    let mut splits = make_protocol(protocol)?;
    if let Some(rate) = multi_label {
        let seed = Rng::new(protocol.seed).split("multi_label").next_u64();
        splits.train = multi_label_variant(&splits.train, rate, seed)?;
        splits.test = multi_label_variant(&splits.test, rate, seed ^ 1)?;
        splits.test_in_domain = multi_label_variant(&splits.test_in_domain, rate, seed ^ 2)?;
    }
    Ok(Prepared {
        train: render_manifest(&splits.train)?,
        test: render_manifest(&splits.test)?,
        test_in_domain: render_manifest(&splits.test_in_domain)?,
        splits,
    })
}

pub fn label_indices(clips: &[VideoClip]) -> Vec<Vec<usize>> {
    clips.iter().map(|c| c.labels.iter().map(|a| a.index()).collect()).collect()
}

/// The domain axis a protocol shifts, as a per-clip tag.
pub fn domain_tags(kind: ProtocolKind, clips: &[VideoClip]) -> Vec<String> {
    clips
        .iter()
        .map(|c| match kind {
            ProtocolKind::CrossSpecies | ProtocolKind::InDomain => c.species.name().to_string(),
            ProtocolKind::CrossView => c.viewpoint.name().to_string(),
            ProtocolKind::CrossContext => c.context.name().to_string(),
        })
        .collect()
}

/// Accuracy for single-label tasks, mAP for multi-label ones.
pub fn headline(report: &EvalReport, mode: TaskMode) -> Result<f64> {
    let v = match mode {
        TaskMode::SingleLabel => report.accuracy,
        TaskMode::MultiLabel => report.map,
    };
    v.ok_or_else(|| ExperimentError::Undefined(format!("{mode:?} metric on {} items", report.count)))
}

/// Seed of an independent sub-run, derived from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    Rng::new(base).split(label).next_u64()
}

/// One labelled evaluation split.
pub struct EvalSet<'a> {
    pub features: &'a [Tensor],
    pub labels: &'a [Vec<usize>],
    pub domains: &'a [String],
}

pub struct Fitted {
    pub model: ClassifierModel,
    pub epochs: Vec<EpochLog>,
    pub train_metric: f64,
    pub reports: Vec<EvalReport>,
}

/// Train a fresh classifier on `(features, labels)` and evaluate it on each set.
pub fn fit_and_evaluate(
    features: &[Tensor],
    labels: &[Vec<usize>],
    mode: TaskMode,
    head: &HeadConfig,
    train: &TrainConfig,
    evals: &[EvalSet<'_>],
) -> Result<Fitted> {
    let dim = features.first().ok_or_else(|| ExperimentError::Invalid("empty training split".into()))?.shape()[1];
    let model = ClassifierModel::new(head.classifier(dim, mode, train.seed))?;
    let (model, log) = train_classifier(&model, features, labels, train)?;
    let train_metric = split_metric(&model, features, labels)?;
    let reports = evals
        .iter()
        .map(|e| Ok(EvalReport::new(&predict_batch(&model, e.features)?, e.labels, e.domains)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Fitted { model, epochs: log.epochs, train_metric, reports })
}

/// Outcome of [`run_protocol`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub version: String,
    pub config: RunSpec,
    /// Backbone fingerprint, hex.
    pub backbone: String,
    pub timestep: usize,
    pub task_mode: TaskMode,
    pub train_metric: f64,
    pub test: EvalReport,
    /// Held-out clips from the training domains (the diagonal reference).
    pub test_in_domain: EvalReport,
    /// Accuracy of always predicting the most frequent training action.
    pub baseline_accuracy: Option<f64>,
    pub epochs: Vec<EpochLog>,
}

impl ProtocolReport {
    pub fn test_metric(&self) -> Result<f64> {
        headline(&self.test, self.task_mode)
    }

    pub fn in_domain_metric(&self) -> Result<f64> {
        headline(&self.test_in_domain, self.task_mode)
    }
}

/// Extract (through the extractor's cache), train on the train split,
/// evaluate on the test split and on the in-domain hold-out.
pub fn run_protocol(prepared: &Prepared, run: &RunSpec, extractor: &Extractor<'_>) -> Result<(ProtocolReport, ClassifierModel)> {
    let bb = extractor.backbone();
    run.extraction.validate(bb.spec())?;
    let feats = |clips: &[VideoClip]| -> Result<Vec<Tensor>> {
        Ok(extractor.extract_all(clips, &run.extraction)?.into_iter().map(|f| f.features).collect())
    };
    let (ftr, fte, fid) = (feats(&prepared.train)?, feats(&prepared.test)?, feats(&prepared.test_in_domain)?);
    let kind = run.protocol.kind;
    let (ytr, yte, yid) = (label_indices(&prepared.train), label_indices(&prepared.test), label_indices(&prepared.test_in_domain));
    let (dte, did) = (domain_tags(kind, &prepared.test), domain_tags(kind, &prepared.test_in_domain));
    let mode = prepared.task_mode();
    let fitted = fit_and_evaluate(
        &ftr,
        &ytr,
        mode,
        &run.head,
        &run.train,
        &[
            EvalSet { features: &fte, labels: &yte, domains: &dte },
            EvalSet { features: &fid, labels: &yid, domains: &did },
        ],
    )?;
    let baseline_accuracy = match mode {
        TaskMode::SingleLabel => {
            let fb = freq_baseline(&ytr.iter().map(|l| l[0]).collect::<Vec<_>>(), NUM_ACTIONS)?;
            Some(fb.accuracy(&yte.iter().map(|l| l[0]).collect::<Vec<_>>())?)
        }
        TaskMode::MultiLabel => None,
    };
    let mut reports = fitted.reports.into_iter();
    let report = ProtocolReport {
        version: VERSION.to_string(),
        config: run.clone(),
        backbone: bb.fingerprint_hex(),
        timestep: run.extraction.timestep(bb)?,
        task_mode: mode,
        train_metric: fitted.train_metric,
        test: reports.next().expect("two reports"),
        test_in_domain: reports.next().expect("two reports"),
        baseline_accuracy,
        epochs: fitted.epochs,
    };
    Ok((report, fitted.model))
}
