//! Sequence classifier over pooled per-frame features: a class-token
//! transformer by default, with MLP and linear heads for comparison.

mod loss;
mod model;
mod train;

use std::path::Path;

pub use loss::{cosine_lr, focal_loss, focal_loss_graph, PROB_EPS};
pub use model::{
    classifier_forward, forward_graph, pad_batch, FeatureNorm, predict, predict_batch, Batch, ClassifierConfig, ClassifierModel, HeadType,
};
pub use train::{mixup, mixup_with, split_metric, targets_for, train_classifier, EpochLog, LossKind, TrainConfig, TrainLog};

use crate::numerics::io::{read_bundle, write_bundle};
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("sequence of {len} frames exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: ClassifierConfig,
    norm: Option<FeatureNorm>,
}

/// Weights plus a JSON header with the config and input standardization.
pub fn save_classifier(path: &Path, model: &ClassifierModel) -> Result<(), ClassifierError> {
    let meta = Meta { config: model.config.clone(), norm: model.norm.clone() };
    Ok(write_bundle(path, &meta, &model.weights)?)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel, ClassifierError> {
    let (Meta { config, norm }, weights): (Meta, _) = read_bundle(path)?;
    config.validate()?;
    let fresh = ClassifierModel::new(config.clone())?;
    let expected: Vec<&str> = fresh.weights.iter().map(|(n, _)| n).collect();
    let got: Vec<&str> = weights.iter().map(|(n, _)| n).collect();
    if expected != got {
        return Err(ClassifierError::InvalidConfig("checkpoint weights do not match its config".into()));
    }
    Ok(ClassifierModel { config, weights, norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Rng, Tensor};
    use crate::TaskMode;

    fn tiny(head: HeadType, mode: TaskMode, pos: bool) -> ClassifierModel {
        let mut c = ClassifierConfig::new(6, 4, mode);
        c.model_dim = 16;
        c.depth = 2;
        c.heads = 4;
        c.ff_mult = 2;
        c.head = head;
        c.pos_emb = pos;
        c.max_len = 10;
        ClassifierModel::new(c).unwrap()
    }

    #[test]
    fn single_label_sums_to_one() {
        let m = tiny(HeadType::Transformer, TaskMode::SingleLabel, true);
        let x = Rng::new(1).normal_tensor(&[5, 6], 1.0);
        let p = predict(&m, &x).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let mp = predict(&tiny(HeadType::Transformer, TaskMode::MultiLabel, true), &x).unwrap();
        assert!(mp.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn too_long_is_an_error() {
        let m = tiny(HeadType::Transformer, TaskMode::SingleLabel, true);
        let x = Rng::new(1).normal_tensor(&[11, 6], 1.0);
        assert!(matches!(predict(&m, &x), Err(ClassifierError::SequenceTooLong { len: 11, max: 10 })));
    }

    #[test]
    fn config_validation() {
        let mut c = ClassifierConfig::new(6, 1, TaskMode::SingleLabel);
        assert!(c.validate().is_err());
        c.classes = 3;
        c.heads = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mixup_boundaries() {
        let x = [Tensor::from_slice(&[2, 1], &[1.0, 2.0]).unwrap(), Tensor::from_slice(&[3, 1], &[5.0, 6.0, 7.0]).unwrap()];
        let refs: Vec<&Tensor> = x.iter().collect();
        let b = pad_batch(&refs, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let keep = mixup_with(&b, 1.0, &[1, 0]);
        assert_eq!(keep.x, b.x);
        assert_eq!(keep.targets, b.targets);
        let swap = mixup_with(&b, 0.0, &[1, 0]);
        assert_eq!(&swap.x.data()[..3], &b.x.data()[3..]);
        assert_eq!(swap.masks[0], vec![true, true, true]);
        let half = mixup_with(&b, 0.25, &[1, 0]);
        assert_eq!(half.targets.data(), &[0.25, 0.75, 0.75, 0.25]);
        assert_eq!(mixup(&b, 0.0, &mut Rng::new(0)), b);
    }

    #[test]
    fn zero_epochs_keeps_weights() {
        let m = tiny(HeadType::Mlp, TaskMode::SingleLabel, true);
        let x = vec![Rng::new(2).normal_tensor(&[3, 6], 1.0)];
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (out, log) = train_classifier(&m, &x, &[vec![1]], &cfg).unwrap();
        assert_eq!(out, m);
        assert!(log.epochs.is_empty());
    }
}
