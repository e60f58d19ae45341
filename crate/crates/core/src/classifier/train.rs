use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{cosine_lr, FeatureNorm, focal_loss_graph, forward_graph, pad_batch, predict_batch, Batch, ClassifierError, ClassifierModel};
use crate::metrics::{accuracy, argmax, mean_average_precision};
use crate::numerics::{AdamW, Graph, Rng, Tensor};
use crate::TaskMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Focal loss with the configured alpha and gamma.
    Focal,
    /// Plain (binary) cross-entropy: focal with gamma 0, alpha 1.
    Bce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Focal => "focal",
            LossKind::Bce => "bce",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Beta parameter for mixup; 0 disables it.
    pub mixup_alpha: f64,
    pub batch_size: usize,
    /// Fit per-dimension standardization on the training frames.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            epochs: 15,
            weight_decay: 1e-4,
            loss: LossKind::Focal,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            mixup_alpha: 0.2,
            batch_size: 16,
            standardize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let ok = self.peak_lr > 0.0
            && self.weight_decay >= 0.0
            && self.focal_alpha > 0.0
            && self.focal_gamma >= 0.0
            && self.mixup_alpha >= 0.0
            && self.batch_size > 0;
        if !ok {
            return Err(ClassifierError::InvalidConfig(format!("train config out of range: {self:?}")));
        }
        Ok(())
    }

    /// `(alpha, gamma)` actually used by the loss.
    pub fn focal_params(&self) -> (f64, f64) {
        match self.loss {
            LossKind::Focal => (self.focal_alpha, self.focal_gamma),
            LossKind::Bce => (1.0, 0.0),
        }
    }
}

/// Mix each item with `partners[i]`: `lambda * a + (1 - lambda) * b` for
/// features and targets, masks combined by OR.
pub fn mixup_with(batch: &Batch, lambda: f64, partners: &[usize]) -> Batch {
    let b = batch.len();
    assert_eq!(partners.len(), b, "one partner per item");
    let mix = |t: &Tensor| {
        let row = t.numel() / b;
        let d = t.data();
        let mut out = Vec::with_capacity(t.numel());
        for (i, &j) in partners.iter().enumerate() {
            for c in 0..row {
                out.push(lambda * d[i * row + c] + (1.0 - lambda) * d[j * row + c]);
            }
        }
        Tensor::checked(t.shape().to_vec(), out).expect("mixing finite values")
    };
    let masks = partners
        .iter()
        .enumerate()
        .map(|(i, &j)| batch.masks[i].iter().zip(&batch.masks[j]).map(|(a, c)| *a || *c).collect())
        .collect();
    Batch { x: mix(&batch.x), masks, targets: mix(&batch.targets) }
}

/// `lambda ~ Beta(alpha, alpha)` and a random partner per item; `alpha = 0` is the identity.
pub fn mixup(batch: &Batch, alpha: f64, rng: &mut Rng) -> Batch {
    if alpha == 0.0 || batch.len() < 2 {
        return batch.clone();
    }
    let lambda = rng.beta(alpha, alpha);
    let mut partners: Vec<usize> = (0..batch.len()).collect();
    rng.shuffle(&mut partners);
    mixup_with(batch, lambda, &partners)
}

/// Target vectors: multi-hot for multi-label, one-hot of the first label otherwise.
pub fn targets_for(labels: &[usize], classes: usize, mode: TaskMode) -> Vec<f64> {
    let mut t = vec![0.0; classes];
    match mode {
        TaskMode::MultiLabel => labels.iter().for_each(|&l| t[l] = 1.0),
        TaskMode::SingleLabel => t[labels[0]] = 1.0,
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy (single-label) or mAP (multi-label) on the unmixed training set.
    pub train_metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<(), ClassifierError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "lr", "loss", "train_metric"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.lr.to_string(), e.loss.to_string(), e.train_metric.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Accuracy or mAP of `model` on `(data, labels)`.
pub fn split_metric(model: &ClassifierModel, data: &[Tensor], labels: &[Vec<usize>]) -> Result<f64, ClassifierError> {
    let scores = predict_batch(model, data)?;
    let k = model.config.classes;
    Ok(match model.config.task_mode {
        TaskMode::SingleLabel => {
            let pred: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
            let truth: Vec<usize> = labels.iter().map(|l| l[0]).collect();
            accuracy(&pred, &truth)?
        }
        TaskMode::MultiLabel => {
            let onehot: Vec<Vec<bool>> = labels.iter().map(|ls| (0..k).map(|c| ls.contains(&c)).collect()).collect();
            mean_average_precision(&scores, &onehot)?.map
        }
    })
}

/// Mini-batch AdamW on the focal objective with cosine decay and mixup.
/// Shuffling, mixup draws and reduction order are fixed by `cfg.seed`.
pub fn train_classifier(
    model: &ClassifierModel,
    data: &[Tensor],
    labels: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainLog), ClassifierError> {
    cfg.validate()?;
    let mc = &model.config;
    if data.is_empty() || data.len() != labels.len() {
        return Err(ClassifierError::Shape(format!("{} sequences vs {} label sets", data.len(), labels.len())));
    }
    for (i, (x, l)) in data.iter().zip(labels).enumerate() {
        if x.rank() != 2 || x.shape()[1] != mc.input_dim {
            return Err(ClassifierError::Shape(format!("item {i}: features {:?}, expected [M, {}]", x.shape(), mc.input_dim)));
        }
        let bad_count = l.is_empty() || (mc.task_mode == TaskMode::SingleLabel && l.len() != 1);
        if bad_count || l.iter().any(|&c| c >= mc.classes) {
            return Err(ClassifierError::Shape(format!("item {i}: labels {l:?} invalid for {:?} with {} classes", mc.task_mode, mc.classes)));
        }
    }
    let mut log = TrainLog::default();
    let mut trained = model.clone();
    if cfg.epochs == 0 {
        return Ok((trained, log));
    }
    if cfg.standardize {
        trained.norm = Some(FeatureNorm::fit(data)?);
    }
    let normed = data.iter().map(|t| trained.normalize(t)).collect::<Result<Vec<_>, _>>()?;
    let targets: Vec<Vec<f64>> = labels.iter().map(|l| targets_for(l, mc.classes, mc.task_mode)).collect();
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let (alpha, gamma) = cfg.focal_params();
    let root = Rng::new(cfg.seed).split("train");
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        root.split_index("epoch", epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut lr = cfg.peak_lr;
        for idx in order.chunks(cfg.batch_size) {
            let seqs: Vec<&Tensor> = idx.iter().map(|&i| &normed[i]).collect();
            let tg: Vec<Vec<f64>> = idx.iter().map(|&i| targets[i].clone()).collect();
            let batch = pad_batch(&seqs, &tg)?;
            let batch = mixup(&batch, cfg.mixup_alpha, &mut root.split_index("mixup", step as u64));
            let mut g = Graph::new();
            let p = forward_graph(&mut g, mc, &trained.weights, &batch.x, &batch.masks)?;
            let loss = focal_loss_graph(&mut g, p, &batch.targets, alpha, gamma, mc.task_mode)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(ClassifierError::NonFinite(format!("loss at step {step}")));
            }
            g.backward(loss)?;
            lr = cosine_lr(step, total, cfg.peak_lr);
            opt.step(&mut trained.weights, &g.param_grads(), lr);
            log.step_losses.push(value);
            epoch_loss += value;
            step += 1;
        }
        let train_metric = split_metric(&trained, data, labels)?;
        log.epochs.push(EpochLog { epoch, lr, loss: epoch_loss / per_epoch as f64, train_metric });
    }
    Ok((trained, log))
}
