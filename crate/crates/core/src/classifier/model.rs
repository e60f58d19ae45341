use serde::{Deserialize, Serialize};

use super::ClassifierError;
use crate::numerics::{nn, Graph, ParamStore, Rng, Tensor, Var};
use crate::TaskMode;

type Result<T> = std::result::Result<T, ClassifierError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    /// Class token, positional embeddings and a pre-norm transformer encoder.
    Transformer,
    /// Two hidden layers over the temporally mean-pooled features.
    Mlp,
    /// One linear layer over the mean-pooled features.
    Linear,
}

impl HeadType {
    pub const ALL: [HeadType; 3] = [HeadType::Linear, HeadType::Mlp, HeadType::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            HeadType::Transformer => "transformer",
            HeadType::Mlp => "mlp",
            HeadType::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<HeadType> {
        Self::ALL.into_iter().find(|h| h.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Feature width `d` of the input sequences.
    pub input_dim: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `model_dim`.
    pub ff_mult: usize,
    pub classes: usize,
    pub task_mode: TaskMode,
    pub pos_emb: bool,
    pub head: HeadType,
    /// Longest sequence the positional table covers.
    pub max_len: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(input_dim: usize, classes: usize, task_mode: TaskMode) -> Self {
        ClassifierConfig {
            input_dim,
            model_dim: 256,
            depth: 6,
            heads: 8,
            ff_mult: 4,
            classes,
            task_mode,
            pos_emb: true,
            head: HeadType::Transformer,
            max_len: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ClassifierError::InvalidConfig(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.input_dim == 0 || self.model_dim == 0 || self.max_len == 0 {
            return bad("input_dim, model_dim and max_len must be positive".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads));
        }
        if self.head == HeadType::Transformer && (self.depth == 0 || self.ff_mult == 0) {
            return bad("transformer head needs depth and ff_mult >= 1".into());
        }
        Ok(())
    }
}

/// Per-dimension standardization fitted on training frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    /// Mean and standard deviation of every feature dimension over all frames.
    pub fn fit(seqs: &[Tensor]) -> Result<FeatureNorm> {
        let d = seqs.first().ok_or_else(|| ClassifierError::Shape("no sequences to fit".into()))?.shape()[1];
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0.0;
        for s in seqs {
            for row in s.data().chunks(d) {
                for j in 0..d {
                    sum[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
                n += 1.0;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
        Ok(FeatureNorm { mean, std })
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if t.rank() != 2 || t.shape()[1] != d {
            return Err(ClassifierError::Shape(format!("features {:?}, expected [M, {d}]", t.shape())));
        }
        let data = t.data().chunks(d).flat_map(|row| row.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j])).collect();
        Ok(Tensor::checked(t.shape().to_vec(), data)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub weights: ParamStore,
    /// Input standardization, applied before the forward pass when present.
    pub norm: Option<FeatureNorm>,
}

impl ClassifierModel {
    pub fn new(config: ClassifierConfig) -> Result<ClassifierModel> {
        config.validate()?;
        let rng = Rng::new(config.seed).split("classifier");
        let mut w = ParamStore::new();
        let (d, dm, k) = (config.input_dim, config.model_dim, config.classes);
        match config.head {
            HeadType::Transformer => {
                nn::init_linear(&mut w, &rng, "in", d, dm, 1.0);
                w.insert("cls", rng.split("cls").normal_tensor(&[dm], 0.02));
                if config.pos_emb {
                    w.insert("pos", rng.split("pos").normal_tensor(&[config.max_len + 1, dm], 0.02));
                }
                for i in 0..config.depth {
                    nn::init_norm(&mut w, &format!("enc{i}.ln1"), dm);
                    nn::init_attention(&mut w, &rng, &format!("enc{i}.att"), dm, dm, 1.0);
                    nn::init_norm(&mut w, &format!("enc{i}.ln2"), dm);
                    nn::init_linear(&mut w, &rng, &format!("enc{i}.ff1"), dm, dm * config.ff_mult, 1.0);
                    nn::init_linear(&mut w, &rng, &format!("enc{i}.ff2"), dm * config.ff_mult, dm, 1.0);
                }
                nn::init_norm(&mut w, "final", dm);
                nn::init_linear(&mut w, &rng, "head", dm, k, 1.0);
            }
            HeadType::Mlp => {
                nn::init_linear(&mut w, &rng, "mlp.fc1", d, dm, 1.0);
                nn::init_linear(&mut w, &rng, "mlp.fc2", dm, dm, 1.0);
                nn::init_linear(&mut w, &rng, "mlp.out", dm, k, 1.0);
            }
            HeadType::Linear => nn::init_linear(&mut w, &rng, "lin", d, k, 1.0),
        }
        Ok(ClassifierModel { config, weights: w, norm: None })
    }

    pub fn num_params(&self) -> usize {
        self.weights.num_values()
    }

    /// `t` with the model's standardization applied.
    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        match &self.norm {
            Some(n) => n.apply(t),
            None => Ok(t.clone()),
        }
    }
}

/// Sequences zero-padded to a common length, with validity masks and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, L, d]`
    pub x: Tensor,
    pub masks: Vec<Vec<bool>>,
    /// `[B, K]`
    pub targets: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Pad `seqs` (`[M_i, d]` each) to the longest and stack them.
pub fn pad_batch(seqs: &[&Tensor], targets: &[Vec<f64>]) -> Result<Batch> {
    let first = seqs.first().ok_or_else(|| ClassifierError::Shape("empty batch".into()))?;
    if first.rank() != 2 {
        return Err(ClassifierError::Shape(format!("features must be [M, d], got {:?}", first.shape())));
    }
    let d = first.shape()[1];
    if seqs.len() != targets.len() {
        return Err(ClassifierError::Shape(format!("{} sequences vs {} targets", seqs.len(), targets.len())));
    }
    let l = seqs.iter().map(|s| s.shape()[0]).max().unwrap();
    let k = targets[0].len();
    let mut x = vec![0.0; seqs.len() * l * d];
    let mut masks = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        if s.rank() != 2 || s.shape()[1] != d || s.shape()[0] == 0 {
            return Err(ClassifierError::Shape(format!("sequence {i} has shape {:?}, expected [M>=1, {d}]", s.shape())));
        }
        let m = s.shape()[0];
        x[i * l * d..i * l * d + m * d].copy_from_slice(s.data());
        masks.push((0..l).map(|j| j < m).collect());
    }
    let t: Vec<f64> = targets.iter().flat_map(|r| r.iter().copied()).collect();
    if t.len() != k * seqs.len() {
        return Err(ClassifierError::Shape("ragged targets".into()));
    }
    Ok(Batch {
        x: Tensor::from_slice(&[seqs.len(), l, d], &x)?,
        masks,
        targets: Tensor::from_slice(&[seqs.len(), k], &t)?,
    })
}

/// Masked temporal mean `[B, L, d] -> [B, d]`.
fn masked_mean(g: &mut Graph, x: Var, masks: &[Vec<bool>]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let mut w = vec![0.0; b * l];
    for (i, m) in masks.iter().enumerate() {
        let n = m.iter().filter(|&&v| v).count().max(1) as f64;
        for (j, &v) in m.iter().enumerate() {
            if v {
                w[i * l + j] = 1.0 / n;
            }
        }
    }
    let w = g.constant(Tensor::from_slice(&[b, 1, l], &w)?);
    let pooled = g.matmul(w, x)?;
    Ok(g.reshape(pooled, &[b, d])?)
}

/// Class probabilities `[B, K]` for a padded batch, built on `g` from `params`.
pub fn forward_graph(g: &mut Graph, config: &ClassifierConfig, params: &ParamStore, x: &Tensor, masks: &[Vec<bool>]) -> Result<Var> {
    let s = x.shape();
    if s.len() != 3 || s[2] != config.input_dim {
        return Err(ClassifierError::Shape(format!("input {s:?}, expected [B, L, {}]", config.input_dim)));
    }
    let (b, l) = (s[0], s[1]);
    if l > config.max_len {
        return Err(ClassifierError::SequenceTooLong { len: l, max: config.max_len });
    }
    let xv = g.constant(x.clone());
    let logits = match config.head {
        HeadType::Transformer => {
            let dm = config.model_dim;
            let h = nn::linear(g, params, "in", xv)?;
            let cls = nn::p(g, params, "cls")?;
            let cls = g.reshape(cls, &[1, 1, dm])?;
            let cls = if b > 1 { g.concat(&vec![cls; b], 0)? } else { cls };
            let mut h = g.concat(&[cls, h], 1)?;
            if config.pos_emb {
                let pos = nn::p(g, params, "pos")?;
                let pos = g.slice(pos, 0, 0, l + 1)?;
                h = g.add_suffix(h, pos)?;
            }
            let ext: Vec<Vec<bool>> = masks.iter().map(|m| std::iter::once(true).chain(m.iter().copied()).collect()).collect();
            for i in 0..config.depth {
                let a = nn::layer_norm(g, params, &format!("enc{i}.ln1"), h)?;
                let a = nn::masked_self_attention(g, params, &format!("enc{i}.att"), a, config.heads, &ext)?;
                h = g.add(h, a)?;
                let f = nn::layer_norm(g, params, &format!("enc{i}.ln2"), h)?;
                let f = nn::linear(g, params, &format!("enc{i}.ff1"), f)?;
                let f = g.gelu(f)?;
                let f = nn::linear(g, params, &format!("enc{i}.ff2"), f)?;
                h = g.add(h, f)?;
            }
            let h = nn::layer_norm(g, params, "final", h)?;
            let c = g.slice(h, 1, 0, 1)?;
            let c = g.reshape(c, &[b, dm])?;
            nn::linear(g, params, "head", c)?
        }
        HeadType::Mlp => {
            let h = masked_mean(g, xv, masks)?;
            let h = nn::linear(g, params, "mlp.fc1", h)?;
            let h = g.gelu(h)?;
            let h = nn::linear(g, params, "mlp.fc2", h)?;
            let h = g.gelu(h)?;
            nn::linear(g, params, "mlp.out", h)?
        }
        HeadType::Linear => {
            let h = masked_mean(g, xv, masks)?;
            nn::linear(g, params, "lin", h)?
        }
    };
    Ok(match config.task_mode {
        TaskMode::MultiLabel => g.sigmoid(logits)?,
        TaskMode::SingleLabel => g.softmax(logits, 1)?,
    })
}

/// Probabilities for one `[M, d]` sequence; `mask` marks valid frames.
pub fn classifier_forward(model: &ClassifierModel, features: &Tensor, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if features.rank() != 2 || features.shape()[0] == 0 {
        return Err(ClassifierError::Shape(format!("features must be [M>=1, d], got {:?}", features.shape())));
    }
    let (m, d) = (features.shape()[0], features.shape()[1]);
    let mask: Vec<bool> = match mask {
        Some(v) if v.len() != m => return Err(ClassifierError::Shape(format!("mask of {} for {m} frames", v.len()))),
        Some(v) => v.to_vec(),
        None => vec![true; m],
    };
    let x = model.normalize(features)?.reshaped(&[1, m, d])?;
    let mut g = Graph::inference();
    let p = forward_graph(&mut g, &model.config, &model.weights, &x, &[mask])?;
    Ok(g.value(p).data().to_vec())
}

/// Alias of [`classifier_forward`] with every frame valid.
pub fn predict(model: &ClassifierModel, features: &Tensor) -> Result<Vec<f64>> {
    classifier_forward(model, features, None)
}

/// Padded, chunked batch prediction; equal to per-item [`predict`].
pub fn predict_batch(model: &ClassifierModel, seqs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let k = model.config.classes;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(32) {
        let normed = chunk.iter().map(|t| model.normalize(t)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = normed.iter().collect();
        let batch = pad_batch(&refs, &vec![vec![0.0; k]; chunk.len()])?;
        let mut g = Graph::inference();
        let p = forward_graph(&mut g, &model.config, &model.weights, &batch.x, &batch.masks)?;
        out.extend(g.value(p).data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}
