use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{add_noise, condition, unet, Backbone, BackboneError, Condition};
use crate::datagen::VideoClip;
use crate::numerics::{AdamW, Graph, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Windows per optimizer step.
    pub batch: usize,
    /// Frames per training window.
    pub frames: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 2000, lr: 1e-3, batch: 2, frames: 4, weight_decay: 0.0, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean per-element loss of each step's batch.
    pub losses: Vec<f64>,
}

impl PretrainLog {
    fn median(xs: &[f64]) -> f64 {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    /// Median loss over the first `n` steps.
    pub fn head_median(&self, n: usize) -> f64 {
        Self::median(&self.losses[..n.min(self.losses.len())])
    }

    pub fn tail_median(&self, n: usize) -> f64 {
        Self::median(&self.losses[self.losses.len().saturating_sub(n)..])
    }

    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

struct Sample {
    clip: usize,
    start: usize,
    len: usize,
    t: usize,
    eps: Tensor,
}

/// One training window's loss `mean((eps - eps_theta(z_t, t, c))^2)` and its gradients.
fn window_loss(backbone: &Backbone, clip: &VideoClip, s: &Sample) -> Result<(f64, BTreeMap<String, Tensor>), BackboneError> {
    let frames = clip.frames_range(s.start, s.start + s.len);
    let z0 = backbone.encode_frames(&frames)?;
    let zt = add_noise(backbone.schedule(), &z0, s.t, &s.eps)?;
    let mid = frames.slice_leading(s.len / 2, s.len / 2 + 1)?;
    let mid = mid.reshaped(&backbone.spec().frame)?;

    let mut g = Graph::new();
    let z = g.constant(zt);
    let c = condition::tokens(&mut g, backbone.weights(), backbone.spec(), &Condition::Frame(mid))?;
    let pass = unet::forward(&mut g, backbone.weights(), backbone.spec(), z, s.t, c, &[], true)?;
    let target = g.constant(s.eps.clone());
    let diff = g.sub(pass.eps.unwrap(), target)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.mean_all(sq)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), g.param_grads()))
}

/// Train the denoiser and condition encoder on the noise-prediction
/// objective with frame conditioning. The encoder is untouched.
pub fn pretrain_backbone(
    backbone: &Backbone,
    corpus: &[VideoClip],
    cfg: &PretrainConfig,
) -> Result<(Backbone, PretrainLog), BackboneError> {
    if corpus.is_empty() {
        return Err(BackboneError::InvalidSpec("pretraining corpus is empty".into()));
    }
    if cfg.frames == 0 || cfg.frames > backbone.spec().w_max || cfg.batch == 0 {
        return Err(BackboneError::InvalidSpec(format!(
            "pretraining window {} must be in 1..={} with a positive batch",
            cfg.frames,
            backbone.spec().w_max
        )));
    }
    let mut log = PretrainLog::default();
    if cfg.steps == 0 {
        return Ok((backbone.clone(), log));
    }
    let latent = backbone.spec().latent_shape();
    let steps_t = backbone.schedule().steps();
    let root = Rng::new(cfg.seed).split("pretrain");
    let mut current = backbone.clone();
    let mut weights = backbone.weights().clone();
    let mut opt = AdamW::new(cfg.weight_decay);

    for step in 0..cfg.steps {
        let mut rng = root.split_index("step", step as u64);
        let samples: Vec<Sample> = (0..cfg.batch)
            .map(|_| {
                let clip = rng.below(corpus.len());
                let len = cfg.frames.min(corpus[clip].len());
                let start = rng.below(corpus[clip].len() - len + 1);
                let t = rng.below(steps_t);
                let eps = rng.normal_tensor(&[len, latent[0], latent[1], latent[2]], 1.0);
                Sample { clip, start, len, t, eps }
            })
            .collect();
        let results: Vec<_> = samples.par_iter().map(|s| window_loss(&current, &corpus[s.clip], s)).collect();

        let mut total = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (r, s) in results.into_iter().zip(&samples) {
            let (loss, g) = match r {
                Err(BackboneError::Numerics(crate::numerics::NumericsError::NonFinite { .. })) => {
                    return Err(BackboneError::NonFiniteLoss { step, t: s.t, clip: corpus[s.clip].id.clone() })
                }
                other => other?,
            };
            if !loss.is_finite() {
                return Err(BackboneError::NonFiniteLoss { step, t: s.t, clip: corpus[s.clip].id.clone() });
            }
            total += loss;
            for (name, gt) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(gt.data()).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, gt);
                    }
                }
            }
        }
        let k = 1.0 / cfg.batch as f64;
        for gt in grads.values_mut() {
            gt.data_mut().iter_mut().for_each(|v| *v *= k);
        }
        log.losses.push(total * k);
        opt.step(&mut weights, &grads, cfg.lr);
        current = Backbone::from_parts(backbone.spec().clone(), weights.clone())?;
    }
    Ok((current, log))
}
