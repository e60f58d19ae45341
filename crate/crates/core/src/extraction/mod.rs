//! Per-frame features from one denoiser pass per window: encode, optionally
//! noise, run to the tapped layer, average over height and width.

mod cache;
mod config;

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cache::{cache_key, clip_digest, CacheKey, FeatureCache, CACHE_ENV};
pub use config::{window_bounds, ExtractionConfig, TimeSpec};

use crate::backbone::{add_noise, Backbone, BackboneError, CondMode, Condition};
use crate::datagen::{Action, VideoClip};
use crate::numerics::{NumericsError, Rng, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ExtractionError {
    #[error("invalid extraction config: {0}")]
    InvalidConfig(String),
    #[error("clip {0} has no frames")]
    EmptyClip(String),
    #[error("corrupted cache entry {path}: {reason}")]
    Corrupted { path: std::path::PathBuf, reason: String },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What produced a feature sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config: ExtractionConfig,
    pub clip_id: String,
    /// Backbone fingerprint, hex.
    pub backbone: String,
    /// Resolved diffusion index.
    pub timestep: usize,
}

/// Pooled features `[M, d]`, one row per frame of the clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub features: Tensor,
    pub provenance: Provenance,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Mean over the spatial axes of `[M, h, w, c]`, giving `[M, c]`.
pub fn pool_spatial(tapped: &Tensor) -> Result<Tensor, ExtractionError> {
    let s = tapped.shape();
    if s.len() != 4 {
        return Err(NumericsError::InvalidShape(s.to_vec()).into());
    }
    let (m, hw, c) = (s[0], s[1] * s[2], s[3]);
    let x = tapped.data();
    let mut out = vec![0.0; m * c];
    for f in 0..m {
        for p in 0..hw {
            let row = &x[(f * hw + p) * c..(f * hw + p + 1) * c];
            for (o, v) in out[f * c..(f + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= hw as f64);
    Ok(Tensor::checked(vec![m, c], out)?)
}

/// Counters shared by every extraction through one [`Extractor`].
#[derive(Debug, Default)]
pub struct ExtractStats {
    windows: AtomicU64,
    frame_condition_encodes: AtomicU64,
}

impl ExtractStats {
    pub fn windows(&self) -> u64 {
        self.windows.load(Ordering::Relaxed)
    }

    /// Number of times a frame payload was read to build conditioning.
    pub fn frame_condition_encodes(&self) -> u64 {
        self.frame_condition_encodes.load(Ordering::Relaxed)
    }
}

fn condition_for(mode: CondMode, frames: &Tensor, stats: Option<&ExtractStats>) -> Result<Condition, ExtractionError> {
    Ok(match mode {
        CondMode::None => Condition::None,
        CondMode::ActionText => Condition::ActionText(Action::ALL.iter().map(|a| a.name().to_string()).collect()),
        CondMode::Frame => {
            if let Some(s) = stats {
                s.frame_condition_encodes.fetch_add(1, Ordering::Relaxed);
            }
            let n = frames.shape()[0];
            let mid = frames.slice_leading(n / 2, n / 2 + 1)?;
            Condition::Frame(mid.reshaped(&frames.shape()[1..])?)
        }
    })
}

/// Pooled features of every layer in `layers` for one window.
fn window_layers(
    frames: &Tensor,
    config: &ExtractionConfig,
    layers: &[usize],
    backbone: &Backbone,
    noise: Option<Rng>,
    stats: Option<&ExtractStats>,
) -> Result<Vec<Tensor>, ExtractionError> {
    let n = frames.shape().first().copied().unwrap_or(0);
    if n == 0 || n > backbone.spec().w_max {
        return Err(ExtractionError::InvalidConfig(format!("window of {n} frames outside 1..={}", backbone.spec().w_max)));
    }
    let t = config.timestep(backbone)?;
    let mut z = backbone.encode_frames(frames)?;
    if config.noisy {
        let mut r = noise.unwrap_or_else(|| Rng::new(config.noise_seed).split("window"));
        let eps = r.normal_tensor(z.shape(), 1.0);
        z = add_noise(backbone.schedule(), &z, t, &eps)?;
    }
    let cond = backbone.encode_condition(&condition_for(config.cond, frames, stats)?)?;
    if let Some(s) = stats {
        s.windows.fetch_add(1, Ordering::Relaxed);
    }
    backbone.tap_forward(&z, t, &cond, layers)?.iter().map(pool_spatial).collect()
}

/// Features `[n, d]` for one window of `n <= w_max` frames.
pub fn extract_window(frames: &Tensor, config: &ExtractionConfig, backbone: &Backbone) -> Result<Tensor, ExtractionError> {
    config.validate(backbone.spec())?;
    Ok(window_layers(frames, config, &[config.layer], backbone, None, None)?.remove(0))
}

fn extract_video_layers(
    clip: &VideoClip,
    config: &ExtractionConfig,
    layers: &[usize],
    backbone: &Backbone,
    stats: Option<&ExtractStats>,
) -> Result<Vec<FeatureSequence>, ExtractionError> {
    for &l in layers {
        config.clone().with_layer(l).validate(backbone.spec())?;
    }
    if clip.is_empty() {
        return Err(ExtractionError::EmptyClip(clip.id.clone()));
    }
    let t = config.timestep(backbone)?;
    let noise_root = Rng::new(config.noise_seed).split(&format!("extract:{}", clip.id));
    let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); layers.len()];
    for (i, (a, b)) in window_bounds(clip.len(), config.window, backbone.spec().w_max).into_iter().enumerate() {
        let noise = noise_root.split_index("window", i as u64);
        let feats = window_layers(&clip.frames_range(a, b), config, layers, backbone, Some(noise), stats)?;
        for (p, f) in parts.iter_mut().zip(feats) {
            p.push(f);
        }
    }
    layers
        .iter()
        .zip(parts)
        .map(|(&l, p)| {
            Ok(FeatureSequence {
                features: Tensor::concat_leading(&p)?,
                provenance: Provenance {
                    config: config.clone().with_layer(l),
                    clip_id: clip.id.clone(),
                    backbone: backbone.fingerprint_hex(),
                    timestep: t,
                },
            })
        })
        .collect()
}

/// Window the clip, extract each window, concatenate in frame order.
pub fn extract_video(clip: &VideoClip, config: &ExtractionConfig, backbone: &Backbone) -> Result<FeatureSequence, ExtractionError> {
    Ok(extract_video_layers(clip, config, &[config.layer], backbone, None)?.remove(0))
}

/// Extraction bound to one backbone, with an optional cache and counters.
pub struct Extractor<'a> {
    backbone: &'a Backbone,
    cache: Option<FeatureCache>,
    stats: ExtractStats,
}

impl<'a> Extractor<'a> {
    pub fn new(backbone: &'a Backbone) -> Self {
        Extractor { backbone, cache: None, stats: ExtractStats::default() }
    }

    pub fn with_cache(mut self, cache: FeatureCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn backbone(&self) -> &Backbone {
        self.backbone
    }

    pub fn cache(&self) -> Option<&FeatureCache> {
        self.cache.as_ref()
    }

    pub fn stats(&self) -> &ExtractStats {
        &self.stats
    }

    /// Features of one clip at each of `layers` (one pass per window, cut at
    /// the deepest layer). Cached layers are read back; if any is missing
    /// the pass runs and fills them.
    pub fn extract_layers(&self, clip: &VideoClip, config: &ExtractionConfig, layers: &[usize]) -> Result<Vec<FeatureSequence>, ExtractionError> {
        let fp = self.backbone.fingerprint();
        let digest = clip_digest(clip);
        let keys: Vec<CacheKey> = layers.iter().map(|&l| cache_key(&config.clone().with_layer(l), fp, &clip.id, &digest)).collect();
        if let Some(cache) = &self.cache {
            let mut found = Vec::with_capacity(layers.len());
            for k in &keys {
                match cache.get(k)? {
                    Some(seq) => found.push(seq),
                    None => break,
                }
            }
            if found.len() == layers.len() {
                return Ok(found);
            }
        }
        let seqs = extract_video_layers(clip, config, layers, self.backbone, Some(&self.stats))?;
        if let Some(cache) = &self.cache {
            for (k, s) in keys.iter().zip(&seqs) {
                cache.put(k, s)?;
            }
        }
        Ok(seqs)
    }

    pub fn extract(&self, clip: &VideoClip, config: &ExtractionConfig) -> Result<FeatureSequence, ExtractionError> {
        Ok(self.extract_layers(clip, config, &[config.layer])?.remove(0))
    }

    /// Every clip in parallel; output in input order.
    pub fn extract_all(&self, clips: &[VideoClip], config: &ExtractionConfig) -> Result<Vec<FeatureSequence>, ExtractionError> {
        clips.par_iter().map(|c| self.extract(c, config)).collect()
    }

    /// `result[i][j]` is clip `j` at `layers[i]`.
    pub fn extract_all_layers(
        &self,
        clips: &[VideoClip],
        config: &ExtractionConfig,
        layers: &[usize],
    ) -> Result<Vec<Vec<FeatureSequence>>, ExtractionError> {
        let per_clip: Vec<Vec<FeatureSequence>> =
            clips.par_iter().map(|c| self.extract_layers(c, config, layers)).collect::<Result<_, _>>()?;
        let mut out: Vec<Vec<FeatureSequence>> = vec![Vec::with_capacity(clips.len()); layers.len()];
        for seqs in per_clip {
            for (o, s) in out.iter_mut().zip(seqs) {
                o.push(s);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_means() {
        let t = Tensor::from_slice(&[1, 2, 2, 1], &[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(pool_spatial(&t).unwrap().data(), &[4.0]);
        let c = Tensor::from_slice(&[2, 1, 2, 2], &[0.5, -1.0, 0.5, -1.0, 2.0, 3.0, 2.0, 3.0]).unwrap();
        assert_eq!(pool_spatial(&c).unwrap().data(), &[0.5, -1.0, 2.0, 3.0]);
    }
}
