use serde::{Deserialize, Serialize};

use super::BackboneError;

/// Names of the blocks that carry temporal attention, in forward order.
/// The first six are the tappable layers 1..=6.
pub const TEMPORAL_BLOCKS: [&str; 8] = ["l1", "l2", "l3", "l4", "l5", "l6", "dec2", "dec1"];

/// Geometry and hyperparameters of the toy denoiser.
///
/// Two resolution levels: layers 1-2 run at full latent resolution with
/// `channels[0]`, layers 3-6 at half resolution with `channels[1]` (5-6 are
/// the bottleneck). Levels past the first add spatial self-attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// Frame extents `(H, W, C)`.
    pub frame: [usize; 3],
    /// Encoder patch side; latents are `H/patch x W/patch x latent_channels`.
    pub patch: usize,
    pub latent_channels: usize,
    pub channels: [usize; 2],
    pub heads: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub w_max: usize,
    /// One gate per entry of [`TEMPORAL_BLOCKS`].
    pub alphas: Vec<f64>,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            frame: [32, 32, 1],
            patch: 4,
            latent_channels: 4,
            channels: [32, 64],
            heads: 4,
            cond_dim: 32,
            time_dim: 64,
            w_max: 8,
            alphas: vec![0.5; TEMPORAL_BLOCKS.len()],
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            seed: 0,
        }
    }
}

impl BackboneSpec {
    pub const NUM_LAYERS: usize = 6;

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.frame[0] / self.patch, self.frame[1] / self.patch, self.latent_channels]
    }

    /// Extents `(h_l, w_l, c_l)` of the activation tapped at `layer` (1-based).
    pub fn layer_extents(&self, layer: usize) -> Result<[usize; 3], BackboneError> {
        let [h, w, _] = self.latent_shape();
        match layer {
            1 | 2 => Ok([h, w, self.channels[0]]),
            3..=6 => Ok([h / 2, w / 2, self.channels[1]]),
            _ => Err(BackboneError::TapOutOfRange { layer, layers: Self::NUM_LAYERS }),
        }
    }

    pub fn feature_dim(&self, layer: usize) -> Result<usize, BackboneError> {
        Ok(self.layer_extents(layer)?[2])
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: String| Err(BackboneError::InvalidSpec(m));
        let [h, w, _] = self.frame;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return bad(format!("frame {:?} not divisible into {}-pixel patches", self.frame, self.patch));
        }
        let [lh, lw, _] = self.latent_shape();
        if lh % 2 != 0 || lw % 2 != 0 || lh < 2 {
            return bad(format!("latent {lh}x{lw} cannot be downsampled by 2"));
        }
        if self.latent_channels == 0 || self.latent_channels > self.patch * self.patch * self.frame[2] {
            return bad(format!("latent channels {} exceed patch dimension", self.latent_channels));
        }
        if self.channels.iter().any(|c| *c == 0 || c % self.heads != 0) || self.cond_dim % self.heads != 0 {
            return bad(format!("channel widths {:?} / cond {} not divisible by {} heads", self.channels, self.cond_dim, self.heads));
        }
        if self.time_dim % 2 != 0 || self.cond_dim % 2 != 0 {
            return bad("embedding widths must be even".into());
        }
        if self.w_max == 0 {
            return bad("w_max must be positive".into());
        }
        if self.alphas.len() != TEMPORAL_BLOCKS.len() {
            return bad(format!("{} alpha gates for {} temporal blocks", self.alphas.len(), TEMPORAL_BLOCKS.len()));
        }
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad(format!("alpha gates {:?} outside [0, 1]", self.alphas));
        }
        Ok(())
    }
}
