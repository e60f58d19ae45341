use serde::{Deserialize, Serialize};

use super::ExtractionError;
use crate::backbone::{generative_step_to_timestep, Backbone, BackboneSpec, CondMode};

/// Which diffusion index to condition on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSpec {
    /// Generative step `step` of a `total`-step sampler.
    Generative { step: usize, total: usize },
    Raw(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionConfig {
    pub layer: usize,
    pub time: TimeSpec,
    pub cond: CondMode,
    pub window: usize,
    /// Noise the clean latents to the timestep before the pass.
    pub noisy: bool,
    /// Seed for the extraction noise when `noisy` is set.
    pub noise_seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            layer: 6,
            time: TimeSpec::Generative { step: 20, total: 30 },
            cond: CondMode::Frame,
            window: 8,
            noisy: false,
            noise_seed: 0,
        }
    }
}

impl ExtractionConfig {
    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    pub fn with_step(mut self, step: usize, total: usize) -> Self {
        self.time = TimeSpec::Generative { step, total };
        self
    }

    pub fn with_cond(mut self, cond: CondMode) -> Self {
        self.cond = cond;
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn with_noisy(mut self, noisy: bool) -> Self {
        self.noisy = noisy;
        self
    }

    /// Diffusion index for `backbone`'s schedule.
    pub fn timestep(&self, backbone: &Backbone) -> Result<usize, ExtractionError> {
        let steps = backbone.schedule().steps();
        let t = match self.time {
            TimeSpec::Generative { step, total } => generative_step_to_timestep(step, total, backbone.schedule())?,
            TimeSpec::Raw(t) => t,
        };
        if t >= steps {
            return Err(ExtractionError::InvalidConfig(format!("timestep {t} outside schedule of {steps}")));
        }
        Ok(t)
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<(), ExtractionError> {
        if !(1..=BackboneSpec::NUM_LAYERS).contains(&self.layer) {
            return Err(ExtractionError::InvalidConfig(format!("layer {} outside 1..={}", self.layer, BackboneSpec::NUM_LAYERS)));
        }
        if self.window == 0 || self.window > spec.w_max {
            return Err(ExtractionError::InvalidConfig(format!("window {} outside 1..={}", self.window, spec.w_max)));
        }
        Ok(())
    }
}

/// Consecutive non-overlapping windows `[start, end)` covering `n` frames.
///
/// A trailing remainder of two or more frames is its own window. A single
/// leftover frame joins the previous window when that stays within `w_max`,
/// and is processed alone otherwise.
pub fn window_bounds(n: usize, w: usize, w_max: usize) -> Vec<(usize, usize)> {
    assert!(w > 0, "window length must be positive");
    let mut out: Vec<(usize, usize)> = (0..n / w).map(|i| (i * w, (i + 1) * w)).collect();
    let rem = n % w;
    match (rem, out.last_mut()) {
        (0, _) => {}
        (1, Some(last)) if w < w_max => last.1 = n,
        _ => out.push((n - rem, n)),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(n: usize, w: usize, w_max: usize) -> Vec<usize> {
        window_bounds(n, w, w_max).iter().map(|(a, b)| b - a).collect()
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(sizes(60, 25, 26), [25, 25, 10]);
        assert_eq!(sizes(25, 25, 25), [25]);
        assert_eq!(sizes(17, 8, 9), [8, 9]);
        assert_eq!(sizes(17, 8, 8), [8, 8, 1]);
        assert_eq!(sizes(18, 8, 8), [8, 8, 2]);
        assert_eq!(sizes(3, 8, 8), [3]);
        assert_eq!(sizes(1, 8, 8), [1]);
    }
}
