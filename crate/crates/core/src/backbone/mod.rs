//! Toy latent video-diffusion model: frozen patch encoder, linear-beta
//! schedule, condition encoder and a two-level temporal U-Net whose six
//! encoder-side layers can be tapped.

mod checkpoint;
mod condition;
mod encoder;
mod pretrain;
mod schedule;
mod spec;
mod unet;

use std::hash::Hasher;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use condition::{name_embedding, CondMode, Condition};
pub use encoder::Encoder;
pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainLog};
pub use schedule::{add_noise, generative_step_to_timestep, make_schedule, NoiseSchedule};
pub use spec::{BackboneSpec, TEMPORAL_BLOCKS};

use crate::numerics::{Graph, NumericsError, ParamStore, Rng, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error("tap layer {layer} outside 1..={layers}")]
    TapOutOfRange { layer: usize, layers: usize },
    #[error("window of {frames} frames exceeds w_max {w_max}")]
    WindowTooLong { frames: usize, w_max: usize },
    #[error("timestep {t} outside schedule of {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("{0} conditioning needs a payload")]
    MissingPayload(&'static str),
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-finite pretraining loss at step {step} (t = {t}, clip {clip})")]
    NonFiniteLoss { step: usize, t: usize, clip: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Denoiser output; `tapped` is present when a tap layer was requested.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseOutput {
    pub eps: Tensor,
    pub tapped: Option<Tensor>,
}

/// Immutable after construction; cheap to share across threads by reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    weights: ParamStore,
    encoder: Encoder,
    schedule: NoiseSchedule,
    fingerprint: u64,
}

impl Backbone {
    /// Freshly initialized weights, seeded by `spec.seed`.
    pub fn new(spec: BackboneSpec) -> Result<Backbone, BackboneError> {
        spec.validate()?;
        let rng = Rng::new(spec.seed).split("backbone");
        let mut weights = ParamStore::new();
        unet::init_weights(&mut weights, &spec, &rng.split("unet"));
        condition::init_weights(&mut weights, &spec, &rng.split("cond"));
        Self::from_parts(spec, weights)
    }

    pub(crate) fn from_parts(spec: BackboneSpec, weights: ParamStore) -> Result<Backbone, BackboneError> {
        spec.validate()?;
        let schedule = make_schedule(spec.diffusion_steps, spec.beta_start, spec.beta_end)?;
        let encoder = Encoder::new(&spec);
        let mut b = Backbone { spec, weights, encoder, schedule, fingerprint: 0 };
        b.fingerprint = b.compute_fingerprint();
        Ok(b)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn weights(&self) -> &ParamStore {
        &self.weights
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// 64-bit FNV-1a over the canonical spec JSON and every named weight.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn fingerprint_hex(&self) -> String {
        format!("{:016x}", self.fingerprint)
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut h = fnv::FnvHasher::default();
        h.write(&serde_json::to_vec(&self.spec).expect("spec serializes"));
        let encoder = [("encoder.proj", &self.encoder.proj), ("encoder.bias", &self.encoder.bias)];
        for (name, t) in self.weights.iter().chain(encoder) {
            h.write(name.as_bytes());
            h.write_u8(0);
            for &d in t.shape() {
                h.write_u64(d as u64);
            }
            for &v in t.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Same weights with every alpha gate set to 1.0 (temporal paths off).
    pub fn set_image_mode(&self) -> Backbone {
        self.with_alphas(vec![1.0; TEMPORAL_BLOCKS.len()]).expect("unit gates are valid")
    }

    pub fn with_alphas(&self, alphas: Vec<f64>) -> Result<Backbone, BackboneError> {
        let spec = BackboneSpec { alphas, ..self.spec.clone() };
        Self::from_parts(spec, self.weights.clone())
    }

    pub fn is_image_mode(&self) -> bool {
        self.spec.alphas.iter().all(|&a| a == 1.0)
    }

    /// `[T, H, W, C]` frames to `[T, h, w, c]` latents.
    pub fn encode_frames(&self, frames: &Tensor) -> Result<Tensor, BackboneError> {
        self.encoder.encode(frames)
    }

    pub fn decode_latents(&self, latents: &Tensor) -> Result<Tensor, BackboneError> {
        self.encoder.decode(latents)
    }

    /// Condition tokens `[N, cond_dim]`.
    pub fn encode_condition(&self, cond: &Condition) -> Result<Tensor, BackboneError> {
        let mut g = Graph::inference();
        let v = condition::tokens(&mut g, &self.weights, &self.spec, cond)?;
        Ok(g.value(v).clone())
    }

    fn check_input(&self, latents: &Tensor, t: usize, cond: &Tensor) -> Result<(), BackboneError> {
        let s = latents.shape();
        let [h, w, c] = self.spec.latent_shape();
        if s.len() != 4 || s[1..] != [h, w, c] || s[0] == 0 {
            return Err(BackboneError::Shape(format!("latents {s:?}, expected [M, {h}, {w}, {c}]")));
        }
        if s[0] > self.spec.w_max {
            return Err(BackboneError::WindowTooLong { frames: s[0], w_max: self.spec.w_max });
        }
        if t >= self.schedule.steps() {
            return Err(BackboneError::TimestepOutOfRange { t, steps: self.schedule.steps() });
        }
        if cond.rank() != 2 || cond.shape()[1] != self.spec.cond_dim {
            return Err(BackboneError::Shape(format!("condition tokens {:?}, expected [N, {}]", cond.shape(), self.spec.cond_dim)));
        }
        Ok(())
    }

    /// Full denoiser pass, optionally capturing the output of layer `tap`.
    pub fn denoise_forward(
        &self,
        latents: &Tensor,
        t: usize,
        cond: &Tensor,
        tap: Option<usize>,
    ) -> Result<DenoiseOutput, BackboneError> {
        self.check_input(latents, t, cond)?;
        let taps: Vec<usize> = tap.into_iter().collect();
        let (eps, mut tapped) = unet::run(&self.weights, &self.spec, latents, t, cond, &taps, true)?;
        Ok(DenoiseOutput { eps: eps.unwrap(), tapped: tapped.pop() })
    }

    /// Activations of each layer in `layers` (`[M, h_l, w_l, c_l]`), from a
    /// pass that stops after the deepest of them. Equal to the taps of
    /// [`Backbone::denoise_forward`].
    pub fn tap_forward(&self, latents: &Tensor, t: usize, cond: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>, BackboneError> {
        self.check_input(latents, t, cond)?;
        if layers.is_empty() {
            return Ok(Vec::new());
        }
        let (_, taps) = unet::run(&self.weights, &self.spec, latents, t, cond, layers, false)?;
        Ok(taps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Backbone {
        Backbone::new(BackboneSpec::default()).unwrap()
    }

    #[test]
    fn shapes_follow_spec() {
        let b = small();
        let mut r = Rng::new(3);
        let z = r.normal_tensor(&[3, 8, 8, 4], 1.0);
        let c = b.encode_condition(&Condition::None).unwrap();
        for layer in 1..=6 {
            let out = b.denoise_forward(&z, 100, &c, Some(layer)).unwrap();
            assert_eq!(out.eps.shape(), z.shape());
            let [h, w, ch] = b.spec().layer_extents(layer).unwrap();
            assert_eq!(out.tapped.unwrap().shape(), &[3, h, w, ch]);
        }
        assert!(b.denoise_forward(&z, 100, &c, Some(7)).is_err());
        assert!(b.denoise_forward(&z, 100, &c, Some(0)).is_err());
        assert!(b.denoise_forward(&z, 1000, &c, None).is_err());
        let long = r.normal_tensor(&[9, 8, 8, 4], 1.0);
        assert!(matches!(b.denoise_forward(&long, 1, &c, None), Err(BackboneError::WindowTooLong { .. })));
    }

    #[test]
    fn tap_forward_matches_full_pass() {
        let b = small();
        let mut r = Rng::new(4);
        let z = r.normal_tensor(&[2, 8, 8, 4], 1.0);
        let c = b.encode_condition(&Condition::ActionText(vec!["rotate".into()])).unwrap();
        let taps = b.tap_forward(&z, 333, &c, &[3, 1]).unwrap();
        for (layer, early) in [3, 1].iter().zip(&taps) {
            let full = b.denoise_forward(&z, 333, &c, Some(*layer)).unwrap().tapped.unwrap();
            assert_eq!(&full, early);
        }
    }

    #[test]
    fn condition_modes() {
        let b = small();
        let none = b.encode_condition(&Condition::None).unwrap();
        assert_eq!(none.shape(), &[1, 32]);
        assert!(none.data().iter().all(|&v| v == 0.0));
        let one = b.encode_condition(&Condition::ActionText(vec!["pulse".into()])).unwrap();
        assert_eq!(one.data(), name_embedding(b.spec(), "pulse").data());
        assert!(b.encode_condition(&Condition::ActionText(vec![])).is_err());
        let frame = Rng::new(1).uniform_tensor(&[32, 32, 1], 0.0, 1.0);
        let a = b.encode_condition(&Condition::Frame(frame.clone())).unwrap();
        assert_eq!(a.shape(), &[16, 32]);
        assert_eq!(a, b.encode_condition(&Condition::Frame(frame)).unwrap());
    }

    #[test]
    fn image_mode_copies() {
        let b = small();
        let img = b.set_image_mode();
        assert_ne!(img.fingerprint(), b.fingerprint());
        assert!(b.spec().alphas.iter().all(|&a| a == 0.5));
        assert_eq!(img.set_image_mode(), img);
        assert!(img.is_image_mode());
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let b = small();
        let mut w = b.weights().clone();
        let again = Backbone::from_parts(b.spec().clone(), w.clone()).unwrap();
        assert_eq!(again.fingerprint(), b.fingerprint());
        w.get_mut("l3.c1.w").unwrap().data_mut()[7] += 1e-3;
        let moved = Backbone::from_parts(b.spec().clone(), w).unwrap();
        assert_ne!(moved.fingerprint(), b.fingerprint());
        let reseeded = Backbone::new(BackboneSpec { seed: 1, ..BackboneSpec::default() }).unwrap();
        assert_ne!(reseeded.fingerprint(), b.fingerprint());
    }
}
