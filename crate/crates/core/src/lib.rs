//! Action recognition from the intermediate activations of a frozen latent
//! video-diffusion denoiser, at desk scale.
//!
//! The pipeline: render synthetic clips ([`datagen`]), encode them with a toy
//! latent video-diffusion [`backbone`], tap one denoiser layer for a single
//! pass at a chosen timestep ([`extraction`]), and classify the pooled
//! per-frame features with a class-token transformer ([`classifier`]).
//! [`experiments`] runs the domain-shift protocols, the layer/timestep grid,
//! the ablations and patch localization on top of that.

pub mod backbone;
pub mod cli;
pub mod classifier;
pub mod datagen;
pub mod experiments;
pub mod extraction;
pub mod metrics;
pub mod numerics;
pub mod selftest;

use serde::{Deserialize, Serialize};

/// Whether a clip carries one action or a set of actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    MultiLabel,
    SingleLabel,
}
