use serde::{Deserialize, Serialize};

use super::{BackboneError, BackboneSpec};
use crate::numerics::{nn, Graph, ParamStore, Rng, Tensor, Var};

/// How the denoiser's cross-attention context is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    Frame,
    ActionText,
    None,
}

impl CondMode {
    pub const ALL: [CondMode; 3] = [CondMode::None, CondMode::ActionText, CondMode::Frame];

    pub fn name(self) -> &'static str {
        match self {
            CondMode::Frame => "frame",
            CondMode::ActionText => "action_text",
            CondMode::None => "none",
        }
    }

    /// Accepts `action` as shorthand for `action_text`.
    pub fn parse(s: &str) -> Option<CondMode> {
        match s {
            "frame" => Some(CondMode::Frame),
            "action" | "action_text" => Some(CondMode::ActionText),
            "none" => Some(CondMode::None),
            _ => None,
        }
    }
}

impl std::fmt::Display for CondMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Condition payload for one window.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    /// The window's middle frame, `[H, W, C]`.
    Frame(Tensor),
    /// Action names, embedded and averaged.
    ActionText(Vec<String>),
    None,
}

impl Condition {
    pub fn mode(&self) -> CondMode {
        match self {
            Condition::Frame(_) => CondMode::Frame,
            Condition::ActionText(_) => CondMode::ActionText,
            Condition::None => CondMode::None,
        }
    }
}

pub(crate) fn init_weights(store: &mut ParamStore, spec: &BackboneSpec, rng: &Rng) {
    let k = spec.patch * spec.patch * spec.frame[2];
    nn::init_linear(store, rng, "cond.patch", k, spec.cond_dim, 1.0);
}

/// Seeded embedding of one action name.
pub fn name_embedding(spec: &BackboneSpec, name: &str) -> Tensor {
    let mut r = Rng::new(spec.seed).split(&format!("action:{name}"));
    r.normal_tensor(&[spec.cond_dim], 1.0)
}

/// Tokens `[N, cond_dim]` on the graph. Frame tokens come from a patch
/// embedding of the frame followed by 2x2 average pooling; the other modes
/// produce a single constant token.
pub(crate) fn tokens(g: &mut Graph, w: &ParamStore, spec: &BackboneSpec, cond: &Condition) -> Result<Var, BackboneError> {
    let d = spec.cond_dim;
    match cond {
        Condition::None => Ok(g.constant(Tensor::zeros(&[1, d]))),
        Condition::ActionText(names) => {
            if names.is_empty() {
                return Err(BackboneError::MissingPayload("action_text"));
            }
            let mut acc = vec![0.0; d];
            for n in names {
                for (a, v) in acc.iter_mut().zip(name_embedding(spec, n).data()) {
                    *a += v;
                }
            }
            let mean: Vec<f64> = acc.iter().map(|a| a / names.len() as f64).collect();
            Ok(g.constant(Tensor::checked(vec![1, d], mean)?))
        }
        Condition::Frame(frame) => {
            let [fh, fw, fc] = spec.frame;
            if frame.shape() != [fh, fw, fc] {
                return Err(BackboneError::Shape(format!("condition frame {:?}, expected {:?}", frame.shape(), spec.frame)));
            }
            let p = spec.patch;
            let (lh, lw) = (fh / p, fw / p);
            let x = g.constant(frame.clone());
            let x = g.reshape(x, &[lh, p, lw, p * fc])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            let x = g.reshape(x, &[lh * lw, p * p * fc])?;
            let x = nn::linear(g, w, "cond.patch", x)?;
            let x = g.silu(x)?;
            let x = g.reshape(x, &[lh / 2, 2, lw / 2, 2, d])?;
            let x = g.mean(x, &[1, 3])?;
            Ok(g.reshape(x, &[lh * lw / 4, d])?)
        }
    }
}

