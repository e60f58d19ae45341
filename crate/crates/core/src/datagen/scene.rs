use serde::{Deserialize, Serialize};

use super::DatagenError;

macro_rules! labelled_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $label),+ }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).unwrap()
            }

            pub fn parse(s: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.name() == s)
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

labelled_enum!(
    /// What the sprite does over the clip; these are the class labels.
    Action { Translate => "translate", Oscillate => "oscillate", Pulse => "pulse", Rotate => "rotate", Still => "still" }
);
labelled_enum!(
    /// Sprite shape, the "species" domain axis.
    Species { Circle => "circle", Square => "square", Triangle => "triangle", Star => "star", Cross => "cross" }
);
labelled_enum!(
    /// Camera regime: small sprite with a static camera, or a large
    /// off-centre sprite with per-frame camera jitter.
    Viewpoint { ThirdPerson => "third_person", Ego => "ego" }
);
labelled_enum!(Context { Plain => "plain", Textured => "textured", Gradient => "gradient" });

pub const NUM_ACTIONS: usize = 5;
pub const FRAME_SIZE: usize = 32;
pub const MIN_FRAMES: usize = 8;
pub const MAX_FRAMES: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub action: Action,
    pub species: Species,
    pub viewpoint: Viewpoint,
    pub context: Context,
    pub frames: usize,
    pub seed: u64,
    /// Action of a second sprite of the same species, for multi-label clips.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<Action>,
}

impl SceneSpec {
    pub fn new(action: Action, species: Species, viewpoint: Viewpoint, context: Context, frames: usize, seed: u64) -> Self {
        SceneSpec { action, species, viewpoint, context, frames, seed, partner: None }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if !(MIN_FRAMES..=MAX_FRAMES).contains(&self.frames) {
            return Err(DatagenError::InvalidSpec(format!(
                "frame count {} outside [{MIN_FRAMES}, {MAX_FRAMES}]",
                self.frames
            )));
        }
        Ok(())
    }

    /// Label set, sorted and deduplicated.
    pub fn labels(&self) -> Vec<Action> {
        let mut labels = vec![self.action];
        if let Some(p) = self.partner {
            if p != self.action {
                labels.push(p);
            }
        }
        labels.sort();
        labels
    }
}
