//! Procedural synthetic video corpus with species, viewpoint and context axes.

mod protocol;
mod render;
mod scene;

use std::fs;
use std::path::Path;

use rayon::prelude::*;

pub use protocol::{
    make_protocol, multi_label_variant, DatasetManifest, DomainSet, Imbalance, ManifestEntry, ProtocolKind,
    ProtocolSpec, ProtocolSplits, Split,
};
pub use render::render_clip;
pub use scene::{Action, Context, SceneSpec, Species, Viewpoint, FRAME_SIZE, MAX_FRAMES, MIN_FRAMES, NUM_ACTIONS};

use crate::numerics::io::{self, Dtype};
use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error("impossible split: {0}")]
    ImpossibleSplit(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A rendered clip: frames `T x H x W x C` in `[0, 1]`, labels and domain tags.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub frames: Tensor,
    pub labels: Vec<Action>,
    pub species: Species,
    pub viewpoint: Viewpoint,
    pub context: Context,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.frames.numel() / self.len()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.frame_len();
        &self.frames.data()[i * n..(i + 1) * n]
    }

    /// Frames `[start, end)` as a tensor.
    pub fn frames_range(&self, start: usize, end: usize) -> Tensor {
        self.frames.slice_leading(start, end).expect("frame range within clip")
    }

    /// Primary label (single-label tasks).
    pub fn label(&self) -> Action {
        self.labels[0]
    }
}

/// Render every entry of a manifest, in manifest order.
pub fn render_manifest(manifest: &DatasetManifest) -> Result<Vec<VideoClip>, DatagenError> {
    manifest.entries.par_iter().map(|e| render_clip(&e.id, &e.scene)).collect()
}

/// Write a manifest as `manifest.json` and its clips as `<id>.adt` under `dir`.
pub fn save_corpus(dir: &Path, manifest: &DatasetManifest, clips: &[VideoClip]) -> Result<(), DatagenError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
    for c in clips {
        fs::write(dir.join(format!("{}.adt", c.id)), io::to_bytes(&c.frames, Dtype::F32))?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, DatagenError> {
    let m: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    m.validate()?;
    Ok(m)
}

/// Load clips saved by [`save_corpus`], re-rendering any that are missing.
pub fn load_corpus(dir: &Path) -> Result<(DatasetManifest, Vec<VideoClip>), DatagenError> {
    let manifest = load_manifest(dir)?;
    let clips = manifest
        .entries
        .iter()
        .map(|e| {
            let path = dir.join(format!("{}.adt", e.id));
            if !path.exists() {
                return render_clip(&e.id, &e.scene);
            }
            let frames = io::from_bytes(&fs::read(path)?)?;
            Ok(VideoClip {
                id: e.id.clone(),
                frames,
                labels: e.labels.clone(),
                species: e.scene.species,
                viewpoint: e.scene.viewpoint,
                context: e.scene.context,
            })
        })
        .collect::<Result<Vec<_>, DatagenError>>()?;
    Ok((manifest, clips))
}
