use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{write_csv, ExperimentError, Result, VERSION};
use crate::classifier::{predict, ClassifierModel};
use crate::datagen::{Action, Context, Species, VideoClip, Viewpoint, FRAME_SIZE};
use crate::extraction::{ExtractionConfig, Extractor};
use crate::numerics::Tensor;

/// Smallest accepted patch side, in pixels: the encoder's patch size.
pub const MIN_PATCH: usize = 4;

/// Target-class probability of each of `G x G` fixed patches, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationMap {
    pub clip_id: String,
    pub grid: usize,
    pub class: usize,
    pub scores: Vec<f64>,
}

impl LocalizationMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.grid + col]
    }

    /// Highest-scoring patch, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let i = crate::metrics::argmax(&self.scores);
        (i / self.grid, i % self.grid)
    }
}

fn bounds(size: usize, g: usize, i: usize) -> (usize, usize) {
    (i * size / g, (i + 1) * size / g)
}

/// Patch `(row, col)` of a `g x g` grid, cut from every frame and
/// nearest-neighbour upscaled back to the full frame size.
pub fn patch_video(clip: &VideoClip, g: usize, row: usize, col: usize) -> Result<VideoClip> {
    let s = clip.frames.shape().to_vec();
    let (t, h, w, ch) = (s[0], s[1], s[2], s[3]);
    if g < 2 || row >= g || col >= g {
        return Err(ExperimentError::Invalid(format!("patch ({row}, {col}) of a {g}x{g} grid")));
    }
    if h / g < MIN_PATCH || w / g < MIN_PATCH {
        return Err(ExperimentError::Invalid(format!(
            "a {g}x{g} grid over {h}x{w} frames gives patches smaller than the {MIN_PATCH}px encoder patch"
        )));
    }
    let (y0, y1) = bounds(h, g, row);
    let (x0, x1) = bounds(w, g, col);
    let src = clip.frames.data();
    let mut data = Vec::with_capacity(src.len());
    for f in 0..t {
        for y in 0..h {
            let sy = y0 + y * (y1 - y0) / h;
            for x in 0..w {
                let sx = x0 + x * (x1 - x0) / w;
                let base = ((f * h + sy) * w + sx) * ch;
                data.extend_from_slice(&src[base..base + ch]);
            }
        }
    }
    Ok(VideoClip {
        id: format!("{}@{g}:{row}:{col}", clip.id),
        frames: Tensor::new(s, data)?,
        labels: clip.labels.clone(),
        species: clip.species,
        viewpoint: clip.viewpoint,
        context: clip.context,
    })
}

/// Score every patch video of `clip` for `class`.
pub fn localize(
    clip: &VideoClip,
    model: &ClassifierModel,
    config: &ExtractionConfig,
    class: usize,
    g: usize,
    extractor: &Extractor<'_>,
) -> Result<LocalizationMap> {
    if class >= model.config.classes {
        return Err(ExperimentError::Invalid(format!("class {class} of {}", model.config.classes)));
    }
    let patches = (0..g * g).map(|i| patch_video(clip, g, i / g, i % g)).collect::<Result<Vec<_>>>()?;
    let scores = patches
        .par_iter()
        .map(|p| Ok(predict(model, &extractor.extract(p, config)?.features)?[class]))
        .collect::<Result<Vec<f64>>>()?;
    Ok(LocalizationMap { clip_id: clip.id.clone(), grid: g, class, scores })
}

/// Summed absolute deviation from the background value inside each patch,
/// over all frames, row-major. The background value is the most common
/// pixel value of frame 0, so this is meant for plain-background clips.
pub fn patch_masses(clip: &VideoClip, g: usize) -> Vec<f64> {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for v in clip.frame(0) {
        *counts.entry(v.to_bits()).or_default() += 1;
    }
    let bg = f64::from_bits(counts.into_iter().max_by_key(|&(bits, n)| (n, std::cmp::Reverse(bits))).map(|(b, _)| b).unwrap_or(0));
    let s = clip.frames.shape();
    let (h, w, ch) = (s[1], s[2], s[3]);
    let mut mass = vec![0.0; g * g];
    for f in 0..clip.len() {
        let frame = clip.frame(f);
        for r in 0..g {
            let (y0, y1) = bounds(h, g, r);
            for c in 0..g {
                let (x0, x1) = bounds(w, g, c);
                for y in y0..y1 {
                    for x in x0..x1 {
                        for k in 0..ch {
                            mass[r * g + c] += (frame[(y * w + x) * ch + k] - bg).abs();
                        }
                    }
                }
            }
        }
    }
    mass
}

/// The patch holding most of the sprite over the clip.
pub fn sprite_patch(clip: &VideoClip, g: usize) -> (usize, usize) {
    let i = crate::metrics::argmax(&patch_masses(clip, g));
    (i / g, i % g)
}

/// Patches the sprite never touches in any frame (row-major indices).
pub fn background_patches(clip: &VideoClip, g: usize) -> Vec<usize> {
    patch_masses(clip, g).iter().enumerate().filter(|(_, &m)| m == 0.0).map(|(i, _)| i).collect()
}

/// A sprite-free clip of constant frames. Its domain tags and label are
/// placeholders.
pub fn uniform_clip(id: &str, frames: usize, value: f64) -> VideoClip {
    VideoClip {
        id: id.to_string(),
        frames: Tensor::full(&[frames, FRAME_SIZE, FRAME_SIZE, 1], value),
        labels: vec![Action::Still],
        species: Species::Circle,
        viewpoint: Viewpoint::ThirdPerson,
        context: Context::Plain,
    }
}

/// One clip of a localization study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationOutcome {
    pub map: LocalizationMap,
    pub sprite_patch: (usize, usize),
    pub sprite_score: f64,
    pub best_background: f64,
    /// Sprite patch scored strictly above every sprite-free patch.
    pub hit: bool,
}

/// Localize the first `n` clips that have at least one sprite-free patch,
/// each for its own (first) label.
pub fn localization_study(
    clips: &[VideoClip],
    model: &ClassifierModel,
    config: &ExtractionConfig,
    g: usize,
    n: usize,
    extractor: &Extractor<'_>,
) -> Result<Vec<LocalizationOutcome>> {
    let mut out = Vec::new();
    for clip in clips {
        if out.len() == n {
            break;
        }
        let bg = background_patches(clip, g);
        if bg.is_empty() {
            continue;
        }
        let class = clip.label().index();
        let map = localize(clip, model, config, class, g, extractor)?;
        let sprite = sprite_patch(clip, g);
        let sprite_score = map.at(sprite.0, sprite.1);
        let best_background = bg.iter().map(|&i| map.scores[i]).fold(f64::NEG_INFINITY, f64::max);
        out.push(LocalizationOutcome { hit: sprite_score > best_background, map, sprite_patch: sprite, sprite_score, best_background });
    }
    Ok(out)
}

/// `heatmap.csv` with one `row,col,score` line per patch.
pub fn write_heatmap<C: Serialize>(path: &Path, config: &C, maps: &[LocalizationMap]) -> Result<()> {
    let emb = serde_json::json!({"version": VERSION, "config": config});
    let rows: Vec<Vec<String>> = maps
        .iter()
        .flat_map(|m| {
            (0..m.grid * m.grid).map(move |i| {
                vec![m.clip_id.clone(), m.class.to_string(), (i / m.grid).to_string(), (i % m.grid).to_string(), m.scores[i].to_string()]
            })
        })
        .collect();
    write_csv(path, &emb, &["clip", "class", "row", "col", "score"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{render_clip, SceneSpec};

    fn clip() -> VideoClip {
        render_clip("c", &SceneSpec::new(Action::Still, Species::Square, Viewpoint::ThirdPerson, Context::Plain, 8, 3)).unwrap()
    }

    #[test]
    fn patch_is_upscaled_nearest_neighbour() {
        let c = clip();
        let p = patch_video(&c, 2, 1, 0).unwrap();
        assert_eq!(p.frames.shape(), c.frames.shape());
        let (src, dst) = (c.frame(3), p.frame(3));
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(dst[y * 32 + x], src[(16 + y / 2) * 32 + x / 2]);
            }
        }
    }

    #[test]
    fn grid_limits() {
        let c = clip();
        assert!(patch_video(&c, 8, 0, 0).is_ok());
        assert!(matches!(patch_video(&c, 9, 0, 0), Err(ExperimentError::Invalid(_))));
        assert!(patch_video(&c, 1, 0, 0).is_err());
        assert!(patch_video(&c, 3, 3, 0).is_err());
    }

    #[test]
    fn sprite_patch_follows_the_sprite() {
        let c = clip();
        let (r, col) = sprite_patch(&c, 4);
        let frame = c.frame(0);
        let (y0, x0) = (r * 8, col * 8);
        let bg = frame[0].min(frame[31]).min(frame[32 * 31]);
        let peak = (y0..y0 + 8).flat_map(|y| (x0..x0 + 8).map(move |x| (y, x))).map(|(y, x)| frame[y * 32 + x]).fold(0.0, f64::max);
        assert!(peak > bg + 0.3);
    }
}
