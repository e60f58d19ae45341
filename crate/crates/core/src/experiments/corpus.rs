use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::Result;
use crate::backbone::{load_checkpoint, pretrain_backbone, save_checkpoint, Backbone, BackboneSpec, PretrainConfig, PretrainLog};
use crate::datagen::{render_clip, Action, Context, SceneSpec, Species, VideoClip, Viewpoint};

/// The fixed 16-clip mixed corpus the backbone is pretrained on: every
/// action, species and context, a quarter of it egocentric.
pub fn pretraining_corpus() -> Result<Vec<VideoClip>> {
    (0..16usize)
        .map(|i| {
            let spec = SceneSpec::new(
                Action::ALL[i % 5],
                Species::ALL[(i / 5 + i) % 5],
                if i % 4 == 3 { Viewpoint::Ego } else { Viewpoint::ThirdPerson },
                Context::ALL[i % 3],
                16,
                1000 + i as u64,
            );
            Ok(render_clip(&format!("p{i}"), &spec)?)
        })
        .collect()
}

fn checkpoint_paths(dir: &Path, spec: &BackboneSpec, cfg: &PretrainConfig, corpus: &[VideoClip]) -> Result<(PathBuf, PathBuf)> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec)?);
    h.update(serde_json::to_vec(cfg)?);
    for c in corpus {
        h.update(c.id.as_bytes());
        for v in c.frames.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    let tag = hex::encode(&h.finalize()[..8]);
    Ok((dir.join(format!("backbone-{tag}.ck")), dir.join(format!("backbone-{tag}.log.json"))))
}

/// Pretrain `spec` on `corpus`, or load the result of an identical earlier
/// call from `dir`. The file name hashes the backbone spec, the config and the clips.
pub fn pretrained_backbone(dir: &Path, spec: &BackboneSpec, cfg: &PretrainConfig, corpus: &[VideoClip]) -> Result<(Backbone, PretrainLog)> {
    let (ck, log_path) = checkpoint_paths(dir, spec, cfg, corpus)?;
    if ck.exists() && log_path.exists() {
        let log: PretrainLog = serde_json::from_slice(&fs::read(&log_path)?)?;
        return Ok((load_checkpoint(&ck)?, log));
    }
    fs::create_dir_all(dir)?;
    let (bb, log) = pretrain_backbone(&Backbone::new(spec.clone())?, corpus, cfg)?;
    save_checkpoint(&ck, &bb)?;
    super::write_json(&log_path, &log)?;
    Ok((bb, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_covers_every_axis() {
        let c = pretraining_corpus().unwrap();
        assert_eq!(c.len(), 16);
        for a in Action::ALL {
            assert!(c.iter().any(|x| x.label() == *a));
        }
        for s in Species::ALL {
            assert!(c.iter().any(|x| x.species == *s));
        }
        assert_eq!(c.iter().filter(|x| x.viewpoint == Viewpoint::Ego).count(), 4);
    }

    #[test]
    fn second_call_loads_the_same_weights() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BackboneSpec::default();
        let cfg = PretrainConfig { steps: 2, ..Default::default() };
        let corpus = &pretraining_corpus().unwrap()[..2];
        let (a, la) = pretrained_backbone(dir.path(), &spec, &cfg, corpus).unwrap();
        let (b, lb) = pretrained_backbone(dir.path(), &spec, &cfg, corpus).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(la, lb);
        assert_ne!(a.fingerprint(), Backbone::new(spec).unwrap().fingerprint());
    }
}
