use actiondiff::backbone::{Backbone, BackboneSpec, CondMode};
use actiondiff::datagen::{render_clip, Action, Context, SceneSpec, Species, Viewpoint};
use actiondiff::extraction::{cache_key, clip_digest, extract_video, window_bounds, ExtractionConfig, ExtractionError, Extractor, FeatureCache};
use proptest::prelude::*;

proptest! {
    #[test]
    fn windows_tile_the_clip(n in 1usize..200, w in 1usize..16, extra in 0usize..4) {
        let w_max = w + extra;
        let b = window_bounds(n, w, w_max);
        prop_assert_eq!(b[0].0, 0);
        prop_assert_eq!(b.last().unwrap().1, n);
        for pair in b.windows(2) {
            prop_assert_eq!(pair[0].1, pair[1].0);
        }
        for &(s, e) in &b {
            prop_assert!(e > s && e - s <= w_max);
        }
        // only the last window may differ from w
        for &(s, e) in &b[..b.len() - 1] {
            prop_assert_eq!(e - s, w);
        }
    }

    #[test]
    fn cache_keys_separate_configs(layer in 1usize..=6, step in 1usize..=30, other in 1usize..=30) {
        let a = ExtractionConfig::default().with_layer(layer).with_step(step, 30);
        let b = ExtractionConfig::default().with_layer(layer).with_step(other, 30);
        let same = cache_key(&a, 7, "clip", "d") == cache_key(&b, 7, "clip", "d");
        prop_assert_eq!(same, step == other);
        prop_assert_ne!(cache_key(&a, 7, "clip", "d"), cache_key(&a, 8, "clip", "d"));
        prop_assert_ne!(cache_key(&a, 7, "clip", "d"), cache_key(&a, 7, "clip", "e"));
    }
}

fn clip(frames: usize, seed: u64) -> actiondiff::datagen::VideoClip {
    render_clip(&format!("c{seed}"), &SceneSpec::new(Action::Oscillate, Species::Square, Viewpoint::ThirdPerson, Context::Plain, frames, seed)).unwrap()
}

#[test]
fn one_row_per_frame_at_the_layer_width() {
    let bb = Backbone::new(BackboneSpec::default()).unwrap();
    let c = clip(11, 1);
    for layer in [1, 3, 6] {
        let cfg = ExtractionConfig::default().with_layer(layer).with_window(4);
        let f = extract_video(&c, &cfg, &bb).unwrap();
        assert_eq!(f.features.shape(), &[11, bb.spec().feature_dim(layer).unwrap()]);
        assert!(f.features.data().iter().all(|v| v.is_finite()));
        assert_eq!(f.provenance.config, cfg);
    }
}

#[test]
fn extraction_is_deterministic_and_cache_transparent() {
    let bb = Backbone::new(BackboneSpec::default()).unwrap();
    let c = clip(9, 2);
    let cfg = ExtractionConfig::default().with_cond(CondMode::ActionText).with_noisy(true);
    let cold = extract_video(&c, &cfg, &bb).unwrap();
    assert_eq!(extract_video(&c, &cfg, &bb).unwrap(), cold);

    let dir = tempfile::tempdir().unwrap();
    let ex = Extractor::new(&bb).with_cache(FeatureCache::new(dir.path()));
    assert_eq!(ex.extract(&c, &cfg).unwrap(), cold);
    assert_eq!(ex.extract(&c, &cfg).unwrap(), cold);
    let cache = ex.cache().unwrap();
    assert_eq!((cache.hits(), cache.misses()), (1, 1));
}

#[test]
fn corrupted_cache_entry_is_reported() {
    let bb = Backbone::new(BackboneSpec::default()).unwrap();
    let c = clip(8, 3);
    let cfg = ExtractionConfig::default().with_layer(1);
    let dir = tempfile::tempdir().unwrap();
    let cache = FeatureCache::new(dir.path());
    let ex = Extractor::new(&bb).with_cache(FeatureCache::new(dir.path()));
    ex.extract(&c, &cfg).unwrap();
    let path = cache.path_for(&cache_key(&cfg, bb.fingerprint(), &c.id, &clip_digest(&c)));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[20] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(ex.extract(&c, &cfg), Err(ExtractionError::Corrupted { .. })));
}

#[test]
fn invalid_configs_are_rejected() {
    let bb = Backbone::new(BackboneSpec::default()).unwrap();
    let c = clip(8, 4);
    assert!(extract_video(&c, &ExtractionConfig::default().with_layer(0), &bb).is_err());
    assert!(extract_video(&c, &ExtractionConfig::default().with_layer(7), &bb).is_err());
    assert!(extract_video(&c, &ExtractionConfig::default().with_window(bb.spec().w_max + 1), &bb).is_err());
    assert!(extract_video(&c, &ExtractionConfig::default().with_step(31, 30), &bb).is_err());
}
