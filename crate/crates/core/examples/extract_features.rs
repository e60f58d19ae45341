//! Tap one denoiser layer at a chosen generative step and pool it into
//! per-frame features, through the on-disk cache.
//!
//! `cargo run --example extract_features -- [layer] [step]`

use std::time::Instant;

use actiondiff::backbone::{Backbone, BackboneSpec};
use actiondiff::datagen::{render_clip, Action, Context, SceneSpec, Species, Viewpoint};
use actiondiff::extraction::{window_bounds, ExtractionConfig, Extractor, FeatureCache};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let layer: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(6);
    let step: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let backbone = Backbone::new(BackboneSpec::default())?;
    let clip = render_clip("demo", &SceneSpec::new(Action::Rotate, Species::Star, Viewpoint::ThirdPerson, Context::Gradient, 20, 3))?;
    let cfg = ExtractionConfig::default().with_layer(layer).with_step(step, 30);
    println!("generative step {step}/30 -> diffusion timestep {}", cfg.timestep(&backbone)?);
    println!("windows over {} frames: {:?}", clip.len(), window_bounds(clip.len(), cfg.window, backbone.spec().w_max));

    let ex = Extractor::new(&backbone).with_cache(FeatureCache::new("target/example-cache"));
    for round in ["cold", "warm"] {
        let t = Instant::now();
        let seq = ex.extract(&clip, &cfg)?;
        println!("{round}: features {:?} in {:.2} s", seq.features.shape(), t.elapsed().as_secs_f64());
    }
    let c = ex.cache().expect("cache attached");
    println!("cache hits {} misses {}", c.hits(), c.misses());
    Ok(())
}
