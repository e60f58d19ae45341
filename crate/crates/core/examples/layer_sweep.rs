//! Tap each of a few denoiser layers at one timestep and compare them across
//! all four protocols.
//!
//! `cargo run --release --example layer_sweep`

use std::path::Path;

use actiondiff::backbone::{Backbone, BackboneSpec, PretrainConfig};
use actiondiff::experiments::{default_sweep_protocols, layer_sweep, pretrained_backbone, pretraining_corpus, HeadConfig, SweepConfig};
use actiondiff::extraction::{Extractor, FeatureCache};

fn backbone() -> Result<Backbone, Box<dyn std::error::Error>> {
    let corpus = pretraining_corpus()?;
    Ok(pretrained_backbone(Path::new("target/example-backbone"), &BackboneSpec::default(), &PretrainConfig::default(), &corpus)?.0)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bb = backbone()?;
    let mut cfg = SweepConfig::new(default_sweep_protocols(20, 10));
    cfg.head = HeadConfig::small();
    let ex = Extractor::new(&bb).with_cache(FeatureCache::new("target/example-cache"));
    let cells = layer_sweep(&cfg, &ex)?;
    for c in &cells {
        println!("layer {} {:>14}: {:.3}", c.layer, c.protocol, c.metric);
    }
    Ok(())
}
