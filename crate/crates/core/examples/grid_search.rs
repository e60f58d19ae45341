//! Layer x generative-step grid on the cross-context protocol. Prints the
//! best layer per step and writes `grid.csv`, `best_per_step.csv` and
//! `report.json`.
//!
//! `cargo run --release --example grid_search -- [out_dir]`

use std::path::{Path, PathBuf};

use actiondiff::backbone::{Backbone, BackboneSpec, PretrainConfig};
use actiondiff::cli::protocol_preset;
use actiondiff::datagen::ProtocolKind;
use actiondiff::experiments::{grid_search, prepare, pretrained_backbone, pretraining_corpus, write_grid, GridAxes, GridConfig, HeadConfig, RunSpec};
use actiondiff::extraction::{Extractor, FeatureCache};

fn backbone() -> Result<Backbone, Box<dyn std::error::Error>> {
    let corpus = pretraining_corpus()?;
    Ok(pretrained_backbone(Path::new("target/example-backbone"), &BackboneSpec::default(), &PretrainConfig::default(), &corpus)?.0)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-grid".into()));
    let bb = backbone()?;
    let cfg = GridConfig {
        base: RunSpec::new(protocol_preset(ProtocolKind::CrossContext)).with_head(HeadConfig::small()),
        axes: GridAxes::default(),
    };
    let prepared = prepare(&cfg.base.protocol, None)?;
    let ex = Extractor::new(&bb).with_cache(FeatureCache::new("target/example-cache"));
    let result = grid_search(&cfg, &prepared, &ex)?;
    println!("step  in-domain (layer)  out-of-domain (layer)");
    for b in &result.best_per_step {
        println!("{:>4}  {:.3} ({})          {:.3} ({})", b.step, b.in_domain, b.in_domain_layer, b.out_of_domain, b.out_of_domain_layer);
    }
    println!("{}", result.observation);
    write_grid(&out, &result)?;
    println!("written under {}", out.display());
    Ok(())
}
