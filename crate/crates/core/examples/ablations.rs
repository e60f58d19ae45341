//! One-factor ablations around the default run: head type, window size,
//! loss and conditioning, each changed alone.
//!
//! `cargo run --release --example ablations -- [out_dir]`

use std::path::{Path, PathBuf};

use actiondiff::backbone::{Backbone, BackboneSpec, PretrainConfig};
use actiondiff::cli::protocol_preset;
use actiondiff::datagen::ProtocolKind;
use actiondiff::experiments::{
    prepare, pretrained_backbone, pretraining_corpus, run_ablations, write_ablations, AblationAxes, AblationConfig, HeadConfig, RunSpec,
};

fn backbone() -> Result<Backbone, Box<dyn std::error::Error>> {
    let corpus = pretraining_corpus()?;
    Ok(pretrained_backbone(Path::new("target/example-backbone"), &BackboneSpec::default(), &PretrainConfig::default(), &corpus)?.0)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-ablations".into()));
    let bb = backbone()?;
    let cfg = AblationConfig {
        base: RunSpec::new(protocol_preset(ProtocolKind::CrossSpecies).with_counts(40, 30)).with_head(HeadConfig::small()),
        axes: AblationAxes::default(),
    };
    let prepared = prepare(&cfg.base.protocol, None)?;
    let rows = run_ablations(&cfg, &prepared, &bb, Some(Path::new("target/example-cache")))?;
    for r in &rows {
        let changed = if r.changed.is_empty() { "(base)".to_string() } else { r.changed.join(",") };
        println!("{:>8} = {:<12} {:.3}   {changed}", r.axis, r.value, r.metric);
    }
    write_ablations(&out, &cfg, &bb, &rows)?;
    println!("written under {}", out.display());
    Ok(())
}
