//! Cross-species transfer: frozen backbone features, transformer head with
//! focal loss, evaluated on unseen species and on the training species.
//!
//! `cargo run --release --example train_classifier`
//!
//! The first run pretrains the backbone (a few minutes) and caches it under
//! `target/example-backbone`.

use std::path::Path;

use actiondiff::backbone::{Backbone, BackboneSpec, PretrainConfig};
use actiondiff::cli::protocol_preset;
use actiondiff::datagen::ProtocolKind;
use actiondiff::experiments::{prepare, pretrained_backbone, pretraining_corpus, run_protocol, RunSpec};
use actiondiff::extraction::{Extractor, FeatureCache};

fn backbone() -> Result<Backbone, Box<dyn std::error::Error>> {
    let corpus = pretraining_corpus()?;
    Ok(pretrained_backbone(Path::new("target/example-backbone"), &BackboneSpec::default(), &PretrainConfig::default(), &corpus)?.0)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bb = backbone()?;
    let run = RunSpec::new(protocol_preset(ProtocolKind::CrossSpecies));
    let prepared = prepare(&run.protocol, None)?;
    let ex = Extractor::new(&bb).with_cache(FeatureCache::new("target/example-cache"));
    let (report, _model) = run_protocol(&prepared, &run, &ex)?;
    println!("layer {} at timestep {}", run.extraction.layer, report.timestep);
    println!("train accuracy        {:.3}", report.train_metric);
    println!("unseen species        {:.3}", report.test_metric()?);
    println!("training species      {:.3}", report.in_domain_metric()?);
    println!("majority baseline     {:.3}", report.baseline_accuracy.unwrap_or(f64::NAN));
    for (domain, b) in &report.test.per_domain {
        println!("  {domain:>8}: {} clips, accuracy {:.3}", b.count, b.accuracy.unwrap_or(f64::NAN));
    }
    Ok(())
}
