//! Which part of the frame drives the prediction: score each patch of a
//! 2 x 2 grid by classifying the clip with only that patch visible.
//!
//! `cargo run --release --example localize`

use std::path::Path;

use actiondiff::backbone::{Backbone, BackboneSpec, PretrainConfig};
use actiondiff::cli::protocol_preset;
use actiondiff::datagen::ProtocolKind;
use actiondiff::experiments::{fit_and_evaluate, label_indices, localization_study, prepare, pretrained_backbone, pretraining_corpus, HeadConfig};
use actiondiff::classifier::TrainConfig;
use actiondiff::extraction::{ExtractionConfig, Extractor, FeatureCache};

fn backbone() -> Result<Backbone, Box<dyn std::error::Error>> {
    let corpus = pretraining_corpus()?;
    Ok(pretrained_backbone(Path::new("target/example-backbone"), &BackboneSpec::default(), &PretrainConfig::default(), &corpus)?.0)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bb = backbone()?;
    let prepared = prepare(&protocol_preset(ProtocolKind::InDomain), None)?;
    let cfg = ExtractionConfig::default().with_layer(3);
    let ex = Extractor::new(&bb).with_cache(FeatureCache::new("target/example-cache"));
    let feats: Vec<_> = ex.extract_all(&prepared.train, &cfg)?.into_iter().map(|f| f.features).collect();
    let fitted = fit_and_evaluate(&feats, &label_indices(&prepared.train), prepared.task_mode(), &HeadConfig::default(), &TrainConfig::default(), &[])?;
    let study = localization_study(&prepared.test, &fitted.model, &cfg, 2, 10, &ex)?;
    for o in &study {
        let m = &o.map;
        println!(
            "{:<28} sprite at {:?}  [{:.2} {:.2} / {:.2} {:.2}]  {}",
            m.clip_id,
            o.sprite_patch,
            m.at(0, 0),
            m.at(0, 1),
            m.at(1, 0),
            m.at(1, 1),
            if o.hit { "hit" } else { "miss" }
        );
    }
    println!("{} of {} clips localized", study.iter().filter(|o| o.hit).count(), study.len());
    Ok(())
}
