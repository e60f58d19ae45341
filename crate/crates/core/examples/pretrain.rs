//! Pretrain the toy video-diffusion backbone on the synthetic corpus with the
//! noise-prediction objective and save the checkpoint.
//!
//! `cargo run --example pretrain -- [steps] [out.ck]`

use std::path::PathBuf;
use std::time::Instant;

use actiondiff::backbone::{pretrain_backbone, save_checkpoint, Backbone, BackboneSpec, PretrainConfig};
use actiondiff::experiments::pretraining_corpus;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/example-backbone.ck".into()));
    let corpus = pretraining_corpus()?;
    let fresh = Backbone::new(BackboneSpec::default())?;
    let t = Instant::now();
    let (trained, log) = pretrain_backbone(&fresh, &corpus, &PretrainConfig { steps, ..PretrainConfig::default() })?;
    let n = (steps / 10).max(1);
    println!("{steps} steps on {} clips in {:.0} s", corpus.len(), t.elapsed().as_secs_f64());
    println!("median loss: first {n} steps {:.4}, last {n} steps {:.4}", log.head_median(n), log.tail_median(n));
    println!("fingerprint {} -> {}", trained.fingerprint_hex(), fresh.fingerprint_hex());
    save_checkpoint(&out, &trained)?;
    println!("saved {}", out.display());
    Ok(())
}
