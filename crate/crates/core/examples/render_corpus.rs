//! Draw a cross-view protocol, render it, and write the three splits to disk.
//!
//! `cargo run --example render_corpus -- [out_dir]`

use std::path::PathBuf;

use actiondiff::datagen::{make_protocol, render_manifest, save_corpus, Action, ProtocolSpec, Viewpoint, NUM_ACTIONS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-corpus".into()));
    let spec = ProtocolSpec::cross_view(false).with_counts(12, 6).with_seed(7);
    let splits = make_protocol(&spec)?;
    for (name, manifest) in [("train", &splits.train), ("test", &splits.test), ("test_in_domain", &splits.test_in_domain)] {
        let clips = render_manifest(manifest)?;
        save_corpus(&out.join(name), manifest, &clips)?;
        let ego = clips.iter().filter(|c| c.viewpoint == Viewpoint::Ego).count();
        println!("{name:>15}: {} clips ({ego} ego), frames per clip {}", clips.len(), clips[0].len());
    }
    println!("train label counts:");
    let mut counts = [0usize; NUM_ACTIONS];
    for e in &splits.train.entries {
        counts[e.labels[0].index()] += 1;
    }
    for a in Action::ALL {
        println!("  {:>10} {}", a.name(), counts[a.index()]);
    }
    println!("written under {}", out.display());
    Ok(())
}
