//! With every temporal gate forced to zero the video denoiser is an image
//! denoiser: features of a clip equal those of its frames taken one at a time.
//!
//! `cargo run --release --example gate_equivalence`

use actiondiff::backbone::{Backbone, BackboneSpec};
use actiondiff::selftest::{gate_equivalence_deviation, BoxError};

fn main() -> Result<(), BoxError> {
    let bb = Backbone::new(BackboneSpec::default())?;
    let dev = gate_equivalence_deviation(&bb, 5, 0)?;
    println!("max |video - per-frame| over 5 clips: {dev:.2e}");
    Ok(())
}
