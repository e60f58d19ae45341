//! Average precision against a brute-force oracle, a single-label mAP, and
//! the frequency-profile correlation used to explain cross-species transfer.
//!
//! `cargo run --example metrics_oracle`

use actiondiff::metrics::{acc_vs_freqcorr, average_precision, mean_average_precision, FrequencyProfile};
use actiondiff::selftest::brute_force_ap;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scores = [0.9, 0.8, 0.8, 0.4, 0.3, 0.1];
    let labels = [true, false, true, false, true, false];
    println!("AP {:.6}  brute force {:.6}", average_precision(&scores, &labels)?, brute_force_ap(&scores, &labels));

    let s = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3], vec![0.5, 0.1, 0.4], vec![0.2, 0.3, 0.5]];
    let y = vec![vec![true, false, false], vec![false, true, false], vec![false, false, true], vec![false, false, true]];
    let m = mean_average_precision(&s, &y)?;
    println!("mAP {:.4}, per class {:?}", m.map, m.per_class);

    let profiles = [[30, 10, 10], [28, 12, 10], [5, 5, 40]].map(|c| FrequencyProfile::from_counts(&c)).into_iter().collect::<Result<Vec<_>, _>>()?;
    let matrix = vec![vec![0.9, 0.8, 0.3], vec![0.75, 0.9, 0.35], vec![0.3, 0.4, 0.9]];
    let fc = acc_vs_freqcorr(&matrix, &profiles)?;
    println!("transfer accuracy vs label-profile correlation: r = {:.3}", fc.r.unwrap_or(f64::NAN));
    Ok(())
}
