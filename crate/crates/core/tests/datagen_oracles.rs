use actiondiff::datagen::{
    make_protocol, render_clip, render_manifest, Action, Context, Imbalance, ProtocolSpec, SceneSpec, Species,
    Viewpoint, NUM_ACTIONS,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Intensity-weighted centroid of the pixels that differ from the background.
fn centroid(frame: &[f64], background: f64) -> (f64, f64) {
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..32 {
        for x in 0..32 {
            let w = (frame[y * 32 + x] - background).abs();
            sx += w * (x as f64 + 0.5);
            sy += w * (y as f64 + 0.5);
            sw += w;
        }
    }
    (sx / sw, sy / sw)
}

#[test]
fn translate_moves_centroid_at_constant_rate() {
    for (seed, species) in [(1u64, Species::Circle), (2, Species::Star), (3, Species::Cross), (4, Species::Triangle)] {
        let spec = SceneSpec::new(Action::Translate, species, Viewpoint::ThirdPerson, Context::Plain, 24, seed);
        let clip = render_clip("t", &spec).unwrap();
        let bg = clip.frame(0)[0];
        let c: Vec<(f64, f64)> = (0..clip.len()).map(|f| centroid(clip.frame(f), bg)).collect();
        let steps: Vec<(f64, f64)> = c.windows(2).map(|w| (w[1].0 - w[0].0, w[1].1 - w[0].1)).collect();
        let n = steps.len() as f64;
        let mean = (steps.iter().map(|s| s.0).sum::<f64>() / n, steps.iter().map(|s| s.1).sum::<f64>() / n);
        assert!(mean.0.hypot(mean.1) > 0.3, "sprite barely moves: {mean:?}");
        for s in &steps {
            let dev = (s.0 - mean.0).hypot(s.1 - mean.1);
            assert!(dev < 0.5, "seed {seed}: per-frame displacement {s:?} deviates {dev} from {mean:?}");
        }
    }
}

#[test]
fn corpus_is_bit_deterministic() {
    let spec = ProtocolSpec::cross_view(false).with_counts(3, 2).with_seed(9);
    let a = make_protocol(&spec).unwrap();
    let b = make_protocol(&spec).unwrap();
    assert_eq!(a, b);
    let ca = render_manifest(&a.test).unwrap();
    let cb = render_manifest(&b.test).unwrap();
    assert_eq!(ca, cb);
}

fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn sampled_labels_recover_profiles() {
    for imbalance in [Imbalance::Uniform, Imbalance::Skewed { strength: 0.8, seed: 4 }] {
        let spec = ProtocolSpec::in_domain(&[Species::Circle, Species::Star]).with_counts(400, 1).with_imbalance(imbalance.clone());
        let p = make_protocol(&spec).unwrap();
        for (species, counts) in &p.train.class_counts {
            let profile = imbalance.profile(*species);
            let pval = chi_square_p(counts, &profile);
            assert!(pval > 0.001, "{species}: counts {counts:?} vs {profile:?}, p = {pval}");
            assert_eq!(counts.iter().sum::<usize>(), 400);
        }
    }
}

#[test]
fn uniform_profile_frequencies_near_uniform() {
    let spec = ProtocolSpec::in_domain(&[Species::Square]).with_counts(500, 1);
    let p = make_protocol(&spec).unwrap();
    let counts = p.train.class_counts[&Species::Square];
    // three standard deviations of a binomial(500, 0.2) count
    let sd = (500.0f64 * 0.2 * 0.8).sqrt();
    for c in counts {
        assert!((c as f64 - 100.0).abs() < 3.0 * sd, "{counts:?}");
    }
    assert_eq!(counts.len(), NUM_ACTIONS);
}
