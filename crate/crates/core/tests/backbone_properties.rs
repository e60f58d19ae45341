use actiondiff::backbone::{
    add_noise, generative_step_to_timestep, load_checkpoint, make_schedule, pretrain_backbone, save_checkpoint, Backbone, BackboneSpec,
    PretrainConfig,
};
use actiondiff::datagen::{render_clip, Action, Context, SceneSpec, Species, Viewpoint};
use actiondiff::numerics::{with_precision, Precision, Rng};
use proptest::prelude::*;

proptest! {
    #[test]
    fn later_generative_steps_are_cleaner(total in 2usize..60, s in 1usize..60) {
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        prop_assume!(s < total);
        let a = generative_step_to_timestep(s, total, &sched).unwrap();
        let b = generative_step_to_timestep(s + 1, total, &sched).unwrap();
        prop_assert!(b <= a && a < 1000);
        prop_assert_eq!(generative_step_to_timestep(total, total, &sched).unwrap(), 0);
    }

    #[test]
    fn noising_is_the_closed_form(t in 0usize..1000, seed in 0u64..500) {
        with_precision(Precision::F64, || {
            let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
            let mut rng = Rng::new(seed);
            let z0 = rng.normal_tensor(&[3, 4], 1.0);
            let eps = rng.normal_tensor(&[3, 4], 1.0);
            let zt = add_noise(&sched, &z0, t, &eps).unwrap();
            let ab = sched.alpha_bars[t];
            for ((z, e), v) in z0.data().iter().zip(eps.data()).zip(zt.data()) {
                prop_assert!((ab.sqrt() * z + (1.0 - ab).sqrt() * e - v).abs() < 1e-12);
            }
            Ok(())
        })?;
    }
}

#[test]
fn schedule_is_monotone_and_rejects_bad_input() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    assert!(make_schedule(1, 1e-4, 0.02).is_err());
    assert!(make_schedule(10, 0.02, 1e-4).is_err());
    assert!(add_noise(&s, &actiondiff::numerics::Tensor::zeros(&[2]), 1000, &actiondiff::numerics::Tensor::zeros(&[2])).is_err());
}

#[test]
fn fingerprint_tracks_weights_and_survives_checkpoints() {
    let a = Backbone::new(BackboneSpec::default()).unwrap();
    let b = Backbone::new(BackboneSpec { seed: 1, ..BackboneSpec::default() }).unwrap();
    assert_ne!(a.fingerprint(), b.fingerprint());
    assert_eq!(a.fingerprint(), Backbone::new(BackboneSpec::default()).unwrap().fingerprint());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bb.ck");
    save_checkpoint(&path, &a).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.fingerprint(), a.fingerprint());
    assert_eq!(back.spec(), a.spec());
}

#[test]
fn short_pretraining_changes_weights_deterministically() {
    let clips: Vec<_> = (0..3)
        .map(|i| render_clip(&format!("p{i}"), &SceneSpec::new(Action::ALL[i], Species::Circle, Viewpoint::ThirdPerson, Context::Plain, 8, i as u64)).unwrap())
        .collect();
    let fresh = Backbone::new(BackboneSpec::default()).unwrap();
    let cfg = PretrainConfig { steps: 4, ..PretrainConfig::default() };
    let (x, log) = pretrain_backbone(&fresh, &clips, &cfg).unwrap();
    let (y, _) = pretrain_backbone(&fresh, &clips, &cfg).unwrap();
    assert_eq!(log.losses.len(), 4);
    assert!(log.losses.iter().all(|l| l.is_finite() && *l > 0.0));
    assert_ne!(x.fingerprint(), fresh.fingerprint());
    assert_eq!(x.fingerprint(), y.fingerprint());
    assert!(pretrain_backbone(&fresh, &[], &cfg).is_err());
}
