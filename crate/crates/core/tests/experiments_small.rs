use actiondiff::backbone::{Backbone, BackboneSpec};
use actiondiff::classifier::TrainConfig;
use actiondiff::datagen::{Context, ProtocolSpec, Species};
use actiondiff::experiments::{config_diff, derive_seed, prepare, run_protocol, GridAxes, GridConfig, HeadConfig, RunSpec, grid_search};
use actiondiff::extraction::{ExtractionConfig, Extractor, FeatureCache};
use proptest::prelude::*;
use serde_json::json;

fn tiny_run(protocol: ProtocolSpec) -> RunSpec {
    RunSpec::new(protocol)
        .with_head(HeadConfig { model_dim: 16, depth: 1, heads: 2, ff_mult: 2, ..HeadConfig::default() })
        .with_train(TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() })
        .with_extraction(ExtractionConfig::default().with_layer(3))
}

proptest! {
    #[test]
    fn config_diff_finds_exactly_the_changed_leaf(a in 0i64..100, b in 0i64..100, key in 0usize..3) {
        let names = ["x", "y", "z"];
        let base = json!({"x": 1, "y": {"z": 2, "w": [1, 2]}, "z": "s"});
        let mut other = base.clone();
        match key {
            0 => other["x"] = json!(a),
            1 => other["y"]["z"] = json!(a),
            _ => other["z"] = json!(b.to_string()),
        }
        let diff = config_diff(&base, &other);
        prop_assert!(diff.len() <= 1);
        if let Some(p) = diff.first() {
            prop_assert!(p.ends_with(names[key]) || (key == 1 && p == "y.z"));
        }
        prop_assert!(config_diff(&base, &base).is_empty());
    }

    #[test]
    fn derived_seeds_depend_on_label(base in any::<u64>()) {
        prop_assert_eq!(derive_seed(base, "a"), derive_seed(base, "a"));
        prop_assert_ne!(derive_seed(base, "a"), derive_seed(base, "b"));
    }
}

#[test]
fn protocol_run_is_reproducible_and_reports_both_splits() {
    let bb = Backbone::new(BackboneSpec::default()).unwrap();
    let run = tiny_run(ProtocolSpec::cross_species(&[Species::Circle, Species::Square], &[Species::Star]).with_counts(3, 2).with_frames(8, 10));
    let p = prepare(&run.protocol, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ex = Extractor::new(&bb).with_cache(FeatureCache::new(dir.path()));
    let (a, _) = run_protocol(&p, &run, &ex).unwrap();
    let (b, _) = run_protocol(&p, &run, &Extractor::new(&bb)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.test.count, 2);
    assert_eq!(a.test_in_domain.count, 4);
    assert_eq!(a.epochs.len(), 2);
    assert!(a.test.per_domain.contains_key("star"));
    assert!((0.0..=1.0).contains(&a.test_metric().unwrap()));
}

#[test]
fn multi_label_runs_report_map() {
    let bb = Backbone::new(BackboneSpec::default()).unwrap();
    let run = tiny_run(ProtocolSpec::in_domain(&[Species::Circle]).with_counts(6, 4).with_frames(8, 9)).with_multi_label(1.0);
    let p = prepare(&run.protocol, run.multi_label).unwrap();
    assert!(p.train.iter().all(|c| !c.labels.is_empty()));
    let (r, _) = run_protocol(&p, &run, &Extractor::new(&bb)).unwrap();
    assert!(r.baseline_accuracy.is_none());
    assert!(r.test.accuracy.is_none() || p.test.iter().all(|c| c.labels.len() == 1));
    assert!(r.test_metric().is_ok());
}

#[test]
fn grid_has_one_row_per_cell() {
    let bb = Backbone::new(BackboneSpec::default()).unwrap();
    let base = tiny_run(ProtocolSpec::cross_context(&[Context::Plain], &[Context::Textured]).with_counts(3, 2).with_frames(8, 9));
    let cfg = GridConfig { base, axes: GridAxes { layers: vec![1, 6], steps: vec![10, 30], total_steps: 30 } };
    let p = prepare(&cfg.base.protocol, None).unwrap();
    let r = grid_search(&cfg, &p, &Extractor::new(&bb)).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert_eq!(r.best_per_step.len(), 2);
    for b in &r.best_per_step {
        let best = r.rows.iter().filter(|x| x.step == b.step).map(|x| x.out_of_domain).fold(f64::MIN, f64::max);
        assert_eq!(b.out_of_domain, best);
    }
    assert!(GridConfig { axes: GridAxes { layers: vec![7], ..GridAxes::default() }, ..cfg }.axes.validate().is_err());
}
