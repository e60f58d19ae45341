use actiondiff::classifier::{
    cosine_lr, focal_loss, load_classifier, predict, save_classifier, train_classifier, ClassifierConfig, ClassifierModel, HeadType, TrainConfig,
    PROB_EPS,
};
use actiondiff::numerics::{Rng, Tensor};
use actiondiff::TaskMode;
use proptest::prelude::*;

fn simplex() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (proptest::collection::vec(0.01f64..1.0, 2..8)).prop_flat_map(|w| {
        let n = w.len();
        let total: f64 = w.iter().sum();
        (Just(w.into_iter().map(|v| v / total).collect::<Vec<_>>()), 0..n)
    })
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
}

proptest! {
    #[test]
    fn gamma_zero_alpha_one_is_cross_entropy((p, k) in simplex()) {
        let f = focal_loss(&p, &one_hot(k, p.len()), 1.0, 0.0, TaskMode::SingleLabel).unwrap();
        prop_assert!((f + p[k].max(PROB_EPS).ln()).abs() < 1e-12);
    }

    #[test]
    fn focusing_never_increases_the_loss((p, k) in simplex(), gamma in 0.0f64..5.0) {
        let y = one_hot(k, p.len());
        let ce = focal_loss(&p, &y, 1.0, 0.0, TaskMode::SingleLabel).unwrap();
        let f = focal_loss(&p, &y, 1.0, gamma, TaskMode::SingleLabel).unwrap();
        prop_assert!(f >= 0.0 && f <= ce + 1e-15);
    }

    #[test]
    fn multi_label_loss_is_nonnegative(p in proptest::collection::vec(0.0f64..=1.0, 1..8), bits in any::<u8>()) {
        let y: Vec<f64> = (0..p.len()).map(|i| ((bits >> (i % 8)) & 1) as f64).collect();
        let f = focal_loss(&p, &y, 0.25, 2.0, TaskMode::MultiLabel).unwrap();
        prop_assert!(f.is_finite() && f >= 0.0);
    }

    #[test]
    fn cosine_schedule_decays_from_peak(total in 1usize..500, peak in 1e-5f64..1.0) {
        prop_assert!((cosine_lr(0, total, peak) - peak).abs() < 1e-15);
        prop_assert!(cosine_lr(total, total, peak).abs() < 1e-15);
        for s in 0..total {
            prop_assert!(cosine_lr(s + 1, total, peak) <= cosine_lr(s, total, peak));
        }
    }
}

#[test]
fn focal_rejects_mismatched_lengths() {
    assert!(focal_loss(&[0.5, 0.5], &[1.0], 0.25, 2.0, TaskMode::SingleLabel).is_err());
    assert!(focal_loss(&[f64::NAN], &[1.0], 0.25, 2.0, TaskMode::SingleLabel).is_err());
}

fn tiny(head: HeadType, mode: TaskMode) -> ClassifierModel {
    let mut c = ClassifierConfig::new(6, 5, mode);
    c.model_dim = 8;
    c.depth = 1;
    c.heads = 2;
    c.ff_mult = 2;
    c.head = head;
    ClassifierModel::new(c).unwrap()
}

fn sequences(n: usize, seed: u64) -> (Vec<Tensor>, Vec<Vec<usize>>) {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let len = 3 + i % 4;
            let class = i % 5;
            let data = (0..len * 6).map(|j| if j % 6 == class { 2.0 } else { 0.0 } + 0.1 * rng.normal()).collect();
            (Tensor::new(vec![len, 6], data).unwrap(), vec![class])
        })
        .unzip()
}

#[test]
fn probabilities_are_well_formed() {
    let (x, _) = sequences(4, 1);
    for head in [HeadType::Transformer, HeadType::Mlp, HeadType::Linear] {
        for t in &x {
            let p = predict(&tiny(head, TaskMode::SingleLabel), t).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5, "{head:?}");
            let q = predict(&tiny(head, TaskMode::MultiLabel), t).unwrap();
            assert!(q.iter().all(|v| (0.0..=1.0).contains(v)), "{head:?}");
        }
    }
}

#[test]
fn training_learns_a_separable_task_and_round_trips() {
    let (x, y) = sequences(40, 2);
    let cfg = TrainConfig { epochs: 20, batch_size: 8, peak_lr: 1e-2, ..TrainConfig::default() };
    let (model, log) = train_classifier(&tiny(HeadType::Transformer, TaskMode::SingleLabel), &x, &y, &cfg).unwrap();
    assert_eq!(log.epochs.len(), 20);
    assert!(log.epochs.last().unwrap().train_metric >= 0.9, "{:?}", log.epochs.last());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bundle");
    save_classifier(&path, &model).unwrap();
    let back = load_classifier(&path).unwrap();
    for t in &x[..5] {
        assert_eq!(predict(&model, t).unwrap(), predict(&back, t).unwrap());
    }

    let (again, _) = train_classifier(&tiny(HeadType::Transformer, TaskMode::SingleLabel), &x, &y, &cfg).unwrap();
    assert_eq!(predict(&again, &x[0]).unwrap(), predict(&model, &x[0]).unwrap());
}

#[test]
fn truncated_bundle_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bundle");
    save_classifier(&path, &tiny(HeadType::Mlp, TaskMode::SingleLabel)).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_classifier(&path).is_err());
}
