use actiondiff::numerics::{gradcheck, with_precision, Graph, Precision, Rng, Tensor};

#[test]
fn every_op_passes_grad_check() {
    let results = with_precision(Precision::F64, || gradcheck::op_suite(11)).unwrap();
    assert!(results.len() >= 30);
    for (name, err) in results {
        assert!(err < 1e-5, "{name}: relative error {err:e}");
    }
}

#[test]
fn softmax_rows_are_distributions() {
    with_precision(Precision::F64, || {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let mut g = Graph::new();
            let x = g.constant(rng.normal_tensor(&[4, 7], 3.0));
            let y = g.softmax(x, 1).unwrap();
            for row in g.value(y).data().chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    });
}

#[test]
fn layer_norm_standardizes_features() {
    with_precision(Precision::F64, || {
        let mut rng = Rng::new(6);
        let mut g = Graph::new();
        let x = rng.normal_tensor(&[10, 16], 4.0);
        let x = g.constant(x);
        let x = g.affine(x, 1.0, 3.0).unwrap();
        let y = g.layer_norm(x, 1e-5).unwrap();
        for row in g.value(y).data().chunks(16) {
            let mu = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    });
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = Rng::new(9);
        let mut g = Graph::new();
        let a = g.constant(rng.normal_tensor(&[5, 6], 1.0));
        let b = g.constant(rng.normal_tensor(&[6, 3], 1.0));
        let c = g.matmul(a, b).unwrap();
        let c = g.gelu(c).unwrap();
        let c = g.softmax(c, 1).unwrap();
        g.value(c).clone()
    };
    let (x, y): (Tensor, Tensor) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
