//! Dense tensors, a reverse-mode tape, seeded randomness and the binary
//! tensor format. Everything numeric in the crate is built on this module.

mod graph;
pub mod gradcheck;
pub mod io;
pub mod nn;
mod optim;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Graph, Unary, Var};
pub use optim::{AdamW, ParamStore};
pub use rng::Rng;
pub use tensor::{precision, set_precision, with_precision, Precision, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch (expected {expected:?}, got {got:?})")]
    ShapeMismatch { op: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    OutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("backward needs a one-element output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("tensor format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        with_precision(Precision::F64, || {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(&[3]));
            let y = g.softmax(x, 0).unwrap();
            for &v in g.value(y).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        });
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.softmax(x, 2), Err(NumericsError::AxisOutOfRange { .. })));
    }

    #[test]
    fn mean_of_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 4], 2.5));
        let m = g.mean(x, &[1]).unwrap();
        assert_eq!(g.shape(m), &[2, 4]);
        assert!(g.value(m).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(NumericsError::ShapeMismatch { .. })));
        let m = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(m, m).is_err());
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[0.0]));
        assert!(matches!(g.ln(x), Err(NumericsError::NonFinite { op: "ln" })));
        assert!(Tensor::checked(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(NumericsError::BackwardTwice)));
    }

    #[test]
    fn backward_reaches_shared_parameter_once_per_use() {
        let mut g = Graph::new();
        let w = Tensor::from_slice(&[1], &[3.0]).unwrap();
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.param_grads()["w"].item(), 6.0);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::inference();
        let w = g.param("w", &Tensor::scalar(1.0));
        assert!(!g.requires_grad(w));
    }

    #[test]
    fn f32_mode_rounds_results() {
        with_precision(Precision::F32, || {
            let mut g = Graph::new();
            let x = g.constant(t(&[1], &[1.0]));
            let y = g.scale(x, 0.1).unwrap();
            assert_eq!(g.value(y).item(), 0.1f32 as f64);
        });
        with_precision(Precision::F64, || {
            let mut g = Graph::new();
            let x = g.constant(t(&[1], &[1.0]));
            let y = g.scale(x, 0.1).unwrap();
            assert_eq!(g.value(y).item(), 0.1);
        });
    }

    #[test]
    fn permute_and_slice() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let p = g.transpose(x).unwrap();
        assert_eq!(g.shape(p), &[3, 2]);
        assert_eq!(g.value(p).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let s = g.slice(x, 1, 1, 3).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 4.0, 5.0]);
        let c = g.concat(&[s, x], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 0.0, 1.0, 2.0, 4.0, 5.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        with_precision(Precision::F64, || {
            let f = |g: &mut Graph, x: Var| {
                let sq = g.mul(x, x)?;
                g.sum_all(sq)
            };
            let point = t(&[3], &[1.0, 2.0, 3.0]);
            let mut g = Graph::new();
            let x = g.input(point.clone());
            let y = f(&mut g, x).unwrap();
            g.backward(y).unwrap();
            assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
            assert!(grad_check(f, &point, 1e-5).unwrap() < 1e-6);
        });
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let point = t(&[1], &[1.0]);
        assert!(grad_check(|g, x| g.sum_all(x), &point, 1e-2).is_err());
    }
}
