use super::ClassifierError;
use crate::numerics::{Graph, Tensor, Var};
use crate::TaskMode;

/// Probability clamp applied before every log.
pub const PROB_EPS: f64 = 1e-7;

/// Focal loss of one prediction. With `p_t = p` for a positive and `1 - p`
/// for a negative, each one-sided term is `-alpha (1 - p_t)^gamma ln p_t`.
/// Multi-label: soft targets interpolate the two terms per class, averaged
/// over classes. Single-label: positive terms summed under the target
/// distribution.
pub fn focal_loss(p: &[f64], y: &[f64], alpha: f64, gamma: f64, mode: TaskMode) -> Result<f64, ClassifierError> {
    if p.len() != y.len() || p.is_empty() {
        return Err(ClassifierError::Shape(format!("focal_loss: {} probabilities vs {} targets", p.len(), y.len())));
    }
    if p.iter().any(|v| v.is_nan()) {
        return Err(ClassifierError::NonFinite("focal_loss probability is NaN".into()));
    }
    let term = |q: f64| {
        let q = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
        -alpha * (1.0 - q).powf(gamma) * q.ln()
    };
    Ok(match mode {
        TaskMode::MultiLabel => {
            p.iter().zip(y).map(|(&pi, &yi)| yi * term(pi) + (1.0 - yi) * term(1.0 - pi)).sum::<f64>() / p.len() as f64
        }
        TaskMode::SingleLabel => p.iter().zip(y).map(|(&pi, &yi)| yi * term(pi)).sum(),
    })
}

/// Batch mean of [`focal_loss`] on the graph; `p` and `targets` are `[B, K]`.
pub fn focal_loss_graph(g: &mut Graph, p: Var, targets: &Tensor, alpha: f64, gamma: f64, mode: TaskMode) -> Result<Var, ClassifierError> {
    let b = g.shape(p)[0] as f64;
    let y = g.constant(targets.clone());
    let pc = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let one_sided = |g: &mut Graph, q: Var| -> Result<Var, ClassifierError> {
        let ln = g.ln(q)?;
        let rest = g.affine(q, -1.0, 1.0)?;
        let w = g.powf(rest, gamma)?;
        let t = g.mul(w, ln)?;
        Ok(g.scale(t, -alpha)?)
    };
    let pos = one_sided(g, pc)?;
    let per = match mode {
        TaskMode::MultiLabel => {
            let qc = g.affine(pc, -1.0, 1.0)?;
            let neg = one_sided(g, qc)?;
            let ny = g.constant(Tensor::checked(targets.shape().to_vec(), targets.data().iter().map(|v| 1.0 - v).collect())?);
            let a = g.mul(y, pos)?;
            let c = g.mul(ny, neg)?;
            let both = g.add(a, c)?;
            return Ok(g.mean_all(both)?);
        }
        TaskMode::SingleLabel => g.mul(y, pos)?,
    };
    let total = g.sum_all(per)?;
    Ok(g.scale(total, 1.0 / b)?)
}

/// `0.5 * peak * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total: usize, peak: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let s = step.min(total) as f64 / total as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * s).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_point() {
        let v = focal_loss(&[0.5], &[1.0], 0.25, 2.0, TaskMode::SingleLabel).unwrap();
        assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn loss_vanishes_as_p_approaches_target() {
        let mut prev = f64::INFINITY;
        for p in [0.5, 0.7, 0.9, 0.99, 0.999] {
            let v = focal_loss(&[p], &[1.0], 0.25, 2.0, TaskMode::MultiLabel).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn cosine_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn graph_matches_scalar_form() {
        let p = Tensor::from_slice(&[2, 3], &[0.2, 0.7, 0.1, 0.5, 0.25, 0.25]).unwrap();
        let y = Tensor::from_slice(&[2, 3], &[0.0, 1.0, 0.0, 0.3, 0.0, 0.7]).unwrap();
        for mode in [TaskMode::MultiLabel, TaskMode::SingleLabel] {
            let mut g = Graph::inference();
            let pv = g.constant(p.clone());
            let l = focal_loss_graph(&mut g, pv, &y, 0.25, 2.0, mode).unwrap();
            let want = (0..2)
                .map(|i| focal_loss(&p.data()[i * 3..i * 3 + 3], &y.data()[i * 3..i * 3 + 3], 0.25, 2.0, mode).unwrap())
                .sum::<f64>()
                / 2.0;
            assert!((g.value(l).item() - want).abs() < 1e-6, "{mode:?}");
        }
    }
}
