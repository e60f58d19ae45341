use serde::{Deserialize, Serialize};

use super::BackboneError;
use crate::numerics::Tensor;

/// Linear-beta forward process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, BackboneError> {
    if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(BackboneError::InvalidSpec(format!(
            "schedule needs T >= 2 and 0 < beta_start < beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> =
        (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn add_noise(schedule: &NoiseSchedule, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor, BackboneError> {
    if t >= schedule.steps() {
        return Err(BackboneError::TimestepOutOfRange { t, steps: schedule.steps() });
    }
    if z0.shape() != eps.shape() {
        return Err(BackboneError::Shape(format!("add_noise: z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bars[t];
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(&z, &e)| a * z + s * e).collect();
    Ok(Tensor::checked(z0.shape().to_vec(), data)?)
}

/// Generative step `s` of `total` mapped to a diffusion index:
/// `round((T - 1) * (1 - s / total))`, so the last step is the cleanest.
pub fn generative_step_to_timestep(s: usize, total: usize, schedule: &NoiseSchedule) -> Result<usize, BackboneError> {
    if s == 0 || s > total {
        return Err(BackboneError::InvalidSpec(format!("generative step {s} outside 1..={total}")));
    }
    let t = (schedule.steps() - 1) as f64 * (1.0 - s as f64 / total as f64);
    Ok(t.round() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_products() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-12);
        assert!((s.alpha_bars[1] - 0.72).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 0.1).is_err());
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
    }

    #[test]
    fn default_schedule_decreasing_and_products_hold() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for t in 0..1000 {
            prod *= 1.0 - s.betas[t];
            assert!((s.alpha_bars[t] - prod).abs() < 1e-6);
            if t > 0 {
                assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
                assert!(s.betas[t] > s.betas[t - 1]);
            }
        }
    }

    #[test]
    fn step_mapping() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(generative_step_to_timestep(30, 30, &s).unwrap(), 0);
        assert_eq!(generative_step_to_timestep(20, 30, &s).unwrap(), 333);
        assert_eq!(generative_step_to_timestep(1, 30, &s).unwrap(), 966);
        assert!(generative_step_to_timestep(0, 30, &s).is_err());
        assert!(generative_step_to_timestep(31, 30, &s).is_err());
    }

    #[test]
    fn zero_latent_is_scaled_noise() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let eps = Tensor::from_slice(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let z = add_noise(&s, &Tensor::zeros(&[3]), 500, &eps).unwrap();
        let k = (1.0 - s.alpha_bars[500]).sqrt();
        for (a, e) in z.data().iter().zip(eps.data()) {
            assert!((a - k * e).abs() < 1e-6);
        }
        assert!(add_noise(&s, &Tensor::zeros(&[3]), 1000, &eps).is_err());
        assert!(add_noise(&s, &Tensor::zeros(&[2]), 0, &eps).is_err());
    }
}
