//! Closed-form linear-Gaussian reference model for validating the iterative
//! decoder: identity encoder/decoder and an exact Gaussian-prior MMSE
//! shrinkage in place of the learned denoiser.
//!
//! For a prior `z ~ N(0, prior_variance I)` observed under noise of variance
//! `noise_variance`, the MMSE estimate is linear shrinkage, so the prior
//! direction, the marginal score, and the fixed point of the update rule all
//! have closed forms.

use ndarray::Array3;

use super::{IsecModel, LikelihoodEval};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct LinearGaussianReference {
    pub prior_variance: f64,
    pub noise_variance: f64,
}

impl LinearGaussianReference {
    pub fn new(prior_variance: f64, noise_variance: f64) -> Self {
        assert!(prior_variance > 0.0 && noise_variance > 0.0);
        LinearGaussianReference {
            prior_variance,
            noise_variance,
        }
    }

    /// Shrinkage coefficient `c`: the prior direction is `-c * z`.
    pub fn shrinkage(&self) -> f64 {
        self.noise_variance / (self.prior_variance + self.noise_variance)
    }

    /// MMSE estimate of the clean codeword given an observation.
    pub fn mmse_estimate(&self, observed: &Array3<f64>) -> Array3<f64> {
        let gain = self.prior_variance / (self.prior_variance + self.noise_variance);
        observed.mapv(|v| v * gain)
    }

    /// Score of the marginal density of observations:
    /// `-z / (prior_variance + noise_variance)`.
    pub fn marginal_score(&self, observed: &Array3<f64>) -> Array3<f64> {
        let total = self.prior_variance + self.noise_variance;
        observed.mapv(|v| -v / total)
    }

    /// Fixed point of the update rule for channel noise `sigma` and effective
    /// prior weight `alpha_scaled`: the ridge solution
    /// `y / (1 + sigma^2 * alpha_scaled * c)`.
    pub fn map_solution(&self, received: &Array3<f64>, sigma: f64, alpha_scaled: f64) -> Array3<f64> {
        let denom = 1.0 + sigma * sigma * alpha_scaled * self.shrinkage();
        received.mapv(|v| v / denom)
    }
}

impl IsecModel for LinearGaussianReference {
    fn likelihood_eval(
        &self,
        z: &Array3<f64>,
        received: &Array3<f64>,
        sigma: f64,
    ) -> Result<LikelihoodEval> {
        let inv_var = 1.0 / (sigma * sigma);
        let mut nll = 0.0;
        let mut ascent = z.clone();
        for (a, (&zv, &yv)) in ascent.iter_mut().zip(z.iter().zip(received.iter())) {
            let r = yv - zv;
            nll += 0.5 * inv_var * r * r;
            *a = r * inv_var;
        }
        Ok(LikelihoodEval {
            ascent,
            nll,
            decoded: z.clone(),
        })
    }

    fn prior_direction(&self, z: &Array3<f64>) -> Result<Option<Array3<f64>>> {
        let c = self.shrinkage();
        Ok(Some(z.mapv(|v| -c * v)))
    }

    fn decode_only(&self, z: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(z.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_direction_satisfies_score_identity() {
        // (estimate - observation) / noise_variance equals the marginal score
        // exactly for the Gaussian pair.
        let model = LinearGaussianReference::new(1.0, 0.37);
        let z = Array3::from_shape_vec((1, 2, 2), vec![0.5, -1.2, 2.0, 0.1]).unwrap();
        let direction = model.prior_direction(&z).unwrap().unwrap();
        let score = model.marginal_score(&z);
        for (d, s) in direction.iter().zip(score.iter()) {
            assert!((d / model.noise_variance - s).abs() <= 4.0 * f64::EPSILON * s.abs());
        }
        // And the direction is estimate - observation.
        let estimate = model.mmse_estimate(&z);
        for ((d, e), zv) in direction.iter().zip(estimate.iter()).zip(z.iter()) {
            assert!((d - (e - zv)).abs() < 1e-15);
        }
    }
}
