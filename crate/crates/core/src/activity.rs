//! Module D: fusion of activity evidence and threshold detection.
//!
//! Probabilities are combined as log-odds clamped to `+-LOGIT_CLAMP`, so
//! certain evidence (`pi` of exactly 0 or 1) never produces `0 * inf`.

use serde::{Deserialize, Serialize};

use crate::channel::ActivityVector;
use crate::denoiser::sigmoid;
use crate::error::{check_len, Error, Result};

pub const LOGIT_CLAMP: f64 = 40.0;

/// Clamped `ln(p / (1 - p))`.
pub fn logit(p: f64) -> f64 {
    if p <= 0.0 {
        return -LOGIT_CLAMP;
    }
    if p >= 1.0 {
        return LOGIT_CLAMP;
    }
    (p / (1.0 - p)).ln().clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

fn from_logit(x: f64) -> f64 {
    sigmoid(x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
}

/// Message from `alpha_k` to the other denoiser: prior `lambda` combined with
/// the likelihood `pi_other`.
pub fn cross_prior(pi_other: f64, lambda: f64) -> f64 {
    cross_prior_llr(logit(pi_other), lambda)
}

pub(crate) fn cross_prior_llr(llr_other: f64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    if lambda >= 1.0 {
        return 1.0;
    }
    if llr_other == 0.0 {
        return lambda;
    }
    from_logit(llr_other.clamp(-LOGIT_CLAMP, LOGIT_CLAMP) + logit(lambda))
}

/// `lambda pi_B pi_C / (lambda pi_B pi_C + (1 - lambda)(1 - pi_B)(1 - pi_C))`.
pub fn activity_posterior(pi_b: f64, pi_c: f64, lambda: f64) -> f64 {
    activity_posterior_llr(logit(pi_b), logit(pi_c), lambda)
}

pub(crate) fn activity_posterior_llr(llr_b: f64, llr_c: f64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    if lambda >= 1.0 {
        return 1.0;
    }
    if llr_b == 0.0 && llr_c == 0.0 {
        return lambda;
    }
    let total = llr_b.clamp(-LOGIT_CLAMP, LOGIT_CLAMP) + llr_c.clamp(-LOGIT_CLAMP, LOGIT_CLAMP) + logit(lambda);
    from_logit(total)
}

/// `alpha_hat_k = 1` iff `lambda_D_post[k] >= threshold`.
pub fn detect(lambda_d_post: &[f64], threshold: f64) -> Result<ActivityVector> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(ActivityVector::new(
        lambda_d_post.iter().map(|&p| p >= threshold).collect(),
    ))
}

/// Per-device activity messages of one engine iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityBeliefs {
    pub pi_b: Vec<f64>,
    pub pi_c: Vec<f64>,
    pub lambda_b_pri: Vec<f64>,
    pub lambda_c_pri: Vec<f64>,
    pub lambda_d_post: Vec<f64>,
}

impl ActivityBeliefs {
    /// Uninformative likelihoods (`pi = 1/2`) so that the first cross prior
    /// equals `lambda`.
    pub fn uninformative(k: usize, lambda: f64) -> Self {
        Self {
            pi_b: vec![0.5; k],
            pi_c: vec![0.5; k],
            lambda_b_pri: vec![lambda; k],
            lambda_c_pri: vec![lambda; k],
            lambda_d_post: vec![lambda; k],
        }
    }

    pub fn len(&self) -> usize {
        self.pi_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi_b.is_empty()
    }

    pub fn fuse(&mut self, lambda: f64) -> Result<()> {
        check_len("pi_C", self.pi_b.len(), self.pi_c.len())?;
        self.lambda_d_post = self
            .pi_b
            .iter()
            .zip(&self.pi_c)
            .map(|(&b, &c)| activity_posterior(b, c, lambda))
            .collect();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn cross_prior_examples() {
        assert_eq!(cross_prior(0.5, 0.05), 0.05);
        assert!((cross_prior(1.0, 0.05) - 1.0).abs() < 1e-15);
        let expect = 0.05 * 0.9 / (0.05 * 0.9 + 0.95 * 0.1);
        assert!((cross_prior(0.9, 0.05) - expect).abs() < 1e-12);
        assert!((expect - 0.3214).abs() < 1e-4);
        assert!(cross_prior(0.0, 1.0 - 1e-9).is_finite());
    }

    #[test]
    fn posterior_examples() {
        assert_eq!(activity_posterior(0.5, 0.5, 0.05), 0.05);
        assert!((activity_posterior(0.9, 0.9, 0.05) - 0.81).abs() < 1e-12);
        assert!(activity_posterior(0.0, 0.9, 0.05) < 1e-15);
        assert!(activity_posterior(0.0, 1.0, 0.5).is_finite());
    }

    #[test]
    fn detection_boundaries() {
        assert!(detect(&[0.6], 0.5).unwrap().is_active(0));
        assert!(detect(&[0.5], 0.5).unwrap().is_active(0));
        assert!(!detect(&[0.4999], 0.5).unwrap().is_active(0));
        assert_eq!(detect(&[0.05; 10], 0.5).unwrap().count_active(), 0);
        assert!(detect(&[0.5], 0.0).is_err());
        assert!(detect(&[0.5], 1.0).is_err());
    }

    #[test]
    fn fusion_properties_random() {
        let mut rng = rng_from_seed(42);
        for _ in 0..10_000 {
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            let lam: f64 = rng.random_range(1e-6..1.0 - 1e-6);
            assert_eq!(activity_posterior(0.5, 0.5, lam), lam);
            assert_eq!(activity_posterior(a, b, lam), activity_posterior(b, a, lam));
            let step = 1e-3;
            let base = activity_posterior(a, b, lam);
            assert!(activity_posterior((a + step).min(1.0), b, lam) >= base);
            assert!(activity_posterior(a, b, (lam + step).min(1.0 - 1e-9)) >= base);
        }
    }

    #[test]
    fn threshold_monotone() {
        let mut rng = rng_from_seed(3);
        let post: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        let mut prev = usize::MAX;
        for i in 1..100 {
            let c = detect(&post, i as f64 / 100.0).unwrap().count_active();
            assert!(c <= prev);
            prev = c;
        }
    }
}
