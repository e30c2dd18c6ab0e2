//! Expectation-maximization updates of the prior parameters, using the
//! product of the denoiser beliefs as the approximate posterior.

use ndarray::ArrayView2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linear::{clamp_variance, VAR_FLOOR};
use crate::pilot::PilotCodebook;

pub const LAMBDA_FLOOR: f64 = 1e-6;

/// Hyperparameters of the Bernoulli-Gaussian model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub theta_h: f64,
    pub theta_c: f64,
    pub sigma_w2: f64,
    pub lambda: f64,
}

impl PriorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta_h", self.theta_h),
            ("theta_c", self.theta_c),
            ("sigma_w2", self.sigma_w2),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name}={v} must be > 0")));
            }
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Parameter(format!("lambda={} outside (0, 1)", self.lambda)));
        }
        Ok(())
    }

    /// Starting point for learning: `theta_H = 1`, `theta_C = 1e-3`,
    /// `lambda = 0.1` and `sigma_w^2 = ||Y||_F^2 / (M T N)`.
    pub fn em_initial(y: ArrayView2<Complex64>) -> Self {
        let energy: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        Self {
            theta_h: 1.0,
            theta_c: 1e-3,
            sigma_w2: clamp_variance(energy / y.len().max(1) as f64),
            lambda: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    /// `theta_H`, `theta_C` and `lambda` are refreshed every `slow_period`
    /// iterations; `sigma_w^2` every iteration.
    pub slow_period: usize,
    /// Include the posterior-variance correction in the noise update.
    pub sigma_correction: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            slow_period: 3,
            sigma_correction: false,
        }
    }
}

/// Slab variance update shared by `theta_H` and `theta_C`:
/// `sum_k l_k (||X_k||^2 + sum var) / (Q M sum_k l_k)`.
///
/// Returns `None` when every activity posterior is zero.
pub fn em_theta(
    post_mean: ArrayView2<Complex64>,
    post_var: ArrayView2<f64>,
    lambda_d_post: &[f64],
    q: usize,
) -> Result<Option<f64>> {
    let (rows, m) = post_mean.dim();
    check_len("posterior rows", lambda_d_post.len() * q, rows)?;
    check_len("variance rows", rows, post_var.nrows())?;
    let weight: f64 = lambda_d_post.iter().sum();
    if !(weight > 0.0) {
        return Ok(None);
    }
    let mut num = 0.0;
    for (k, &l) in lambda_d_post.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        let span = ndarray::s![k * q..(k + 1) * q, ..];
        let energy: f64 = post_mean.slice(span).iter().map(|v| v.norm_sqr()).sum();
        let var: f64 = post_var.slice(span).sum();
        num += l * (energy + var);
    }
    Ok(Some(clamp_variance(num / ((q * m) as f64 * weight))))
}

/// `||Y - A H - B C||_F^2 / (M T N)`, optionally plus the variance
/// correction `(K/M) sum_m (v_h_m + mean_i(D_ii^2) v_c_m)`.
pub fn em_sigma_w(
    y: ArrayView2<Complex64>,
    h_post: ArrayView2<Complex64>,
    c_post: ArrayView2<Complex64>,
    codebook: &PilotCodebook,
    correction: Option<(&[f64], &[f64])>,
) -> Result<f64> {
    check_len("observation rows", codebook.num_rows(), y.nrows())?;
    let m = y.ncols();
    let ah = codebook.apply_a_matrix(h_post)?;
    let bc = codebook.apply_b_matrix(c_post)?;
    let resid: f64 = y
        .iter()
        .zip(ah.iter().zip(bc.iter()))
        .map(|(yv, (a, b))| (yv - a - b).norm_sqr())
        .sum();
    let mut est = resid / (m * codebook.num_rows()) as f64;
    if let Some((vh, vc)) = correction {
        check_len("v_h per antenna", m, vh.len())?;
        check_len("v_c per antenna", m, vc.len())?;
        let d2: f64 = codebook.d_diag().iter().map(|d| d * d).sum::<f64>() / codebook.num_rows() as f64;
        let k = codebook.num_devices() as f64;
        est += k / m as f64 * vh.iter().zip(vc).map(|(a, b)| a + d2 * b).sum::<f64>();
    }
    Ok(est.max(VAR_FLOOR))
}

/// Mean of the activity posteriors, clamped into `[1e-6, 1 - 1e-6]`.
pub fn em_lambda(lambda_d_post: &[f64]) -> f64 {
    if lambda_d_post.is_empty() {
        return LAMBDA_FLOOR;
    }
    let mean = lambda_d_post.iter().sum::<f64>() / lambda_d_post.len() as f64;
    mean.clamp(LAMBDA_FLOOR, 1.0 - LAMBDA_FLOOR)
}

/// Engine quantities consumed by one EM step.
#[derive(Debug, Clone, Copy)]
pub struct EmInputs<'a> {
    pub y: ArrayView2<'a, Complex64>,
    pub h_post: ArrayView2<'a, Complex64>,
    pub h_var: ArrayView2<'a, f64>,
    pub c_post: ArrayView2<'a, Complex64>,
    pub c_var: ArrayView2<'a, f64>,
    pub lambda_d_post: &'a [f64],
    /// Per-antenna averaged posterior variances of the denoisers.
    pub v_h_post: &'a [f64],
    pub v_c_post: &'a [f64],
}

/// Which parameters an EM step touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EmUpdate {
    pub sigma_w2: bool,
    pub slow: bool,
    /// An activity-weighted update was skipped because all posteriors were 0.
    pub degenerate: bool,
}

/// One scheduled EM step at 1-based `iteration`.
pub fn em_step(
    iteration: usize,
    prev: &PriorParams,
    inputs: &EmInputs<'_>,
    codebook: &PilotCodebook,
    opts: &EmOptions,
) -> Result<(PriorParams, EmUpdate)> {
    let mut next = *prev;
    let mut update = EmUpdate {
        sigma_w2: true,
        ..Default::default()
    };
    let correction = opts.sigma_correction.then_some((inputs.v_h_post, inputs.v_c_post));
    next.sigma_w2 = clamp_variance(em_sigma_w(
        inputs.y,
        inputs.h_post,
        inputs.c_post,
        codebook,
        correction,
    )?);

    if opts.slow_period > 0 && iteration.is_multiple_of(opts.slow_period) {
        update.slow = true;
        let q = codebook.num_blocks();
        match em_theta(inputs.h_post, inputs.h_var, inputs.lambda_d_post, q)? {
            Some(v) => next.theta_h = v,
            None => update.degenerate = true,
        }
        match em_theta(inputs.c_post, inputs.c_var, inputs.lambda_d_post, q)? {
            Some(v) => next.theta_c = v,
            None => update.degenerate = true,
        }
        next.lambda = em_lambda(inputs.lambda_d_post);
    }
    Ok((next, update))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilot::build_codebook;
    use ndarray::Array2;

    #[test]
    fn theta_direct_substitution() {
        let q = 2;
        let m = 3;
        let c0: f64 = 0.7;
        let mean = Array2::from_elem((4 * q, m), Complex64::new(c0.sqrt(), 0.0));
        let var = Array2::zeros((4 * q, m));
        let got = em_theta(mean.view(), var.view(), &[1.0; 4], q).unwrap().unwrap();
        assert!((got - c0).abs() < 1e-14);
    }

    #[test]
    fn theta_single_device() {
        let q = 2;
        let mut mean = Array2::from_elem((3 * q, 1), Complex64::new(5.0, 0.0));
        mean[[2, 0]] = Complex64::new(1.0, 0.0);
        mean[[3, 0]] = Complex64::new(0.0, 1.0);
        let var = Array2::from_elem((3 * q, 1), 0.5);
        let got = em_theta(mean.view(), var.view(), &[0.0, 1.0, 0.0], q).unwrap().unwrap();
        assert!((got - (2.0 + 1.0) / 2.0).abs() < 1e-14);
        assert_eq!(em_theta(mean.view(), var.view(), &[0.0; 3], q).unwrap(), None);
    }

    #[test]
    fn sigma_w_zero_estimate_is_initial_value() {
        let cb = build_codebook(64, 8, 4, 2, 1.0, 1).unwrap();
        let y = Array2::from_shape_fn((cb.num_rows(), 2), |(i, j)| Complex64::new(i as f64 * 0.01, j as f64));
        let zero = Array2::zeros((cb.num_cols(), 2));
        let got = em_sigma_w(y.view(), zero.view(), zero.view(), &cb, None).unwrap();
        let expect = PriorParams::em_initial(y.view()).sigma_w2;
        assert!((got - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn sigma_w_perfect_fit_clamps() {
        let cb = build_codebook(64, 8, 4, 2, 1.0, 1).unwrap();
        let h = Array2::from_shape_fn((cb.num_cols(), 1), |(i, _)| Complex64::new((i % 5) as f64, 0.0));
        let c = Array2::from_shape_fn((cb.num_cols(), 1), |(i, _)| Complex64::new(0.0, (i % 3) as f64 * 0.01));
        let y = &cb.apply_a_matrix(h.view()).unwrap() + &cb.apply_b_matrix(c.view()).unwrap();
        let got = em_sigma_w(y.view(), h.view(), c.view(), &cb, None).unwrap();
        assert_eq!(got, VAR_FLOOR);
    }

    #[test]
    fn lambda_mean() {
        assert!((em_lambda(&[0.05; 20]) - 0.05).abs() < 1e-15);
        let ind = [1.0, 0.0, 0.0, 1.0, 0.0];
        assert_eq!(em_lambda(&ind), 0.4);
        assert_eq!(em_lambda(&[0.0; 4]), LAMBDA_FLOOR);
    }

    #[test]
    fn schedule_cadence() {
        let cb = build_codebook(16, 4, 2, 2, 1.0, 0).unwrap();
        let y = Array2::from_elem((cb.num_rows(), 1), Complex64::new(1.0, 0.0));
        let post = Array2::from_elem((cb.num_cols(), 1), Complex64::new(0.3, 0.0));
        let var = Array2::from_elem((cb.num_cols(), 1), 0.01);
        let lam = vec![0.2; 16];
        let inputs = EmInputs {
            y: y.view(),
            h_post: post.view(),
            h_var: var.view(),
            c_post: post.view(),
            c_var: var.view(),
            lambda_d_post: &lam,
            v_h_post: &[0.01],
            v_c_post: &[0.01],
        };
        let prev = PriorParams {
            theta_h: 1.0,
            theta_c: 1e-3,
            sigma_w2: 5.0,
            lambda: 0.1,
        };
        let opts = EmOptions::default();
        let (p1, u1) = em_step(1, &prev, &inputs, &cb, &opts).unwrap();
        assert!(u1.sigma_w2 && !u1.slow);
        assert_ne!(p1.sigma_w2, prev.sigma_w2);
        assert_eq!(
            (p1.theta_h, p1.theta_c, p1.lambda),
            (prev.theta_h, prev.theta_c, prev.lambda)
        );
        let (p3, u3) = em_step(3, &prev, &inputs, &cb, &opts).unwrap();
        assert!(u3.slow);
        assert_ne!(p3.theta_h, prev.theta_h);
        assert_ne!(p3.theta_c, prev.theta_c);
        assert!((p3.lambda - 0.2).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        let ok = PriorParams {
            theta_h: 1.0,
            theta_c: 1e-3,
            sigma_w2: 0.1,
            lambda: 0.05,
        };
        assert!(ok.validate().is_ok());
        assert!(PriorParams { lambda: 1.0, ..ok }.validate().is_err());
        assert!(PriorParams { sigma_w2: 0.0, ..ok }.validate().is_err());
    }
}
