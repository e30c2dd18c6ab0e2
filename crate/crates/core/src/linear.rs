//! Per-antenna LMMSE estimation of `h_m` and `c_m` (Module A) and Gaussian
//! extrinsic message algebra.
//!
//! With `A A^H = KP I` and `B = D A`, the observation covariance
//! `v_h A A^H + v_c B B^H + sigma_w^2 I` is diagonal, so every inverse below
//! is an elementwise reciprocal.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::pilot::PilotCodebook;

/// Lower clamp for every message variance.
pub const VAR_FLOOR: f64 = 1e-12;
/// Upper clamp for every message variance.
pub const VAR_CEIL: f64 = 1e6;

pub fn clamp_variance(v: f64) -> f64 {
    v.clamp(VAR_FLOOR, VAR_CEIL)
}

/// Isotropic complex Gaussian message `CN(mean, variance * I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMessage {
    pub mean: Vec<Complex64>,
    pub variance: f64,
}

impl GaussianMessage {
    pub fn new(mean: Vec<Complex64>, variance: f64) -> Self {
        Self {
            mean,
            variance: clamp_variance(variance),
        }
    }

    pub fn zeros(len: usize, variance: f64) -> Self {
        Self::new(vec![Complex64::new(0.0, 0.0); len], variance)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.variance.is_finite() && self.mean.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Diagonal of the observation covariance of one antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaDiag(Vec<f64>);

impl SigmaDiag {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `Sigma_ii = KP v_h + KP v_c D_ii^2 + sigma_w^2`.
pub fn sigma_diag(v_h: f64, v_c: f64, sigma_w2: f64, codebook: &PilotCodebook) -> Result<SigmaDiag> {
    if !(sigma_w2 > 0.0) || !sigma_w2.is_finite() {
        return Err(Error::Parameter(format!("noise variance {sigma_w2} must be > 0")));
    }
    if !(v_h >= 0.0) || !(v_c >= 0.0) {
        return Err(Error::Parameter("message variances must be >= 0".into()));
    }
    let kp = codebook.kp();
    Ok(SigmaDiag(
        codebook
            .d_diag()
            .iter()
            .map(|d| kp * v_h + kp * v_c * d * d + sigma_w2)
            .collect(),
    ))
}

/// `y - A h - B c`.
pub fn residual(y: &[Complex64], h: &[Complex64], c: &[Complex64], codebook: &PilotCodebook) -> Result<Vec<Complex64>> {
    check_len("observation", codebook.num_rows(), y.len())?;
    let ah = codebook.apply_a(h)?;
    let ac = codebook.apply_a(c)?;
    let r: Vec<Complex64> = y
        .iter()
        .zip(ah.iter().zip(&ac))
        .zip(codebook.d_diag())
        .map(|((yv, (a, b)), d)| yv - a - b * d)
        .collect();
    if r.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Numeric("non-finite residual in linear estimator".into()));
    }
    Ok(r)
}

fn check_inputs(
    y: &[Complex64],
    msg_h: &GaussianMessage,
    msg_c: &GaussianMessage,
    sigma: &SigmaDiag,
    codebook: &PilotCodebook,
) -> Result<()> {
    check_len("h message", codebook.num_cols(), msg_h.len())?;
    check_len("c message", codebook.num_cols(), msg_c.len())?;
    check_len("sigma diagonal", codebook.num_rows(), sigma.0.len())?;
    check_len("observation", codebook.num_rows(), y.len())
}

/// LMMSE posterior of `h_m` given `y_m` and Gaussian priors on `h_m`, `c_m`.
///
/// The returned variance is the posterior covariance trace averaged over the
/// `QK` entries: `v_h - (P v_h^2 / Q) sum_i 1/Sigma_ii`.
pub fn lmmse_posterior_h(
    y: &[Complex64],
    msg_h: &GaussianMessage,
    msg_c: &GaussianMessage,
    sigma: &SigmaDiag,
    codebook: &PilotCodebook,
) -> Result<GaussianMessage> {
    check_inputs(y, msg_h, msg_c, sigma, codebook)?;
    let r = residual(y, &msg_h.mean, &msg_c.mean, codebook)?;
    let weighted: Vec<Complex64> = r.iter().zip(&sigma.0).map(|(v, s)| v / s).collect();
    let back = codebook.apply_a_adjoint(&weighted)?;
    let v = msg_h.variance;
    let mean = msg_h.mean.iter().zip(&back).map(|(p, b)| p + b * v).collect();

    let p_over_q = codebook.power() / codebook.num_blocks() as f64;
    let reduction: f64 = p_over_q * v * v * sigma.0.iter().map(|s| 1.0 / s).sum::<f64>();
    Ok(GaussianMessage::new(mean, (v - reduction).min(v)))
}

/// LMMSE posterior of `c_m`; variance `v_c - (P v_c^2 / Q) sum_i D_ii^2/Sigma_ii`.
pub fn lmmse_posterior_c(
    y: &[Complex64],
    msg_h: &GaussianMessage,
    msg_c: &GaussianMessage,
    sigma: &SigmaDiag,
    codebook: &PilotCodebook,
) -> Result<GaussianMessage> {
    check_inputs(y, msg_h, msg_c, sigma, codebook)?;
    let r = residual(y, &msg_h.mean, &msg_c.mean, codebook)?;
    let weighted: Vec<Complex64> = r
        .iter()
        .zip(&sigma.0)
        .zip(codebook.d_diag())
        .map(|((v, s), d)| v * (d / s))
        .collect();
    let back = codebook.apply_a_adjoint(&weighted)?;
    let v = msg_c.variance;
    let mean = msg_c.mean.iter().zip(&back).map(|(p, b)| p + b * v).collect();

    let p_over_q = codebook.power() / codebook.num_blocks() as f64;
    let sum: f64 = sigma.0.iter().zip(codebook.d_diag()).map(|(s, d)| d * d / s).sum();
    Ok(GaussianMessage::new(mean, (v - p_over_q * v * v * sum).min(v)))
}

/// Extrinsic message `post / pri` of two isotropic Gaussians.
///
/// When the posterior is not more precise than the prior, the extrinsic
/// variance is pinned to [`VAR_CEIL`], its mean to the posterior mean, and
/// the second return value is `true`.
pub fn extrinsic(post: &GaussianMessage, pri: &GaussianMessage) -> (GaussianMessage, bool) {
    let precision = 1.0 / post.variance - 1.0 / pri.variance;
    if !(precision > 1.0 / VAR_CEIL) {
        return (
            GaussianMessage {
                mean: post.mean.clone(),
                variance: VAR_CEIL,
            },
            true,
        );
    }
    let v_ext = clamp_variance(1.0 / precision);
    let (wp, wq) = (1.0 / post.variance, 1.0 / pri.variance);
    let mean = post
        .mean
        .iter()
        .zip(&pri.mean)
        .map(|(a, b)| (a * wp - b * wq) * v_ext)
        .collect();
    (GaussianMessage { mean, variance: v_ext }, false)
}

/// Precision-weighted product of two isotropic Gaussians.
pub fn combine(a: &GaussianMessage, b: &GaussianMessage) -> GaussianMessage {
    let (wa, wb) = (1.0 / a.variance, 1.0 / b.variance);
    let v = 1.0 / (wa + wb);
    GaussianMessage {
        mean: a.mean.iter().zip(&b.mean).map(|(x, y)| (x * wa + y * wb) * v).collect(),
        variance: v,
    }
}
