//! Bernoulli-Gaussian block denoisers (Modules B and C).
//!
//! Each device block `X_k` (`Q x M`) has prior
//! `(1 - lambda) delta(X_k) + lambda CN(X_k; 0, theta I)` and receives the
//! Gaussian message `CN(X_k; pri, V)` with `V` constant down each antenna
//! column. All likelihood ratios are evaluated as log-density differences.

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use num_complex::Complex64;

use crate::error::{check_len, Result};

/// Input of one device block denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceBlockPrior {
    /// `Q x M` incoming message mean.
    pub pri_mean: Array2<Complex64>,
    /// Message variance per antenna (length `M`).
    pub per_antenna_var: Vec<f64>,
    /// Slab variance of the Bernoulli-Gaussian prior.
    pub theta: f64,
    /// Incoming activity probability.
    pub lambda_pri: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseResult {
    pub post_mean: Array2<Complex64>,
    /// Elementwise posterior variance, `Q x M`.
    pub post_var_elem: Array2<f64>,
    pub lambda_post: f64,
    /// Activity likelihood from this block alone (prior weight one half).
    pub pi: f64,
    /// `ln(pi / (1 - pi))`, kept to avoid round-tripping through `pi`.
    pub llr: f64,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-likelihood ratio `ln CN(0; pri, V + theta I) - ln CN(0; pri, V)` of
/// "active" versus "inactive" for one block.
pub fn block_llr(pri: ArrayView2<Complex64>, var: &[f64], theta: f64) -> f64 {
    let mut llr = 0.0;
    for (col, &v) in pri.axis_iter(Axis(1)).zip(var) {
        let energy: f64 = col.iter().map(|p| p.norm_sqr()).sum();
        let rows = col.len() as f64;
        llr += energy * theta / (v * (v + theta)) - rows * (theta / v).ln_1p();
    }
    llr
}

/// Core of the denoiser writing into caller-provided `Q x M` buffers.
/// Returns `(lambda_post, llr)`.
pub(crate) fn denoise_into(
    pri: ArrayView2<Complex64>,
    var: &[f64],
    theta: f64,
    lambda_pri: f64,
    mut post_mean: ArrayViewMut2<Complex64>,
    mut post_var: ArrayViewMut2<f64>,
) -> (f64, f64) {
    let llr = block_llr(pri, var, theta);
    let lambda_post = if lambda_pri <= 0.0 {
        0.0
    } else if lambda_pri >= 1.0 {
        1.0
    } else {
        sigmoid(llr + (lambda_pri / (1.0 - lambda_pri)).ln())
    };
    for ((m, col), &v) in pri.axis_iter(Axis(1)).enumerate().zip(var) {
        let gain = theta / (theta + v);
        let phi = theta * v / (theta + v);
        for (qq, p) in col.iter().enumerate() {
            let mu = p * gain;
            post_mean[[qq, m]] = mu * lambda_post;
            // lambda (|mu|^2 + phi) - |lambda mu|^2 without the cancellation
            let pv = lambda_post * (1.0 - lambda_post) * mu.norm_sqr() + lambda_post * phi;
            post_var[[qq, m]] = pv.max(0.0);
        }
    }
    (lambda_post, llr)
}

/// Bernoulli-Gaussian MMSE denoising of one device block.
pub fn bg_denoise(input: &DeviceBlockPrior) -> Result<DenoiseResult> {
    let (q, m) = input.pri_mean.dim();
    check_len("per-antenna variances", m, input.per_antenna_var.len())?;
    let mut post_mean = Array2::zeros((q, m));
    let mut post_var = Array2::zeros((q, m));
    let (lambda_post, llr) = denoise_into(
        input.pri_mean.view(),
        &input.per_antenna_var,
        input.theta,
        input.lambda_pri,
        post_mean.view_mut(),
        post_var.view_mut(),
    );
    Ok(DenoiseResult {
        post_mean,
        post_var_elem: post_var,
        lambda_post,
        pi: sigmoid(llr),
        llr,
    })
}

/// Denoised estimate of all `K` device blocks stacked as `QK x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDenoise {
    pub post_mean: Array2<Complex64>,
    pub post_var: Array2<f64>,
    pub lambda_post: Vec<f64>,
    pub llr: Vec<f64>,
}

impl BlockDenoise {
    pub fn pi(&self) -> Vec<f64> {
        self.llr.iter().map(|&l| sigmoid(l)).collect()
    }
}

/// Runs [`bg_denoise`] over every device of a stacked `QK x M` message.
pub fn denoise_all(
    pri: ArrayView2<Complex64>,
    var: &[f64],
    theta: f64,
    lambda_pri: &[f64],
    q: usize,
) -> Result<BlockDenoise> {
    let (rows, m) = pri.dim();
    check_len("per-antenna variances", m, var.len())?;
    check_len("stacked rows", lambda_pri.len() * q, rows)?;
    let mut post_mean = Array2::zeros((rows, m));
    let mut post_var = Array2::zeros((rows, m));
    let mut lambda_post = Vec::with_capacity(lambda_pri.len());
    let mut llr = Vec::with_capacity(lambda_pri.len());
    for (k, &lp) in lambda_pri.iter().enumerate() {
        let span = ndarray::s![k * q..(k + 1) * q, ..];
        let (lam, l) = denoise_into(
            pri.slice(span),
            var,
            theta,
            lp,
            post_mean.slice_mut(span),
            post_var.slice_mut(span),
        );
        lambda_post.push(lam);
        llr.push(l);
    }
    Ok(BlockDenoise {
        post_mean,
        post_var,
        lambda_post,
        llr,
    })
}

/// Per-antenna average of elementwise posterior variances over all `KQ` rows.
pub fn column_variance(post_var: ArrayView2<f64>) -> Vec<f64> {
    let rows = post_var.nrows().max(1) as f64;
    post_var.axis_iter(Axis(1)).map(|col| col.sum() / rows).collect()
}
