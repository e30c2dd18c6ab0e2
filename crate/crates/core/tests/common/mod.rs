//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rand::Rng;
use turbomp::channel::{ActivityVector, BlockwiseBasis};
use turbomp::pilot::PilotCodebook;
use turbomp::rng::complex_normal;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn random_vec<R: Rng>(rng: &mut R, len: usize, var: f64) -> Vec<Complex64> {
    (0..len).map(|_| complex_normal(rng, var)).collect()
}

pub fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den.max(1e-300)).sqrt()
}

pub fn to_dmatrix(a: ArrayView2<Complex64>) -> DMatrix<Complex64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Joint LMMSE of stacked `(h, c)` from `y = A h + B c + w` by explicit
/// covariance inversion. Returns posterior means and the posterior
/// covariance diagonals averaged over the `h` and `c` entries.
pub struct JointLmmse {
    pub h_mean: Vec<Complex64>,
    pub c_mean: Vec<Complex64>,
    pub h_var: f64,
    pub c_var: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn dense_joint_lmmse(
    a: &DMatrix<Complex64>,
    b: &DMatrix<Complex64>,
    y: &[Complex64],
    h_pri: &[Complex64],
    c_pri: &[Complex64],
    v_h: f64,
    v_c: f64,
    sigma2: f64,
) -> JointLmmse {
    let n = h_pri.len();
    let phi = {
        let mut m = DMatrix::<Complex64>::zeros(a.nrows(), 2 * n);
        m.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
        m.view_mut((0, n), (a.nrows(), n)).copy_from(b);
        m
    };
    let mut prior_cov = DMatrix::<Complex64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        prior_cov[(i, i)] = c(v_h, 0.0);
        prior_cov[(n + i, n + i)] = c(v_c, 0.0);
    }
    let x_pri = DVector::from_iterator(2 * n, h_pri.iter().chain(c_pri).copied());
    let yv = DVector::from_column_slice(y);
    let mut cov_y = &phi * &prior_cov * phi.adjoint();
    for i in 0..cov_y.nrows() {
        cov_y[(i, i)] += c(sigma2, 0.0);
    }
    let inv = cov_y.try_inverse().expect("observation covariance is invertible");
    let gain = &prior_cov * phi.adjoint() * &inv;
    let mean = &x_pri + &gain * (&yv - &phi * &x_pri);
    let post_cov = &prior_cov - &gain * &phi * &prior_cov;
    let h_var = (0..n).map(|i| post_cov[(i, i)].re).sum::<f64>() / n as f64;
    let c_var = (n..2 * n).map(|i| post_cov[(i, i)].re).sum::<f64>() / n as f64;
    JointLmmse {
        h_mean: mean.rows(0, n).iter().copied().collect(),
        c_mean: mean.rows(n, n).iter().copied().collect(),
        h_var,
        c_var,
    }
}

/// Scalar Bernoulli-Gaussian posterior by numerical integration.
///
/// `x ~ (1-l) delta + l CN(0, theta)`, `r = x + CN(0, v)`. The slab integrand
/// factors into real and imaginary parts, each integrated on a uniform grid
/// whose spacing resolves the narrowest Gaussian factor.
pub struct ScalarPosterior {
    pub mean: Complex64,
    pub var: f64,
    pub lambda_post: f64,
}

fn moments_1d(r: f64, v: f64, theta: f64) -> (f64, f64, f64) {
    // Real-part factor of CN(x; 0, theta) CN(r; x, v): variance theta/2 and v/2.
    let s_min = (theta.min(v) / 2.0).sqrt();
    let s_max = (theta.max(v) / 2.0).sqrt();
    let lo = r.min(0.0) - 14.0 * s_max;
    let hi = r.max(0.0) + 14.0 * s_max;
    let h = s_min / 6.0;
    let steps = ((hi - lo) / h).ceil() as usize;
    let h = (hi - lo) / steps as f64;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=steps {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        let f = w * (-(x * x) / theta).exp() / (std::f64::consts::PI * theta).sqrt() * (-((r - x) * (r - x)) / v).exp()
            / (std::f64::consts::PI * v).sqrt();
        z += f;
        m1 += f * x;
        m2 += f * x * x;
    }
    (z * h, m1 * h, m2 * h)
}

pub fn bg_quadrature(r: Complex64, v: f64, theta: f64, lambda: f64) -> ScalarPosterior {
    let (zr, m1r, m2r) = moments_1d(r.re, v, theta);
    let (zi, m1i, m2i) = moments_1d(r.im, v, theta);
    let z_slab = zr * zi;
    let z_spike = (-r.norm_sqr() / v).exp() / (std::f64::consts::PI * v);
    let mean_slab = c(m1r / zr, m1i / zi);
    let second_slab = m2r / zr + m2i / zi;
    let lambda_post = lambda * z_slab / (lambda * z_slab + (1.0 - lambda) * z_spike);
    let mean = mean_slab * lambda_post;
    ScalarPosterior {
        mean,
        var: lambda_post * second_slab - mean.norm_sqr(),
        lambda_post,
    }
}

/// LMMSE with the true support known: per antenna, solves for the mean and
/// slope coefficients of active devices only.
pub fn genie_lmmse(
    codebook: &PilotCodebook,
    y: ArrayView2<Complex64>,
    support: &ActivityVector,
    theta_h: f64,
    theta_c: f64,
    sigma2: f64,
) -> (Array2<Complex64>, Array2<Complex64>) {
    let q = codebook.num_blocks();
    let a = to_dmatrix(codebook.dense_a().unwrap().view());
    let b = to_dmatrix(codebook.dense_b().unwrap().view());
    let cols: Vec<usize> = support
        .active_indices()
        .iter()
        .flat_map(|&k| (k * q..(k + 1) * q).collect::<Vec<_>>())
        .collect();
    let s = cols.len();
    let mut phi = DMatrix::<Complex64>::zeros(a.nrows(), 2 * s);
    for (j, &col) in cols.iter().enumerate() {
        phi.set_column(j, &a.column(col));
        phi.set_column(s + j, &b.column(col));
    }
    let mut gram = phi.adjoint() * &phi / c(sigma2, 0.0);
    for j in 0..s {
        gram[(j, j)] += c(1.0 / theta_h, 0.0);
        gram[(s + j, s + j)] += c(1.0 / theta_c, 0.0);
    }
    let chol = gram.cholesky().expect("posterior precision is positive definite");
    let mut h = Array2::zeros((codebook.num_cols(), y.ncols()));
    let mut cc = Array2::zeros((codebook.num_cols(), y.ncols()));
    for m in 0..y.ncols() {
        let ym = DVector::from_iterator(y.nrows(), y.column(m).iter().copied());
        let x = chol.solve(&(phi.adjoint() * ym / c(sigma2, 0.0)));
        for (j, &col) in cols.iter().enumerate() {
            h[[col, m]] = x[j];
            cc[[col, m]] = x[s + j];
        }
    }
    (h, cc)
}

/// `G` rebuilt from stacked block estimates, `K x N x M`.
pub fn expand_all(
    basis: &BlockwiseBasis,
    h: ArrayView2<Complex64>,
    cm: ArrayView2<Complex64>,
) -> ndarray::Array3<Complex64> {
    let q = basis.num_blocks();
    let k = h.nrows() / q;
    let mut g = ndarray::Array3::zeros((k, basis.num_subcarriers(), h.ncols()));
    for dev in 0..k {
        let span = ndarray::s![dev * q..(dev + 1) * q, ..];
        g.index_axis_mut(ndarray::Axis(0), dev)
            .assign(&basis.expand(h.slice(span), cm.slice(span)));
    }
    g
}
