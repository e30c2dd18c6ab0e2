//! Turbo message passing between the linear estimator (module A), the two
//! Bernoulli-Gaussian denoisers for `H` (module B) and `C` (module C), and
//! the activity fusion (module D).

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::activity::{activity_posterior_llr, cross_prior_llr, detect};
use crate::channel::ActivityVector;
use crate::denoiser::{column_variance, denoise_all, sigmoid, BlockDenoise};
use crate::em::{em_step, EmInputs, EmOptions, PriorParams};
use crate::error::{check_len, Error, Result};
use crate::linear::{clamp_variance, extrinsic, lmmse_posterior_c, lmmse_posterior_h, sigma_diag, GaussianMessage};
use crate::pilot::PilotCodebook;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TurboOptions {
    pub max_iters: usize,
    /// Stop when the relative change of the stacked module-A prior means
    /// drops below this value.
    pub rel_change_tol: f64,
    /// H-branch passes per C-branch pass.
    pub inner_h_updates: usize,
    /// Learn `theta_H`, `theta_C`, `sigma_w^2` and `lambda` on the fly.
    pub em_enabled: bool,
    /// First 1-based iteration at which EM runs.
    pub em_start_iter: usize,
    pub em: EmOptions,
    pub threshold: f64,
    /// Weight of the new extrinsic message fed back to module A; 1 disables
    /// damping.
    pub damping: f64,
    pub record_trace: bool,
}

impl Default for TurboOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_change_tol: 1e-6,
            inner_h_updates: 2,
            em_enabled: false,
            em_start_iter: 1,
            em: EmOptions::default(),
            threshold: 0.5,
            damping: 1.0,
            record_trace: false,
        }
    }
}

impl TurboOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Parameter("max_iters must be >= 1".into()));
        }
        if self.inner_h_updates == 0 {
            return Err(Error::Parameter("inner_h_updates must be >= 1".into()));
        }
        if !(self.rel_change_tol >= 0.0) {
            return Err(Error::Parameter("rel_change_tol must be >= 0".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Parameter(format!("damping {} outside (0, 1]", self.damping)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Parameter(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.em_enabled && self.em.slow_period == 0 {
            return Err(Error::Parameter("EM slow period must be >= 1".into()));
        }
        Ok(())
    }
}

/// Message-passing stages in execution order within one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    LinearH,
    ExtrinsicLinearH,
    PriorToDenoiserH,
    ActivityToH,
    DenoiseH,
    AverageH,
    ExtrinsicDenoiserH,
    LinearC,
    ExtrinsicLinearC,
    PriorToDenoiserC,
    ActivityToC,
    DenoiseC,
    AverageC,
    ExtrinsicDenoiserC,
    ParameterUpdate,
    ActivityPosterior,
}

/// One row of the per-iteration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub v_h: f64,
    pub v_c: f64,
    pub sigma_w2: f64,
    pub lambda: f64,
    pub theta_h: f64,
    pub theta_c: f64,
    pub rel_change: f64,
    pub nmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: Vec<IterationRecord>,
    pub trace: Vec<Stage>,
    /// Extrinsic computations that hit the variance ceiling.
    pub clamp_events: usize,
    pub converged: bool,
}

/// Messages carried between iterations.
#[derive(Debug, Clone)]
pub struct TurboState {
    /// Module-A priors per antenna.
    pub h_pri: Vec<GaussianMessage>,
    pub c_pri: Vec<GaussianMessage>,
    /// Likelihood log-odds of each device from the two denoisers.
    pub llr_b: Vec<f64>,
    pub llr_c: Vec<f64>,
    pub lambda_d_post: Vec<f64>,
    pub h_post: Array2<Complex64>,
    pub h_var: Array2<f64>,
    pub c_post: Array2<Complex64>,
    pub c_var: Array2<f64>,
    pub v_h_post: Vec<f64>,
    pub v_c_post: Vec<f64>,
    pub priors: PriorParams,
    pub iteration: usize,
}

/// Zero means with variances `lambda theta_H`, `lambda theta_C`, and
/// uninformative activity messages.
pub fn init_state(codebook: &PilotCodebook, priors: &PriorParams, num_antennas: usize) -> TurboState {
    let cols = codebook.num_cols();
    let k = codebook.num_devices();
    let vh = clamp_variance(priors.lambda * priors.theta_h);
    let vc = clamp_variance(priors.lambda * priors.theta_c);
    TurboState {
        h_pri: (0..num_antennas).map(|_| GaussianMessage::zeros(cols, vh)).collect(),
        c_pri: (0..num_antennas).map(|_| GaussianMessage::zeros(cols, vc)).collect(),
        llr_b: vec![0.0; k],
        llr_c: vec![0.0; k],
        lambda_d_post: vec![priors.lambda; k],
        h_post: Array2::zeros((cols, num_antennas)),
        h_var: Array2::from_elem((cols, num_antennas), vh),
        c_post: Array2::zeros((cols, num_antennas)),
        c_var: Array2::from_elem((cols, num_antennas), vc),
        v_h_post: vec![vh; num_antennas],
        v_c_post: vec![vc; num_antennas],
        priors: *priors,
        iteration: 0,
    }
}

#[derive(Debug, Clone)]
pub struct TurboOutput {
    /// Posterior mean of `H` from module B, `QK x M`.
    pub h_est: Array2<Complex64>,
    /// Posterior mean of `C` from module C, `QK x M`.
    pub c_est: Array2<Complex64>,
    pub lambda_d_post: Vec<f64>,
    pub pi_b: Vec<f64>,
    pub pi_c: Vec<f64>,
    pub activity: ActivityVector,
    pub priors: PriorParams,
    pub iterations: usize,
    pub diagnostics: Diagnostics,
}

/// Per-iteration NMSE callback given the current `(H, C)` estimates.
pub type NmseProbe<'a> = &'a dyn Fn(ArrayView2<Complex64>, ArrayView2<Complex64>) -> f64;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Branch {
    H,
    C,
}

struct Engine<'a> {
    y_cols: Vec<Vec<Complex64>>,
    y: ArrayView2<'a, Complex64>,
    cb: &'a PilotCodebook,
    opts: &'a TurboOptions,
    diag: Diagnostics,
}

impl Engine<'_> {
    fn mark(&mut self, stage: Stage) {
        if self.opts.record_trace {
            self.diag.trace.push(stage);
        }
    }

    fn branch(&mut self, st: &mut TurboState, which: Branch) -> Result<()> {
        let cb = self.cb;
        let q = cb.num_blocks();
        let m = self.y_cols.len();
        let cols = cb.num_cols();
        let (s_lin, s_ext_a, s_pri, s_act, s_den, s_avg, s_ext_b) = match which {
            Branch::H => (
                Stage::LinearH,
                Stage::ExtrinsicLinearH,
                Stage::PriorToDenoiserH,
                Stage::ActivityToH,
                Stage::DenoiseH,
                Stage::AverageH,
                Stage::ExtrinsicDenoiserH,
            ),
            Branch::C => (
                Stage::LinearC,
                Stage::ExtrinsicLinearC,
                Stage::PriorToDenoiserC,
                Stage::ActivityToC,
                Stage::DenoiseC,
                Stage::AverageC,
                Stage::ExtrinsicDenoiserC,
            ),
        };

        // Linear estimate and its extrinsic part, per antenna.
        let mut den_pri = Array2::<Complex64>::zeros((cols, m));
        let mut den_var = vec![0.0; m];
        let mut posts = Vec::with_capacity(m);
        self.mark(s_lin);
        for a in 0..m {
            let sigma = sigma_diag(st.h_pri[a].variance, st.c_pri[a].variance, st.priors.sigma_w2, cb)?;
            let post = match which {
                Branch::H => lmmse_posterior_h(&self.y_cols[a], &st.h_pri[a], &st.c_pri[a], &sigma, cb)?,
                Branch::C => lmmse_posterior_c(&self.y_cols[a], &st.h_pri[a], &st.c_pri[a], &sigma, cb)?,
            };
            posts.push(post);
        }
        self.mark(s_ext_a);
        for (a, post) in posts.iter().enumerate() {
            let pri = match which {
                Branch::H => &st.h_pri[a],
                Branch::C => &st.c_pri[a],
            };
            let (ext, clamped) = extrinsic(post, pri);
            self.diag.clamp_events += clamped as usize;
            for (dst, v) in den_pri.column_mut(a).iter_mut().zip(&ext.mean) {
                *dst = *v;
            }
            den_var[a] = ext.variance;
        }
        self.mark(s_pri);

        // Activity prior from the opposite denoiser.
        self.mark(s_act);
        let other = match which {
            Branch::H => &st.llr_c,
            Branch::C => &st.llr_b,
        };
        let lambda_pri: Vec<f64> = other.iter().map(|&l| cross_prior_llr(l, st.priors.lambda)).collect();

        self.mark(s_den);
        let theta = match which {
            Branch::H => st.priors.theta_h,
            Branch::C => st.priors.theta_c,
        };
        let den: BlockDenoise = denoise_all(den_pri.view(), &den_var, theta, &lambda_pri, q)?;

        self.mark(s_avg);
        let v_post: Vec<f64> = column_variance(den.post_var.view())
            .into_iter()
            .map(clamp_variance)
            .collect();

        // Extrinsic of the denoiser, returned to module A.
        self.mark(s_ext_b);
        let beta = self.opts.damping;
        for a in 0..m {
            let post = GaussianMessage::new(den.post_mean.column(a).to_vec(), v_post[a]);
            let pri = GaussianMessage::new(den_pri.column(a).to_vec(), den_var[a]);
            let (ext, clamped) = extrinsic(&post, &pri);
            self.diag.clamp_events += clamped as usize;
            let slot = match which {
                Branch::H => &mut st.h_pri[a],
                Branch::C => &mut st.c_pri[a],
            };
            let next = if beta < 1.0 {
                GaussianMessage::new(
                    ext.mean
                        .iter()
                        .zip(&slot.mean)
                        .map(|(n, o)| n * beta + o * (1.0 - beta))
                        .collect(),
                    beta * ext.variance + (1.0 - beta) * slot.variance,
                )
            } else {
                ext
            };
            if !next.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite message at iteration {} ({:?}, antenna {a})",
                    st.iteration, s_ext_b
                )));
            }
            *slot = next;
        }

        match which {
            Branch::H => {
                st.llr_b = den.llr;
                st.h_post = den.post_mean;
                st.h_var = den.post_var;
                st.v_h_post = v_post;
            }
            Branch::C => {
                st.llr_c = den.llr;
                st.c_post = den.post_mean;
                st.c_var = den.post_var;
                st.v_c_post = v_post;
            }
        }
        Ok(())
    }

    fn fuse(&mut self, st: &mut TurboState) {
        self.mark(Stage::ActivityPosterior);
        st.lambda_d_post = st
            .llr_b
            .iter()
            .zip(&st.llr_c)
            .map(|(&b, &c)| activity_posterior_llr(b, c, st.priors.lambda))
            .collect();
    }

    fn em(&mut self, st: &mut TurboState) -> Result<()> {
        self.mark(Stage::ParameterUpdate);
        let inputs = EmInputs {
            y: self.y,
            h_post: st.h_post.view(),
            h_var: st.h_var.view(),
            c_post: st.c_post.view(),
            c_var: st.c_var.view(),
            lambda_d_post: &st.lambda_d_post,
            v_h_post: &st.v_h_post,
            v_c_post: &st.v_c_post,
        };
        let (next, _) = em_step(st.iteration, &st.priors, &inputs, self.cb, &self.opts.em)?;
        st.priors = next;
        Ok(())
    }
}

fn stacked_means(st: &TurboState) -> Vec<Complex64> {
    st.h_pri
        .iter()
        .chain(&st.c_pri)
        .flat_map(|msg| msg.mean.iter().copied())
        .collect()
}

fn relative_change(new: &[Complex64], old: &[Complex64]) -> f64 {
    let diff: f64 = new.iter().zip(old).map(|(a, b)| (a - b).norm_sqr()).sum();
    let norm: f64 = new.iter().map(|a| a.norm_sqr()).sum();
    if norm == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (diff / norm).sqrt()
    }
}

/// Runs the message-passing loop on `y` (`TN x M`) until convergence or
/// `max_iters`.
pub fn run_turbo_mp(
    y: ArrayView2<Complex64>,
    codebook: &PilotCodebook,
    priors: &PriorParams,
    opts: &TurboOptions,
) -> Result<TurboOutput> {
    run_turbo_mp_with_probe(y, codebook, priors, opts, None)
}

pub fn run_turbo_mp_with_probe(
    y: ArrayView2<Complex64>,
    codebook: &PilotCodebook,
    priors: &PriorParams,
    opts: &TurboOptions,
    probe: Option<NmseProbe<'_>>,
) -> Result<TurboOutput> {
    opts.validate()?;
    priors.validate()?;
    check_len("observation rows", codebook.num_rows(), y.nrows())?;
    if y.ncols() == 0 {
        return Err(Error::Parameter("observation has no antennas".into()));
    }
    if y.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Numeric("non-finite observation".into()));
    }
    let m = y.ncols();
    let mut engine = Engine {
        y_cols: y.axis_iter(Axis(1)).map(|c| c.to_vec()).collect(),
        y,
        cb: codebook,
        opts,
        diag: Diagnostics::default(),
    };
    let mut st = init_state(codebook, priors, m);
    let mut prev = stacked_means(&st);

    for iter in 1..=opts.max_iters {
        st.iteration = iter;
        for _ in 0..opts.inner_h_updates {
            engine.branch(&mut st, Branch::H)?;
        }
        engine.branch(&mut st, Branch::C)?;
        engine.fuse(&mut st);
        if opts.em_enabled && iter >= opts.em_start_iter {
            engine.em(&mut st)?;
        }

        let now = stacked_means(&st);
        let change = relative_change(&now, &prev);
        prev = now;
        let mean = |v: &[GaussianMessage]| v.iter().map(|g| g.variance).sum::<f64>() / v.len() as f64;
        engine.diag.iterations.push(IterationRecord {
            iter,
            v_h: mean(&st.h_pri),
            v_c: mean(&st.c_pri),
            sigma_w2: st.priors.sigma_w2,
            lambda: st.priors.lambda,
            theta_h: st.priors.theta_h,
            theta_c: st.priors.theta_c,
            rel_change: change,
            nmse: probe.map(|f| f(st.h_post.view(), st.c_post.view())),
        });
        if change < opts.rel_change_tol {
            engine.diag.converged = true;
            break;
        }
    }

    let activity = detect(&st.lambda_d_post, opts.threshold)?;
    Ok(TurboOutput {
        pi_b: st.llr_b.iter().map(|&l| sigmoid(l)).collect(),
        pi_c: st.llr_c.iter().map(|&l| sigmoid(l)).collect(),
        h_est: st.h_post,
        c_est: st.c_post,
        lambda_d_post: st.lambda_d_post,
        activity,
        priors: st.priors,
        iterations: st.iteration,
        diagnostics: engine.diag,
    })
}
