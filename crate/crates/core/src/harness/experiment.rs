use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ChannelMode, ExperimentConfig, SweepParam};
use crate::activity::detect;
use crate::channel::{
    blockwise_basis, sample_activity, sample_blockwise_exact_with_activity, sample_channel, BlockwiseBasis,
    BlockwiseStatistics, ChannelRealization, MultipathProfile,
};
use crate::em::PriorParams;
use crate::engine::{run_turbo_mp_with_probe, IterationRecord, NmseProbe, TurboOptions};
use crate::error::{Error, Result};
use crate::metrics::{detection_metrics, nmse, to_db, RocPoint, TrialMetrics};
use crate::pilot::PilotCodebook;
use crate::rng::{complex_normal, derive_seed, rng_from_seed, Stream};

/// Outcome of one Monte-Carlo trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub sweep_value: Option<f64>,
    pub snr_db: f64,
    pub trial: usize,
    pub metrics: TrialMetrics,
    pub iterations: usize,
    pub converged: bool,
    pub clamp_events: usize,
    pub final_priors: PriorParams,
    /// Miss and false-alarm counts per configured ROC threshold.
    pub roc_counts: Vec<(usize, usize)>,
    pub diagnostics: Vec<IterationRecord>,
    pub elapsed_s: f64,
}

/// Aggregate over all trials of one (sweep value, SNR) point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sweep_value: Option<f64>,
    pub snr_db: f64,
    pub trials: usize,
    /// Trials with at least one active device.
    pub nmse_trials: usize,
    /// Mean of the per-trial linear NMSE.
    pub nmse: Option<f64>,
    pub nmse_db: Option<f64>,
    pub misses: usize,
    pub false_alarms: usize,
    /// Event counts pooled over trials, normalized by `K * trials`.
    pub p_miss: f64,
    pub p_false: f64,
    pub pe: f64,
    pub lambda_hat: f64,
    pub mean_iterations: f64,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub config: ExperimentConfig,
    pub sweep_param: Option<SweepParam>,
    pub aggregates: Vec<Aggregate>,
    pub trials: Vec<TrialRecord>,
}

/// Everything shared by the trials of one SNR point.
struct TrialContext<'a> {
    cfg: &'a ExperimentConfig,
    basis: BlockwiseBasis,
    profile: Option<MultipathProfile>,
    stats: BlockwiseStatistics,
    pinned: Option<PilotCodebook>,
    snr_db: f64,
    sweep_value: Option<f64>,
}

/// Ground truth and noisy observation of one trial.
pub struct TrialData {
    pub codebook: PilotCodebook,
    pub realization: ChannelRealization,
    pub y: Array2<Complex64>,
}

/// Codebook, channel and observation of trial `index`, regenerated from the
/// master seed. Channels, activity and unit noise do not depend on the SNR.
pub fn trial_data(cfg: &ExperimentConfig, snr_db: f64, index: usize) -> Result<TrialData> {
    let basis = blockwise_basis(cfg.n, cfg.q)?;
    let profile = match cfg.channel {
        ChannelMode::Physical => Some(cfg.profile()?),
        ChannelMode::SyntheticExact { .. } => None,
    };
    generate(cfg, &basis, profile.as_ref(), None, snr_db, index)
}

fn generate(
    cfg: &ExperimentConfig,
    basis: &BlockwiseBasis,
    profile: Option<&MultipathProfile>,
    pinned: Option<&PilotCodebook>,
    snr_db: f64,
    index: usize,
) -> Result<TrialData> {
    let seed = cfg.master_seed;
    let idx = index as u64;
    let codebook = match pinned {
        Some(cb) => cb.clone(),
        None => PilotCodebook::build(&cfg.codebook_params(derive_seed(seed, Stream::Codebook, idx)))?,
    };
    let activity = sample_activity(cfg.k, cfg.lambda, derive_seed(seed, Stream::Activity, idx))?;
    let realization = match (cfg.channel, profile) {
        (ChannelMode::SyntheticExact { theta_h, theta_c }, _) => {
            sample_blockwise_exact_with_activity(
                basis,
                &activity,
                cfg.m,
                theta_h,
                theta_c,
                derive_seed(seed, Stream::Coefficients, idx),
            )?
            .1
        }
        (ChannelMode::Physical, Some(p)) => sample_channel(
            p,
            &activity,
            cfg.m,
            cfg.n,
            cfg.delta_f,
            derive_seed(seed, Stream::Channel, idx),
        )?,
        (ChannelMode::Physical, None) => return Err(Error::Config("missing multipath profile".into())),
    };
    let mut y = codebook.apply_pilots(&realization.g)?;
    let std = cfg.noise_variance(snr_db).sqrt();
    let mut rng = rng_from_seed(derive_seed(seed, Stream::Noise, idx));
    for v in y.iter_mut() {
        *v += complex_normal(&mut rng, 1.0) * std;
    }
    Ok(TrialData {
        codebook,
        realization,
        y,
    })
}

/// Known-statistics priors: the effective noise includes the expected
/// energy of the block-wise model residual.
pub fn known_priors(cfg: &ExperimentConfig, stats: &BlockwiseStatistics, snr_db: f64) -> PriorParams {
    let residual = cfg.lambda * cfg.k as f64 * cfg.power * stats.delta_var;
    PriorParams {
        theta_h: stats.theta_h,
        theta_c: stats.theta_c.max(1e-12),
        sigma_w2: cfg.noise_variance(snr_db) + residual,
        lambda: cfg.lambda,
    }
}

fn run_trial(ctx: &TrialContext<'_>, index: usize) -> Result<TrialRecord> {
    let start = Instant::now();
    let cfg = ctx.cfg;
    let data = generate(
        cfg,
        &ctx.basis,
        ctx.profile.as_ref(),
        ctx.pinned.as_ref(),
        ctx.snr_db,
        index,
    )?;
    let priors = if cfg.em {
        PriorParams::em_initial(data.y.view())
    } else {
        known_priors(cfg, &ctx.stats, ctx.snr_db)
    };
    let real = &data.realization;
    let probe_fn = |h: ArrayView2<Complex64>, c: ArrayView2<Complex64>| {
        nmse(&real.g, h, c, &ctx.basis, &real.activity, &real.activity)
            .ok()
            .flatten()
            .unwrap_or(f64::NAN)
    };
    let probe: Option<NmseProbe<'_>> = cfg.record_iterations.then_some(&probe_fn as NmseProbe<'_>);
    let opts = TurboOptions {
        em_enabled: cfg.em,
        ..cfg.turbo
    };
    let out = run_turbo_mp_with_probe(data.y.view(), &data.codebook, &priors, &opts, probe)?;

    let value = nmse(
        &real.g,
        out.h_est.view(),
        out.c_est.view(),
        &ctx.basis,
        &real.activity,
        &out.activity,
    )?;
    let metrics = detection_metrics(&real.activity, &out.activity)?.with_nmse(value);
    let roc_counts = cfg
        .roc_thresholds
        .iter()
        .map(|&t| {
            let m = detection_metrics(&real.activity, &detect(&out.lambda_d_post, t)?)?;
            Ok((m.misses, m.false_alarms))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialRecord {
        sweep_value: ctx.sweep_value,
        snr_db: ctx.snr_db,
        trial: index,
        metrics,
        iterations: out.iterations,
        converged: out.diagnostics.converged,
        clamp_events: out.diagnostics.clamp_events,
        final_priors: out.priors,
        roc_counts,
        diagnostics: if cfg.record_iterations {
            out.diagnostics.iterations
        } else {
            Vec::new()
        },
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Order-independent reduction of trial records of one point.
pub fn aggregate(cfg: &ExperimentConfig, records: &[TrialRecord]) -> Aggregate {
    let mut sorted: Vec<&TrialRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.trial);
    let trials = sorted.len();
    let nmse_vals: Vec<f64> = sorted.iter().filter_map(|r| r.metrics.nmse).collect();
    let nmse = (!nmse_vals.is_empty()).then(|| nmse_vals.iter().sum::<f64>() / nmse_vals.len() as f64);
    let misses: usize = sorted.iter().map(|r| r.metrics.misses).sum();
    let false_alarms: usize = sorted.iter().map(|r| r.metrics.false_alarms).sum();
    let events = (cfg.k * trials).max(1) as f64;
    let per_trial = trials.max(1) as f64;
    let roc = cfg
        .roc_thresholds
        .iter()
        .enumerate()
        .map(|(i, &threshold)| {
            let (mi, fa) = sorted
                .iter()
                .fold((0, 0), |(a, b), r| (a + r.roc_counts[i].0, b + r.roc_counts[i].1));
            RocPoint {
                threshold,
                p_miss: mi as f64 / events,
                p_false: fa as f64 / events,
            }
        })
        .collect();
    let (sweep_value, snr_db) = sorted.first().map_or((None, f64::NAN), |r| (r.sweep_value, r.snr_db));
    Aggregate {
        sweep_value,
        snr_db,
        trials,
        nmse_trials: nmse_vals.len(),
        nmse,
        nmse_db: nmse.map(to_db),
        misses,
        false_alarms,
        p_miss: misses as f64 / events,
        p_false: false_alarms as f64 / events,
        pe: (misses + false_alarms) as f64 / events,
        lambda_hat: sorted.iter().map(|r| r.final_priors.lambda).sum::<f64>() / per_trial,
        mean_iterations: sorted.iter().map(|r| r.iterations as f64).sum::<f64>() / per_trial,
        roc,
    }
}

fn run_point(cfg: &ExperimentConfig, sweep_value: Option<f64>, out: &mut ResultSet) -> Result<()> {
    cfg.validate()?;
    let basis = blockwise_basis(cfg.n, cfg.q)?;
    let profile = match cfg.channel {
        ChannelMode::Physical => Some(cfg.profile()?),
        ChannelMode::SyntheticExact { .. } => None,
    };
    let stats = cfg.model_statistics()?;
    let pinned = if cfg.pin_codebook {
        Some(PilotCodebook::build(&cfg.codebook_params(derive_seed(
            cfg.master_seed,
            Stream::Codebook,
            0,
        )))?)
    } else {
        None
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    for &snr_db in &cfg.snr_db {
        let ctx = TrialContext {
            cfg,
            basis: basis.clone(),
            profile: profile.clone(),
            stats,
            pinned: pinned.clone(),
            snr_db,
            sweep_value,
        };
        let records = pool.install(|| {
            (0..cfg.trials)
                .into_par_iter()
                .map(|i| run_trial(&ctx, i))
                .collect::<Result<Vec<_>>>()
        })?;
        out.aggregates.push(aggregate(cfg, &records));
        out.trials.extend(records);
    }
    Ok(())
}

/// Runs all SNR points of `cfg`. Configuration errors are reported before
/// any trial starts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultSet> {
    cfg.validate()?;
    let mut out = ResultSet {
        config: cfg.clone(),
        sweep_param: None,
        aggregates: Vec::new(),
        trials: Vec::new(),
    };
    run_point(cfg, None, &mut out)?;
    Ok(out)
}

/// Runs `cfg` once per value of `param`. Every grid point is validated first.
pub fn run_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<ResultSet> {
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| {
            let c = param.apply(cfg, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut out = ResultSet {
        config: cfg.clone(),
        sweep_param: Some(param),
        aggregates: Vec::new(),
        trials: Vec::new(),
    };
    for (c, &v) in configs.iter().zip(values) {
        run_point(c, Some(v), &mut out)?;
    }
    Ok(out)
}
