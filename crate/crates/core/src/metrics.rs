//! Channel-estimation and detection-error metrics.

use ndarray::{Array3, ArrayView2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::activity::detect;
use crate::channel::{ActivityVector, BlockwiseBasis};
use crate::error::{check_len, Result};

/// Metrics of one trial. Detection rates are normalized by `K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    /// `None` when the trial had no active device.
    pub nmse: Option<f64>,
    pub nmse_db: Option<f64>,
    pub p_miss: f64,
    pub p_false: f64,
    pub pe: f64,
    pub misses: usize,
    pub false_alarms: usize,
    pub num_devices: usize,
    pub num_active: usize,
}

impl TrialMetrics {
    pub fn with_nmse(mut self, nmse: Option<f64>) -> Self {
        self.nmse = nmse;
        self.nmse_db = nmse.map(to_db);
        self
    }
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn from_db(x: f64) -> f64 {
    10f64.powf(x / 10.0)
}

/// Aggregate NMSE over truly active devices, with the reconstructed energy of
/// false-positive devices added to the error. Returns `None` if no device is
/// active.
///
/// `g` is `K x N x M`; `h_est`, `c_est` are `QK x M`.
pub fn nmse(
    g: &Array3<Complex64>,
    h_est: ArrayView2<Complex64>,
    c_est: ArrayView2<Complex64>,
    basis: &BlockwiseBasis,
    truth: &ActivityVector,
    detected: &ActivityVector,
) -> Result<Option<f64>> {
    let (k, n, m) = g.dim();
    let q = basis.num_blocks();
    check_len("subcarriers", basis.num_subcarriers(), n)?;
    check_len("truth activity", k, truth.len())?;
    check_len("detected activity", k, detected.len())?;
    check_len("H estimate rows", q * k, h_est.nrows())?;
    check_len("C estimate rows", q * k, c_est.nrows())?;
    check_len("H estimate columns", m, h_est.ncols())?;
    check_len("C estimate columns", m, c_est.ncols())?;

    let mut err = 0.0;
    let mut energy = 0.0;
    for dev in 0..k {
        let active = truth.is_active(dev);
        if !active && !detected.is_active(dev) {
            continue;
        }
        let span = ndarray::s![dev * q..(dev + 1) * q, ..];
        let est = basis.expand(h_est.slice(span), c_est.slice(span));
        let gk = g.index_axis(Axis(0), dev);
        if active {
            energy += gk.iter().map(|v| v.norm_sqr()).sum::<f64>();
            err += gk.iter().zip(est.iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        } else {
            err += est.iter().map(|v| v.norm_sqr()).sum::<f64>();
        }
    }
    if truth.count_active() == 0 || energy == 0.0 {
        return Ok(None);
    }
    Ok(Some(err / energy))
}

pub fn detection_metrics(truth: &ActivityVector, detected: &ActivityVector) -> Result<TrialMetrics> {
    check_len("detected activity", truth.len(), detected.len())?;
    let k = truth.len();
    let mut misses = 0;
    let mut false_alarms = 0;
    for (&a, &b) in truth.as_slice().iter().zip(detected.as_slice()) {
        misses += (a && !b) as usize;
        false_alarms += (!a && b) as usize;
    }
    let norm = k.max(1) as f64;
    let p_miss = misses as f64 / norm;
    let p_false = false_alarms as f64 / norm;
    Ok(TrialMetrics {
        nmse: None,
        nmse_db: None,
        p_miss,
        p_false,
        pe: p_miss + p_false,
        misses,
        false_alarms,
        num_devices: k,
        num_active: truth.count_active(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_false: f64,
}

pub fn roc_sweep(lambda_d_post: &[f64], truth: &ActivityVector, thresholds: &[f64]) -> Result<Vec<RocPoint>> {
    check_len("posteriors", truth.len(), lambda_d_post.len())?;
    thresholds
        .iter()
        .map(|&t| {
            let m = detection_metrics(truth, &detect(lambda_d_post, t)?)?;
            Ok(RocPoint {
                threshold: t,
                p_miss: m.p_miss,
                p_false: m.p_false,
            })
        })
        .collect()
}

/// `count` evenly spaced thresholds strictly inside `(0, 1)`.
pub fn threshold_grid(count: usize) -> Vec<f64> {
    (1..=count).map(|i| i as f64 / (count + 1) as f64).collect()
}
