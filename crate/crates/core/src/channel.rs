//! Device activity, multipath frequency responses and the block-wise linear
//! decomposition of a frequency response into per-sub-block means and slopes.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{complex_normal, derive_seed, rng_from_seed, Stream};

/// One multipath tap: linear power fraction and delay in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub power: f64,
    pub delay: f64,
}

/// Power-delay profile of a device class.
///
/// Powers are strictly positive and sum to one, delays are non-negative and
/// strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipathProfile {
    taps: Vec<Tap>,
}

impl MultipathProfile {
    pub fn new(taps: Vec<Tap>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::Parameter("multipath profile has no taps".into()));
        }
        let mut total = 0.0;
        for (i, tap) in taps.iter().enumerate() {
            if !(tap.power > 0.0) || !tap.power.is_finite() {
                return Err(Error::Parameter(format!("tap {i}: power must be > 0")));
            }
            if !(tap.delay >= 0.0) || !tap.delay.is_finite() {
                return Err(Error::Parameter(format!("tap {i}: delay must be >= 0")));
            }
            if i > 0 && tap.delay <= taps[i - 1].delay {
                return Err(Error::Parameter(format!("tap {i}: delays must be strictly increasing")));
            }
            total += tap.power;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("tap powers sum to {total}, expected 1")));
        }
        Ok(Self { taps })
    }

    /// Builds a profile from relative powers, rescaling them to unit total.
    pub fn normalized(mut taps: Vec<Tap>) -> Result<Self> {
        let total: f64 = taps.iter().map(|t| t.power).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Parameter("tap powers must be positive".into()));
        }
        for t in &mut taps {
            t.power /= total;
        }
        Self::new(taps)
    }

    /// Flat fading: one unit-power tap at zero delay.
    pub fn single_tap() -> Self {
        Self {
            taps: vec![Tap { power: 1.0, delay: 0.0 }],
        }
    }

    /// Parses the plain-text PDP format: one `power delay_seconds` pair per
    /// line, `#` starts a comment. Powers are relative and get normalized.
    pub fn parse(text: &str) -> Result<Self> {
        let mut taps = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let parse = |f: Option<&str>| -> Result<f64> {
                f.ok_or_else(|| Error::Parameter(format!("pdp line {}: missing field", lineno + 1)))?
                    .parse::<f64>()
                    .map_err(|e| Error::Parameter(format!("pdp line {}: {e}", lineno + 1)))
            };
            let power = parse(fields.next())?;
            let delay = parse(fields.next())?;
            if fields.next().is_some() {
                return Err(Error::Parameter(format!(
                    "pdp line {}: expected two fields",
                    lineno + 1
                )));
            }
            taps.push(Tap { power, delay });
        }
        Self::normalized(taps)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    /// Root-mean-square delay spread in seconds.
    pub fn rms_delay_spread(&self) -> f64 {
        let mean: f64 = self.taps.iter().map(|t| t.power * t.delay).sum();
        let second: f64 = self.taps.iter().map(|t| t.power * t.delay * t.delay).sum();
        (second - mean * mean).max(0.0).sqrt()
    }
}

/// Binary device activity pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityVector(Vec<bool>);

impl ActivityVector {
    pub fn new(alpha: Vec<bool>) -> Self {
        Self(alpha)
    }

    pub fn all(k: usize, active: bool) -> Self {
        Self(vec![active; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.0[k]
    }

    pub fn count_active(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter_map(|(k, &a)| a.then_some(k)).collect()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// Ground-truth channel of one trial: `g[[k, n, m]]` is the response of
/// device `k` on subcarrier `n` at antenna `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub g: Array3<Complex64>,
    pub activity: ActivityVector,
    /// Subcarrier spacing in Hz; `None` for synthetic data built directly
    /// from the block-wise model.
    pub subcarrier_spacing: Option<f64>,
}

impl ChannelRealization {
    pub fn num_devices(&self) -> usize {
        self.g.dim().0
    }

    pub fn num_subcarriers(&self) -> usize {
        self.g.dim().1
    }

    pub fn num_antennas(&self) -> usize {
        self.g.dim().2
    }

    /// `N x M` response of device `k`.
    pub fn device(&self, k: usize) -> ArrayView2<'_, Complex64> {
        self.g.index_axis(Axis(0), k)
    }
}

/// Draws i.i.d. Bernoulli(`lambda`) activity for `k` devices.
pub fn sample_activity(k: usize, lambda: f64, seed: u64) -> Result<ActivityVector> {
    if k == 0 {
        return Err(Error::Parameter("device count must be >= 1".into()));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Parameter(format!(
            "activity probability {lambda} outside (0, 1)"
        )));
    }
    let mut rng = rng_from_seed(seed);
    Ok(ActivityVector((0..k).map(|_| rng.random::<f64>() < lambda).collect()))
}

/// Samples multipath frequency responses
/// `g[k,n,m] = alpha_k * sum_l sqrt(rho_l) beta_{k,m,l} exp(-j 2 pi df tau_l n)`
/// with subcarriers numbered `n = 1..N`.
///
/// Tap gains are drawn for every device, active or not, so the same seed
/// gives the same gains under a different activity pattern.
pub fn sample_channel(
    profile: &MultipathProfile,
    activity: &ActivityVector,
    num_antennas: usize,
    num_subcarriers: usize,
    delta_f: f64,
    seed: u64,
) -> Result<ChannelRealization> {
    if num_antennas == 0 || num_subcarriers == 0 {
        return Err(Error::Parameter("antenna and subcarrier counts must be >= 1".into()));
    }
    if !(delta_f > 0.0) {
        return Err(Error::Parameter("subcarrier spacing must be > 0".into()));
    }
    let k = activity.len();
    let taps = profile.taps();
    // phase[l][n] = exp(-j 2 pi df tau_l (n+1))
    let phase: Vec<Vec<Complex64>> = taps
        .iter()
        .map(|t| {
            (0..num_subcarriers)
                .map(|n| Complex64::from_polar(1.0, -2.0 * PI * delta_f * t.delay * (n + 1) as f64))
                .collect()
        })
        .collect();
    let amp: Vec<f64> = taps.iter().map(|t| t.power.sqrt()).collect();

    let mut rng = rng_from_seed(seed);
    let mut g = Array3::<Complex64>::zeros((k, num_subcarriers, num_antennas));
    for dev in 0..k {
        for m in 0..num_antennas {
            let beta: Vec<Complex64> = (0..taps.len()).map(|_| complex_normal(&mut rng, 1.0)).collect();
            if !activity.is_active(dev) {
                continue;
            }
            for n in 0..num_subcarriers {
                g[[dev, n, m]] = (0..taps.len()).map(|l| beta[l] * amp[l] * phase[l][n]).sum();
            }
        }
    }
    Ok(ChannelRealization {
        g,
        activity: activity.clone(),
        subcarrier_spacing: Some(delta_f),
    })
}

/// Sub-block structure of the block-wise linear model.
///
/// `E1` stacks all-ones columns and `E2` stacks the offset vector `d` on
/// disjoint row ranges of length `N/Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockwiseBasis {
    n: usize,
    q: usize,
    offsets: Vec<f64>,
}

impl BlockwiseBasis {
    pub fn num_subcarriers(&self) -> usize {
        self.n
    }

    pub fn num_blocks(&self) -> usize {
        self.q
    }

    pub fn block_len(&self) -> usize {
        self.n / self.q
    }

    /// Offsets `d = [-N/(2Q)+1, ..., N/(2Q)]` of each subcarrier from its
    /// sub-block midpoint.
    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// Sub-block index and offset of subcarrier `n` (0-based).
    pub fn locate(&self, n: usize) -> (usize, f64) {
        let len = self.block_len();
        (n / len, self.offsets[n % len])
    }

    pub fn e1(&self) -> Array2<f64> {
        let len = self.block_len();
        Array2::from_shape_fn((self.n, self.q), |(n, q)| if n / len == q { 1.0 } else { 0.0 })
    }

    pub fn e2(&self) -> Array2<f64> {
        let len = self.block_len();
        Array2::from_shape_fn(
            (self.n, self.q),
            |(n, q)| {
                if n / len == q {
                    self.offsets[n % len]
                } else {
                    0.0
                }
            },
        )
    }

    /// `E1 h + E2 c` for `Q x M` mean and slope blocks.
    pub fn expand(&self, h: ArrayView2<Complex64>, c: ArrayView2<Complex64>) -> Array2<Complex64> {
        let m = h.ncols();
        Array2::from_shape_fn((self.n, m), |(n, a)| {
            let (q, d) = self.locate(n);
            h[[q, a]] + c[[q, a]] * d
        })
    }
}

/// Builds `E1`, `E2` for `N` subcarriers split into `Q` equal sub-blocks.
pub fn blockwise_basis(n: usize, q: usize) -> Result<BlockwiseBasis> {
    if q == 0 || n == 0 {
        return Err(Error::Config("N and Q must be >= 1".into()));
    }
    if !n.is_multiple_of(q) {
        return Err(Error::Config(format!("Q={q} does not divide N={n}")));
    }
    let len = n / q;
    if len < 2 {
        return Err(Error::Config(format!(
            "each sub-block needs at least 2 subcarriers (N={n}, Q={q})"
        )));
    }
    let half = n as f64 / (2.0 * q as f64);
    let offsets = (1..=len).map(|j| j as f64 - half).collect();
    Ok(BlockwiseBasis { n, q, offsets })
}

/// Block-wise decomposition `G_k = E1 H_k + E2 C_k + Delta_k`.
///
/// `h` and `c` are `QK x M` with row `k*Q + q`; `delta` is `K x N x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockwiseTruth {
    pub h: Array2<Complex64>,
    pub c: Array2<Complex64>,
    pub delta: Array3<Complex64>,
}

impl BlockwiseTruth {
    pub fn num_blocks(&self) -> usize {
        self.h.nrows() / self.delta.dim().0
    }

    /// `Q x M` mean block of device `k`.
    pub fn h_block(&self, k: usize) -> ArrayView2<'_, Complex64> {
        let q = self.num_blocks();
        self.h.slice(ndarray::s![k * q..(k + 1) * q, ..])
    }

    pub fn c_block(&self, k: usize) -> ArrayView2<'_, Complex64> {
        let q = self.num_blocks();
        self.c.slice(ndarray::s![k * q..(k + 1) * q, ..])
    }

    /// Rebuilds `G` from the decomposition.
    pub fn reconstruct(&self, basis: &BlockwiseBasis) -> Array3<Complex64> {
        let mut g = self.delta.clone();
        for k in 0..g.dim().0 {
            let fit = basis.expand(self.h_block(k), self.c_block(k));
            let mut slice = g.index_axis_mut(Axis(0), k);
            slice += &fit;
        }
        g
    }
}

/// Least-squares fit of a line over each sub-block, per device and antenna.
///
/// The offset vector is not zero-mean (one more positive entry than
/// negative), so mean and slope are solved jointly from the 2x2 normal
/// equations.
pub fn project_blockwise(real: &ChannelRealization, basis: &BlockwiseBasis) -> Result<BlockwiseTruth> {
    let (k, n, m) = real.g.dim();
    check_len("subcarriers", basis.num_subcarriers(), n)?;
    let q = basis.num_blocks();
    let len = basis.block_len();
    let d = basis.offsets();

    let s0 = len as f64;
    let s1: f64 = d.iter().sum();
    let s2: f64 = d.iter().map(|x| x * x).sum();
    let det = s0 * s2 - s1 * s1;

    let mut h = Array2::<Complex64>::zeros((q * k, m));
    let mut c = Array2::<Complex64>::zeros((q * k, m));
    let mut delta = Array3::<Complex64>::zeros((k, n, m));
    for dev in 0..k {
        for a in 0..m {
            for blk in 0..q {
                let rows = blk * len..(blk + 1) * len;
                let mut t0 = Complex64::new(0.0, 0.0);
                let mut t1 = Complex64::new(0.0, 0.0);
                for (j, nn) in rows.clone().enumerate() {
                    let v = real.g[[dev, nn, a]];
                    t0 += v;
                    t1 += v * d[j];
                }
                let hh = (t0 * s2 - t1 * s1) / det;
                let cc = (t1 * s0 - t0 * s1) / det;
                h[[dev * q + blk, a]] = hh;
                c[[dev * q + blk, a]] = cc;
                for (j, nn) in rows.enumerate() {
                    delta[[dev, nn, a]] = real.g[[dev, nn, a]] - hh - cc * d[j];
                }
            }
        }
    }
    Ok(BlockwiseTruth { h, c, delta })
}

/// Synthetic data drawn exactly from the block-wise Bernoulli-Gaussian prior
/// (no model mismatch) for a given activity pattern.
pub fn sample_blockwise_exact_with_activity(
    basis: &BlockwiseBasis,
    activity: &ActivityVector,
    num_antennas: usize,
    theta_h: f64,
    theta_c: f64,
    seed: u64,
) -> Result<(BlockwiseTruth, ChannelRealization)> {
    if !(theta_h >= 0.0) || !(theta_c >= 0.0) {
        return Err(Error::Parameter("prior variances must be >= 0".into()));
    }
    if num_antennas == 0 {
        return Err(Error::Parameter("antenna count must be >= 1".into()));
    }
    let k = activity.len();
    let q = basis.num_blocks();
    let n = basis.num_subcarriers();
    let mut rng = rng_from_seed(seed);
    let mut h = Array2::<Complex64>::zeros((q * k, num_antennas));
    let mut c = Array2::<Complex64>::zeros((q * k, num_antennas));
    for dev in 0..k {
        for row in dev * q..(dev + 1) * q {
            for a in 0..num_antennas {
                let hv = complex_normal(&mut rng, theta_h);
                let cv = complex_normal(&mut rng, theta_c);
                if activity.is_active(dev) {
                    h[[row, a]] = hv;
                    c[[row, a]] = cv;
                }
            }
        }
    }
    let truth = BlockwiseTruth {
        h,
        c,
        delta: Array3::zeros((k, n, num_antennas)),
    };
    let g = truth.reconstruct(basis);
    Ok((
        truth,
        ChannelRealization {
            g,
            activity: activity.clone(),
            subcarrier_spacing: None,
        },
    ))
}

/// Synthetic block-wise data with activity drawn from `lambda`.
pub fn sample_blockwise_exact(
    basis: &BlockwiseBasis,
    k: usize,
    num_antennas: usize,
    lambda: f64,
    theta_h: f64,
    theta_c: f64,
    seed: u64,
) -> Result<(BlockwiseTruth, ChannelRealization)> {
    let activity = sample_activity(k, lambda, derive_seed(seed, Stream::Activity, 0))?;
    sample_blockwise_exact_with_activity(
        basis,
        &activity,
        num_antennas,
        theta_h,
        theta_c,
        derive_seed(seed, Stream::Coefficients, 0),
    )
}

/// Second-order statistics of the block-wise decomposition of a physical
/// channel drawn from a power-delay profile, per active device and antenna.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockwiseStatistics {
    /// `E|h|^2` of a sub-block mean.
    pub theta_h: f64,
    /// `E|c|^2` of a sub-block slope.
    pub theta_c: f64,
    /// `E|delta|^2` of the residual, averaged over subcarriers.
    pub delta_var: f64,
}

/// Closed-form statistics of [`project_blockwise`] applied to channels from
/// [`sample_channel`]. The fit is linear in the tap gains, so each tap
/// contributes its power times the squared fit of its phase ramp.
pub fn blockwise_statistics(
    profile: &MultipathProfile,
    basis: &BlockwiseBasis,
    delta_f: f64,
) -> Result<BlockwiseStatistics> {
    if !(delta_f > 0.0) {
        return Err(Error::Parameter("subcarrier spacing must be > 0".into()));
    }
    let d = basis.offsets();
    let len = d.len();
    let s0 = len as f64;
    let s1: f64 = d.iter().sum();
    let s2: f64 = d.iter().map(|x| x * x).sum();
    let det = s0 * s2 - s1 * s1;

    let mut stats = BlockwiseStatistics {
        theta_h: 0.0,
        theta_c: 0.0,
        delta_var: 0.0,
    };
    for tap in profile.taps() {
        let ramp: Vec<Complex64> = (0..len)
            .map(|j| Complex64::from_polar(1.0, -2.0 * PI * delta_f * tap.delay * j as f64))
            .collect();
        let t0: Complex64 = ramp.iter().sum();
        let t1: Complex64 = ramp.iter().zip(d).map(|(e, x)| e * x).sum();
        let h = (t0 * s2 - t1 * s1) / det;
        let c = (t1 * s0 - t0 * s1) / det;
        let resid: f64 = ramp.iter().zip(d).map(|(e, x)| (e - h - c * x).norm_sqr()).sum::<f64>() / s0;
        stats.theta_h += tap.power * h.norm_sqr();
        stats.theta_c += tap.power * c.norm_sqr();
        stats.delta_var += tap.power * resid;
    }
    Ok(stats)
}
