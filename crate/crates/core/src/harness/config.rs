use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{blockwise_basis, blockwise_statistics, BlockwiseStatistics, MultipathProfile};
use crate::engine::TurboOptions;
use crate::error::{Error, Result};
use crate::metrics::from_db;
use crate::pilot::{CodebookParams, SelectionMode};

/// Profile used when no `pdp_file` is configured.
pub const DEFAULT_PDP: &str = include_str!("../../profiles/tdl_c_like_300ns.pdp");

/// How ground-truth channels are generated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ChannelMode {
    /// Multipath responses from the power-delay profile.
    #[default]
    Physical,
    /// Data drawn exactly from the block-wise prior with known variances.
    SyntheticExact { theta_h: f64, theta_c: f64 },
}

/// One experiment: a fixed system configuration evaluated over an SNR list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub k: usize,
    pub n: usize,
    pub t: usize,
    pub q: usize,
    pub m: usize,
    #[serde(default = "default_delta_f")]
    pub delta_f: f64,
    pub snr_db: Vec<f64>,
    pub lambda: f64,
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default)]
    pub pdp_file: Option<PathBuf>,
    #[serde(default)]
    pub channel: ChannelMode,
    pub trials: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub turbo: TurboOptions,
    /// Learn the prior parameters instead of using the known statistics.
    #[serde(default)]
    pub em: bool,
    /// Thresholds for pooled ROC points; empty disables ROC output.
    #[serde(default)]
    pub roc_thresholds: Vec<f64>,
    #[serde(default)]
    pub selection: SelectionMode,
    /// Reuse one codebook for every trial instead of redrawing pilots.
    #[serde(default)]
    pub pin_codebook: bool,
    /// Worker threads; `None` uses all cores.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub record_iterations: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_delta_f() -> f64 {
    15e3
}

fn default_power() -> f64 {
    1.0
}

impl ExperimentConfig {
    /// Reference system: `K=1000, N=72, T=8, Q=4, M=8`, `lambda=0.05`.
    pub fn reference_scenario() -> Self {
        Self {
            k: 1000,
            n: 72,
            t: 8,
            q: 4,
            m: 8,
            delta_f: default_delta_f(),
            snr_db: vec![-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0],
            lambda: 0.05,
            power: 1.0,
            pdp_file: None,
            channel: ChannelMode::Physical,
            trials: 200,
            master_seed: 1,
            turbo: TurboOptions::default(),
            em: true,
            roc_thresholds: Vec::new(),
            selection: SelectionMode::Global,
            pin_codebook: false,
            workers: None,
            record_iterations: false,
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Reads a JSON config; a relative `pdp_file` is resolved against the
    /// config's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(pdp), Some(dir)) = (&cfg.pdp_file, path.parent()) {
            if pdp.is_relative() {
                cfg.pdp_file = Some(dir.join(pdp));
            }
        }
        Ok(cfg)
    }

    pub fn profile(&self) -> Result<MultipathProfile> {
        match &self.pdp_file {
            Some(p) => {
                MultipathProfile::from_file(p).map_err(|e| Error::Config(format!("pdp file {}: {e}", p.display())))
            }
            None => MultipathProfile::parse(DEFAULT_PDP),
        }
    }

    pub fn codebook_params(&self, seed: u64) -> CodebookParams {
        CodebookParams {
            k: self.k,
            n: self.n,
            t: self.t,
            q: self.q,
            power: self.power,
            seed,
            mode: self.selection,
        }
    }

    /// `sigma_N^2 = P / SNR`.
    pub fn noise_variance(&self, snr_db: f64) -> f64 {
        self.power / from_db(snr_db)
    }

    /// Second-order statistics of the ground truth under the block-wise model.
    pub fn model_statistics(&self) -> Result<BlockwiseStatistics> {
        let basis = blockwise_basis(self.n, self.q)?;
        match self.channel {
            ChannelMode::Physical => blockwise_statistics(&self.profile()?, &basis, self.delta_f),
            ChannelMode::SyntheticExact { theta_h, theta_c } => Ok(BlockwiseStatistics {
                theta_h,
                theta_c,
                delta_var: 0.0,
            }),
        }
    }

    /// Checks every constraint before any trial runs.
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if [self.k, self.n, self.t, self.q, self.m].contains(&0) {
            return cfg("K, N, T, Q and M must all be >= 1".into());
        }
        if self.trials == 0 {
            return cfg("trials must be >= 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return cfg(format!("lambda {} outside (0, 1)", self.lambda));
        }
        if !(self.delta_f > 0.0) || !self.delta_f.is_finite() {
            return cfg("delta_f must be > 0".into());
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return cfg("SNR values must be finite".into());
        }
        if self.roc_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0))
            || self.roc_thresholds.windows(2).any(|w| w[1] <= w[0])
        {
            return cfg("ROC thresholds must be increasing and inside (0, 1)".into());
        }
        if self.workers == Some(0) {
            return cfg("workers must be >= 1".into());
        }
        if let ChannelMode::SyntheticExact { theta_h, theta_c } = self.channel {
            if !(theta_h > 0.0) || !(theta_c > 0.0) {
                return cfg("synthetic prior variances must be > 0".into());
            }
        }
        blockwise_basis(self.n, self.q).map_err(as_config)?;
        self.codebook_params(0).validate().map_err(as_config)?;
        self.turbo.validate().map_err(as_config)?;
        if matches!(self.channel, ChannelMode::Physical) {
            self.profile()?;
        }
        Ok(())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Configuration field varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    K,
    N,
    T,
    Q,
    M,
    Lambda,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "k" => Self::K,
            "n" => Self::N,
            "t" => Self::T,
            "q" => Self::Q,
            "m" => Self::M,
            "lambda" => Self::Lambda,
            _ => return Err(Error::Config(format!("unknown sweep parameter '{s}'"))),
        })
    }
}

impl SweepParam {
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{self:?} needs a positive integer, got {value}")))
            }
        };
        match self {
            Self::K => cfg.k = count()?,
            Self::N => cfg.n = count()?,
            Self::T => cfg.t = count()?,
            Self::Q => cfg.q = count()?,
            Self::M => cfg.m = count()?,
            Self::Lambda => cfg.lambda = value,
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            k: 64,
            n: 8,
            t: 4,
            q: 2,
            m: 2,
            snr_db: vec![10.0],
            trials: 2,
            ..ExperimentConfig::reference_scenario()
        }
    }

    #[test]
    fn reference_scenario_is_valid() {
        ExperimentConfig::reference_scenario().validate().unwrap();
        small().validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            ExperimentConfig { q: 3, ..small() },
            ExperimentConfig { k: 16, ..small() },
            ExperimentConfig { lambda: 0.0, ..small() },
            ExperimentConfig { trials: 0, ..small() },
            ExperimentConfig {
                roc_thresholds: vec![0.5, 0.2],
                ..small()
            },
            ExperimentConfig {
                pdp_file: Some("/nonexistent.pdp".into()),
                ..small()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
        assert!(ExperimentConfig::from_json("{\"k\": 1, \"bogus\": 2}").is_err());
    }

    #[test]
    fn json_roundtrip_with_defaults() {
        let text = r#"{"k": 64, "n": 8, "t": 4, "q": 2, "m": 2, "snr_db": [0, 10],
            "lambda": 0.1, "trials": 3, "master_seed": 9,
            "channel": {"kind": "synthetic_exact", "theta_h": 1.0, "theta_c": 0.002}}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.delta_f, 15e3);
        assert_eq!(cfg.turbo, TurboOptions::default());
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn snr_convention() {
        let cfg = small();
        assert!((cfg.noise_variance(10.0) - 0.1).abs() < 1e-15);
        assert_eq!(cfg.noise_variance(0.0), 1.0);
    }

    #[test]
    fn sweep_apply() {
        let cfg = SweepParam::Q.apply(&small(), 4.0).unwrap();
        assert_eq!(cfg.q, 4);
        assert!(SweepParam::Q.apply(&small(), 2.5).is_err());
        assert_eq!("lambda".parse::<SweepParam>().unwrap(), SweepParam::Lambda);
        assert!("x".parse::<SweepParam>().is_err());
    }

    #[test]
    fn default_profile_has_target_spread() {
        let p = MultipathProfile::parse(DEFAULT_PDP).unwrap();
        assert!((p.rms_delay_spread() - 300e-9).abs() < 1e-9);
    }
}
