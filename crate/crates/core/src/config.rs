//! Experiment configuration files (TOML) and the shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::field::GridPartition;
use crate::fiber::detect::{ComponentChoice, DetectConfig};
use crate::models::{Distortion, SystemModel};
use crate::spectral::steps_for;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    OuPair,
    Ou1d,
    Skew,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionConfig {
    pub angle: f64,
    pub bend: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    /// Noise variance σ².
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distortion: Option<DistortionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UlamConfig {
    pub samples: usize,
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    /// Flow times for the convergence sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<f64>>,
    #[serde(default = "default_sweep_tolerance")]
    pub sweep_tolerance: f64,
}

fn default_sweep_tolerance() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    pub count: usize,
    pub tol: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { count: 10, tol: 1e-11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiberConfig {
    pub level: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
    pub nbins: usize,
    /// Fiber flow time τ̂.
    pub tau: f64,
    pub samples: usize,
    pub threshold: f64,
    /// Sample count of the validity check.
    pub validate_q: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub component: Option<usize>,
}

impl Default for FiberConfig {
    fn default() -> Self {
        Self {
            level: 0.8,
            levels: None,
            nbins: 100,
            tau: 4e-5,
            samples: 1000,
            threshold: 100.0,
            validate_q: 1000,
            component: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReduceConfig {
    pub q: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_grid: Option<Vec<usize>>,
    /// Level of θ whose fiber seeds the Lilliefors ensemble.
    pub k_level: f64,
    /// Ensemble size of the Lilliefors curve.
    pub k_q: usize,
    pub n_fibers: usize,
    /// Time step of the reduced simulation.
    pub dt: f64,
    /// Reduced steps; when absent the run matches the full series in model time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub record_every: usize,
    pub v0: f64,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        Self {
            q: 1000,
            k: Some(100_000),
            k_grid: None,
            k_level: 0.0,
            k_q: 2000,
            n_fibers: 100,
            dt: 0.02,
            steps: None,
            record_every: 10,
            v0: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub lower_pct: f64,
    pub upper_pct: f64,
    /// Samples M of the full-dynamics series.
    pub series_length: usize,
    /// Sample interval τ_s in model time.
    pub interval: f64,
    /// Initial state of the full-dynamics run.
    pub start: [f64; 2],
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            lower_pct: 40.0,
            upper_pct: 60.0,
            series_length: 200_000,
            interval: 0.2,
            start: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub ulam: UlamConfig,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub fiber: FiberConfig,
    #[serde(default)]
    pub reduce: ReduceConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Shipped presets as `(name, TOML text)`.
pub const PRESETS: &[(&str, &str)] = &[
    ("ou-desk", include_str!("../../../configs/ou-desk.toml")),
    ("skew-desk", include_str!("../../../configs/skew-desk.toml")),
    ("skew-full", include_str!("../../../configs/skew-full.toml")),
    ("distorted-desk", include_str!("../../../configs/distorted-desk.toml")),
    ("distorted-full", include_str!("../../../configs/distorted-full.toml")),
    ("slow-slow-desk", include_str!("../../../configs/slow-slow-desk.toml")),
    ("identity", include_str!("../../../configs/identity.toml")),
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
        Self::parse(text)
    }

    /// Canonical TOML rendering; two configs with equal content render equally.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn system(&self) -> Result<SystemModel, ConfigError> {
        let m = &self.model;
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| invalid(format!("model.{name} is required for {:?}", m.kind)));
        let model = match m.kind {
            ModelKind::OuPair => SystemModel::ou_pair(need(m.epsilon, "epsilon")?, m.dt),
            ModelKind::Ou1d => SystemModel::ou_1d(m.dt),
            ModelKind::Skew => {
                let s2 = need(m.sigma2, "sigma2")?;
                if s2 < 0.0 {
                    return Err(invalid("model.sigma2 must be non-negative"));
                }
                SystemModel::skew(need(m.epsilon, "epsilon")?, need(m.a, "a")?, s2.sqrt(), m.dt)
            }
            ModelKind::Identity => SystemModel::identity(m.dim.unwrap_or(2), m.dt),
        }
        .map_err(|e| invalid(e.to_string()))?;
        Ok(match &m.distortion {
            Some(d) => model.with_transform(Distortion::new(d.angle, d.bend)),
            None => model,
        })
    }

    pub fn grid_partition(&self) -> Result<GridPartition, ConfigError> {
        let g = &self.grid;
        GridPartition::new(g.lo, g.hi, g.nx, g.ny).map_err(|e| invalid(e.to_string()))
    }

    pub fn ulam_steps(&self) -> Result<usize, ConfigError> {
        steps_for(self.ulam.tau, self.model.dt).map_err(|e| invalid(format!("ulam.tau: {e}")))
    }

    pub fn fiber_steps(&self) -> Result<usize, ConfigError> {
        steps_for(self.fiber.tau, self.model.dt).map_err(|e| invalid(format!("fiber.tau: {e}")))
    }

    /// Elementary steps between consecutive samples of the full series.
    pub fn series_stride(&self) -> Result<usize, ConfigError> {
        steps_for(self.stats.interval, self.model.dt).map_err(|e| invalid(format!("stats.interval: {e}")))
    }

    /// Reduced steps covering the same model time as the full series.
    pub fn reduced_steps(&self) -> usize {
        self.reduce.steps.unwrap_or_else(|| {
            let horizon = self.stats.series_length as f64 * self.stats.interval;
            (horizon / self.reduce.dt).round() as usize
        })
    }

    pub fn detect_config(&self) -> Result<DetectConfig, ConfigError> {
        Ok(DetectConfig {
            samples: self.ulam.samples,
            steps: self.ulam_steps()?,
            fiber_steps: self.fiber_steps()?,
            fiber_samples: self.fiber.samples,
            nbins: self.fiber.nbins,
            level: self.fiber.level,
            component: self.fiber.component.map_or(ComponentChoice::Longest, ComponentChoice::Index),
            count: self.spectral.count,
            threshold: self.fiber.threshold,
            seed: self.ulam.seed,
        })
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let allowed: &[&str] = match m.kind {
            ModelKind::OuPair => &["epsilon"],
            ModelKind::Ou1d => &[],
            ModelKind::Skew => &["epsilon", "a", "sigma2"],
            ModelKind::Identity => &["dim"],
        };
        for (name, set) in [
            ("epsilon", m.epsilon.is_some()),
            ("a", m.a.is_some()),
            ("sigma2", m.sigma2.is_some()),
            ("dim", m.dim.is_some()),
        ] {
            if set && !allowed.contains(&name) {
                return Err(invalid(format!("model.{name} does not apply to {:?}", m.kind)));
            }
        }
        self.system()?;
        self.grid_partition()?;
        if self.ulam.samples == 0 {
            return Err(invalid("ulam.samples must be positive"));
        }
        self.ulam_steps()?;
        if let Some(taus) = &self.ulam.sweep {
            if taus.is_empty() || taus.windows(2).any(|w| w[1] <= w[0]) {
                return Err(invalid("ulam.sweep must be strictly increasing"));
            }
            for &t in taus {
                steps_for(t, m.dt).map_err(|e| invalid(format!("ulam.sweep: {e}")))?;
            }
        }
        if self.spectral.count < 2 || !(self.spectral.tol > 0.0) {
            return Err(invalid("spectral.count must be >= 2 and spectral.tol positive"));
        }
        let f = &self.fiber;
        let levels = f.levels.clone().unwrap_or_default();
        for v in std::iter::once(f.level).chain(levels) {
            if !(v > -1.0 && v < 1.0) {
                return Err(invalid(format!("fiber level {v} is outside (-1, 1), the range of a unit-max eigenfunction")));
            }
        }
        if f.nbins < 2 || f.samples == 0 || f.validate_q < 100 {
            return Err(invalid("fiber needs nbins >= 2, samples >= 1, validate_q >= 100"));
        }
        self.fiber_steps()?;
        let r = &self.reduce;
        if r.k.is_none() && r.k_grid.is_none() {
            return Err(invalid("reduce needs k or k_grid"));
        }
        if let Some(g) = &r.k_grid {
            if g.is_empty() || g.windows(2).any(|w| w[1] <= w[0]) {
                return Err(invalid("reduce.k_grid must be strictly increasing"));
            }
        }
        if r.k == Some(0) || r.q < 2 || r.k_q < 2 || r.n_fibers < 2 || r.record_every == 0 || !(r.dt > 0.0) {
            return Err(invalid("reduce needs k >= 1, q >= 2, k_q >= 2, n_fibers >= 2, record_every >= 1, dt > 0"));
        }
        if r.k_level.abs() >= crate::reduce::THETA_RANGE {
            return Err(invalid("reduce.k_level must lie strictly inside the θ range"));
        }
        let s = &self.stats;
        if !(0.0 < s.lower_pct && s.lower_pct < s.upper_pct && s.upper_pct < 100.0) {
            return Err(invalid("stats percentiles must satisfy 0 < lower < upper < 100"));
        }
        if s.series_length < 10 {
            return Err(invalid("stats.series_length must be at least 10"));
        }
        self.series_stride()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for (name, _) in PRESETS {
            ExperimentConfig::preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (_, text) = PRESETS[0];
        let bad = text.replace("[grid]", "[grid]\nfoo = 1");
        assert!(matches!(ExperimentConfig::parse(&bad), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn flow_time_must_be_a_step_multiple() {
        let mut c = ExperimentConfig::preset("skew-desk").unwrap();
        c.ulam.tau = 0.040_001_3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn irrelevant_parameter_is_rejected() {
        let mut c = ExperimentConfig::preset("identity").unwrap();
        c.model.sigma2 = Some(1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::preset("skew-desk").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.ulam.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(ExperimentConfig::parse(&a.canonical()).unwrap(), a);
    }

    #[test]
    fn desk_preset_steps() {
        let c = ExperimentConfig::preset("skew-desk").unwrap();
        assert_eq!(c.ulam_steps().unwrap(), 20_000);
        assert_eq!(c.fiber_steps().unwrap(), 20);
        assert_eq!(c.series_stride().unwrap(), 100_000);
    }
}
