//! The run configuration document: one JSON file holding the network, cost
//! weights, sampling period, probing-noise design, disturbance schedule,
//! model variation, nonlinearity, horizon and seed, so a single file fully
//! determines a run.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::learner::{required_samples, ProbingNoiseConfig, ThetaMethod};
use crate::network::NetworkTopology;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostConfig {
    /// Production/load cost coefficients (diagonal of F), one per exchanger.
    pub f: Vec<f64>,
    /// Temperature-deviation cost coefficients (diagonal of G).
    pub g: Vec<f64>,
    /// Diagonal of the error weight Q_e.
    pub q_e: Vec<f64>,
    /// Diagonal of the increment weight R_e.
    pub r_e: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Sinusoids per input channel; defaults to the dimension-derived value.
    #[serde(default)]
    pub sinusoids_per_channel: Option<usize>,
    /// Frequency band in rad/step; defaults to the dimension-derived band.
    #[serde(default)]
    pub freq_range: Option<(f64, f64)>,
    pub base_amplitude: f64,
    pub decay: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sinusoids_per_channel: None,
            freq_range: None,
            base_amplitude: 0.01,
            decay: 0.999,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceMode {
    Constant,
    Impulse,
    Piecewise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub start: usize,
    /// Exclusive end step; absent means "until the end of the run".
    #[serde(default)]
    pub end: Option<usize>,
    /// Disturbance vector, one entry per exchanger.
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisturbanceConfig {
    pub mode: DisturbanceMode,
    pub segments: Vec<SegmentConfig>,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        DisturbanceConfig {
            mode: DisturbanceMode::Constant,
            segments: Vec::new(),
        }
    }
}

fn default_variation_sweep() -> Vec<f64> {
    vec![-0.5, -0.2, -0.1, 0.1, 0.2, 0.5]
}

fn default_comparison_variations() -> Vec<f64> {
    vec![-0.2, -0.1, 0.1, 0.2]
}

fn default_nonlinearity_sweep() -> Vec<f64> {
    vec![1e-7, 1e-4]
}

fn default_stop_tolerance() -> f64 {
    1e-9
}

fn default_iteration_cap() -> usize {
    50
}

fn default_method() -> ThetaMethod {
    ThetaMethod::Matrix
}

fn default_divergence_bound() -> f64 {
    1e6
}

/// Everything a run needs, as parsed from the config document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub topology: NetworkTopology,
    pub costs: CostConfig,
    /// Sampling period, seconds.
    pub tau: f64,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub disturbance: DisturbanceConfig,
    /// Multiplicative coefficient variation of the true flow matrix away from
    /// the nominal one used to seed the initial controller.
    #[serde(default)]
    pub variation: f64,
    #[serde(default = "default_variation_sweep")]
    pub variation_sweep: Vec<f64>,
    /// Variations used by the direct-vs-indirect comparison.
    #[serde(default = "default_comparison_variations")]
    pub comparison_variations: Vec<f64>,
    /// Element-wise-square perturbation weight of the augmented recursion.
    #[serde(default)]
    pub nonlinearity: f64,
    #[serde(default = "default_nonlinearity_sweep")]
    pub nonlinearity_sweep: Vec<f64>,
    pub horizon: usize,
    /// Experiment runs refuse to start without a seed (here or on the CLI).
    #[serde(default)]
    pub seed: Option<u64>,
    /// Initial temperature deviation; zeros when absent.
    #[serde(default)]
    pub initial_temperature: Option<Vec<f64>>,
    #[serde(default = "default_stop_tolerance")]
    pub stop_tolerance: f64,
    #[serde(default = "default_iteration_cap")]
    pub iteration_cap: usize,
    #[serde(default = "default_method")]
    pub method: ThetaMethod,
    #[serde(default = "default_divergence_bound")]
    pub divergence_bound: f64,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn n(&self) -> usize {
        self.topology.len()
    }

    /// SHA-256 of the canonical serialization; identifies the run inputs.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn f_diag(&self) -> DVector<f64> {
        DVector::from_vec(self.costs.f.clone())
    }

    pub fn g_diag(&self) -> DVector<f64> {
        DVector::from_vec(self.costs.g.clone())
    }

    pub fn q_e(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.costs.q_e.clone()))
    }

    pub fn r_e(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.costs.r_e.clone()))
    }

    /// Probing-noise design with defaults filled from the plant dimensions;
    /// the realized tones are seeded by the run seed.
    pub fn noise_config(&self, seed: u64) -> ProbingNoiseConfig {
        let nt = self.n();
        let mut cfg = ProbingNoiseConfig::for_dimensions(2 * nt, nt, seed);
        if let Some(s) = self.noise.sinusoids_per_channel {
            cfg.sinusoids_per_channel = s;
        }
        if let Some(range) = self.noise.freq_range {
            cfg.freq_range = range;
        }
        cfg.base_amplitude = self.noise.base_amplitude;
        cfg.decay = self.noise.decay;
        cfg
    }

    pub fn resolved_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Parse("experiment runs need a seed (config `seed` or --seed)".into()))
    }

    /// Structural validation of everything that does not need a solver.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::InvalidTopology(msg)) = self.topology.validate() {
            problems.push(format!("topology: {msg}"));
        }
        let n = self.n();
        for (name, v) in [
            ("costs.f", &self.costs.f),
            ("costs.g", &self.costs.g),
            ("costs.q_e", &self.costs.q_e),
            ("costs.r_e", &self.costs.r_e),
        ] {
            if v.len() != n {
                problems.push(format!("{name} must have {n} entries, has {}", v.len()));
            }
            if v.iter().any(|&x| !(x > 0.0)) {
                problems.push(format!("{name} entries must be positive"));
            }
        }
        if !(self.tau > 0.0) {
            problems.push(format!("tau must be positive, got {}", self.tau));
        }
        let min_horizon = required_samples(2 * n, n);
        if self.horizon <= min_horizon {
            problems.push(format!(
                "horizon {} must exceed the samples per iteration ({min_horizon})",
                self.horizon
            ));
        }
        if let Some(t0) = &self.initial_temperature {
            if t0.len() != n {
                problems.push(format!(
                    "initial_temperature must have {n} entries, has {}",
                    t0.len()
                ));
            }
        }
        let mut prev_end: Option<usize> = None;
        for (i, seg) in self.disturbance.segments.iter().enumerate() {
            if seg.value.len() != n {
                problems.push(format!("disturbance segment {i} needs {n} entries"));
            }
            if let Some(end) = seg.end {
                if end <= seg.start {
                    problems.push(format!("disturbance segment {i} is empty ({} >= {end})", seg.start));
                }
            }
            if let Some(pe) = prev_end {
                if seg.start < pe {
                    problems.push(format!("disturbance segment {i} overlaps its predecessor"));
                }
            } else if i > 0 {
                problems.push(format!(
                    "disturbance segment {} has no end but is not the last segment",
                    i - 1
                ));
            }
            prev_end = seg.end;
        }
        if !(self.nonlinearity >= 0.0) {
            problems.push("nonlinearity must be nonnegative".into());
        }
        if !(self.divergence_bound > 0.0) {
            problems.push("divergence_bound must be positive".into());
        }
        let noise_cfg = self.noise_config(0);
        if let Err(Error::Parse(msg)) = noise_cfg.validate(2 * n) {
            problems.push(format!("noise: {msg}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ValidationFailed(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::desk_config;

    #[test]
    fn round_trips_through_json() {
        let cfg = desk_config();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back.hash(), cfg.hash());
        back.validate().unwrap();
    }

    #[test]
    fn hash_depends_on_content() {
        let cfg = desk_config();
        let mut other = cfg.clone();
        other.tau = 0.21;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn validation_collects_problems() {
        let mut cfg = desk_config();
        cfg.costs.f = vec![1.0, -1.0, 1.0];
        cfg.horizon = 10;
        match cfg.validate() {
            Err(Error::ValidationFailed(items)) => {
                assert!(items.iter().any(|p| p.contains("costs.f")));
                assert!(items.iter().any(|p| p.contains("horizon")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_seed_is_an_error() {
        let mut cfg = desk_config();
        cfg.seed = None;
        assert!(matches!(cfg.resolved_seed(), Err(Error::Parse(_))));
    }

    #[test]
    fn parse_error_carries_location() {
        let err = RunConfig::from_json("{ \"topology\": ").unwrap_err();
        match err {
            Error::Parse(msg) => assert!(msg.contains("line"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
