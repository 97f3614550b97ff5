//! The single config file behind every subcommand.
//!
//! Flat TOML with one section per pipeline stage; unknown keys are rejected
//! and every section is optional, falling back to the desk-scale defaults
//! below. The resolved config hashes into each run manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use eadro_core::error::{Error, Result};
use eadro_core::logparse::LogParseConfig;
use eadro_core::pipeline::{FeaturizeArgs, SimulateArgs};
use eadro_core::simulator::{
    generate_topology, round_robin_schedule, FaultMagnitudes, SimConfig, TopologyConfig,
};
use eadro_core::telemetry::WindowConfig;
use eadro_core::train::TrainConfig;

/// Request generation and fault scheduling knobs, in window units so the
/// schedule stays aligned with featurization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub request_rate: f64,
    pub latency_sigma: f64,
    pub warmup_windows: usize,
    pub fault_windows: usize,
    pub gap_windows: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            request_rate: 2.0,
            latency_sigma: 0.25,
            warmup_windows: 300,
            fault_windows: 30,
            gap_windows: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HawkesSection {
    pub beta: f64,
}

impl Default for HawkesSection {
    fn default() -> Self {
        HawkesSection { beta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub batch: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { batch: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub topology: TopologyConfig,
    pub window: WindowConfig,
    pub simulate: SimulateSection,
    pub faults: FaultMagnitudes,
    pub logparse: LogParseConfig,
    pub hawkes: HawkesSection,
    pub train: TrainConfig,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            topology: TopologyConfig::default(),
            window: WindowConfig::default(),
            simulate: SimulateSection::default(),
            faults: FaultMagnitudes::default(),
            logparse: LogParseConfig::default(),
            hawkes: HawkesSection::default(),
            train: TrainConfig::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Hash of the resolved config (after flag overrides); serialization
    /// order is fixed so the digest is stable.
    pub fn hash(&self) -> Result<String> {
        let canon = serde_json::to_string(self)?;
        let digest = Sha256::digest(canon.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        Ok(hex)
    }

    pub fn simulate_args(&self, config_hash: Option<String>) -> Result<SimulateArgs> {
        let topology = generate_topology(self.seed, &self.topology)?;
        let m = topology.services.len();
        let schedule = round_robin_schedule(
            m,
            &self.window,
            self.simulate.warmup_windows,
            self.simulate.fault_windows,
            self.simulate.gap_windows,
            self.faults,
        );
        let windows = self.simulate.warmup_windows
            + 3 * m * (self.simulate.fault_windows + self.simulate.gap_windows);
        let sim = SimConfig {
            duration_s: windows as u64 * self.window.window_secs(),
            request_rate: self.simulate.request_rate,
            latency_sigma: self.simulate.latency_sigma,
        };
        Ok(SimulateArgs {
            topology,
            schedule,
            sim,
            seed: self.seed,
            config_hash,
        })
    }

    pub fn featurize_args(&self, config_hash: Option<String>) -> FeaturizeArgs {
        FeaturizeArgs {
            window: self.window,
            logparse: self.logparse.clone(),
            hawkes_beta: self.hawkes.beta,
            split_ratio: self.train.split_ratio,
            config_hash,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = self.train;
        cfg.seed = self.seed;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_toml() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.window.slots, 30);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("unknown_key = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlr = 0.1\nbogus = 2").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 8;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
