//! Experiment configuration: one TOML file drives every subcommand, with
//! subcommand-specific keys under their own tables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl_engine::{Algorithm, TrainingConfig};
use crate::models::ModelSpec;
use crate::oracles::sub_federation;
use crate::synthdata::{ClientDataset, FederationSpec, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_steps: usize,
    pub client_lr: f64,
    #[serde(default = "one_f64")]
    pub server_lr: f64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Also write each generated federation as a JSONL record file.
    #[serde(default)]
    pub export_federation: bool,
    pub federation: FederationSpec,
    /// Train on this ascending subset of the generated clients only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<Vec<usize>>,
    /// Defaults to the federation's natural model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub freerider: FreeRiderSection,
    #[serde(default)]
    pub theory: TheorySection,
    #[serde(default)]
    pub valuation: ValuationSection,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeRiderSection {
    #[serde(default = "default_repeat")]
    pub repeat: usize,
    /// Rounds per free-rider run; defaults to the top-level `rounds`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
}

impl Default for FreeRiderSection {
    fn default() -> Self {
        Self { repeat: default_repeat(), rounds: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    /// Client dropped by the shift check; defaults to the federation's outlier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed_client: Option<usize>,
    #[serde(default = "comparison_algorithms")]
    pub algorithms: Vec<Algorithm>,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self { removed_client: None, algorithms: comparison_algorithms() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValuationSection {
    /// Estimators graded against the oracle; fedavg stands for sample proportions.
    #[serde(default = "comparison_algorithms")]
    pub estimators: Vec<Algorithm>,
}

impl Default for ValuationSection {
    fn default() -> Self {
        Self { estimators: comparison_algorithms() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default = "report_algorithms")]
    pub algorithms: Vec<Algorithm>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { algorithms: report_algorithms() }
    }
}

fn default_algorithm() -> Algorithm {
    Algorithm::FedceMulti
}

fn one() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

fn default_repeat() -> usize {
    50
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn comparison_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::Fedavg, Algorithm::FedceMulti, Algorithm::FedceSum]
}

fn report_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::Fedavg, Algorithm::FedceMulti, Algorithm::FedceSum, Algorithm::Standalone]
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::config(if path == "." { "<root>".to_string() } else { path }, inner.message().trim())
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Canonical TOML form; parsing it back yields an equal config.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.local_steps < 1 {
            return Err(Error::config("local_steps", "must be at least 1"));
        }
        if !(self.client_lr > 0.0) || !self.client_lr.is_finite() {
            return Err(Error::config("client_lr", format!("must be a positive finite number, got {}", self.client_lr)));
        }
        if !(self.server_lr > 0.0) || !self.server_lr.is_finite() {
            return Err(Error::config("server_lr", format!("must be a positive finite number, got {}", self.server_lr)));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        self.federation.validate().map_err(|e| Error::config("federation", e.to_string()))?;
        let model = self.model();
        model.validate().map_err(|e| Error::config("model", e.to_string()))?;
        let task_matches = match self.federation.task {
            Task::Segmentation => model.is_segmentation(),
            Task::Classification => !model.is_segmentation(),
        };
        if !task_matches {
            return Err(Error::config("model.family", "model does not match the federation task"));
        }
        if model.input_dim() != self.federation.default_model().input_dim() {
            return Err(Error::config("model", "model input size does not match the federation's features"));
        }
        if let Some(subset) = &self.clients {
            if subset.is_empty() {
                return Err(Error::config("clients", "subset must name at least one client"));
            }
            if subset.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("clients", "subset must be strictly ascending"));
            }
            if subset[subset.len() - 1] >= self.federation.n_clients {
                return Err(Error::config("clients", "subset names a client outside the federation"));
            }
        }
        if self.freerider.repeat < 1 {
            return Err(Error::config("freerider.repeat", "must be at least 1"));
        }
        if self.freerider.rounds == Some(0) {
            return Err(Error::config("freerider.rounds", "must be at least 1"));
        }
        if let Some(r) = self.theory.removed_client {
            if r >= self.federation.n_clients {
                return Err(Error::config("theory.removed_client", format!("client {r} out of range")));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> ModelSpec {
        self.model.unwrap_or_else(|| self.federation.default_model())
    }

    /// Federation spec for one seed.
    pub fn federation_for(&self, seed: u64) -> FederationSpec {
        FederationSpec { seed, ..self.federation.clone() }
    }

    /// Applies the `clients` subset, renormalizing sample proportions.
    pub fn select_clients(&self, clients: Vec<ClientDataset>) -> Vec<ClientDataset> {
        match &self.clients {
            Some(subset) => sub_federation(&clients, subset),
            None => clients,
        }
    }

    pub fn training(&self, algorithm: Algorithm, seed: u64) -> TrainingConfig {
        TrainingConfig {
            model: self.model(),
            algorithm,
            rounds: self.rounds,
            local_steps: self.local_steps,
            client_lr: self.client_lr,
            server_lr: self.server_lr,
            init_seed: seed,
        }
    }

    /// Client removed by the shift check.
    pub fn removed_client(&self) -> Result<usize> {
        self.theory
            .removed_client
            .or(self.federation.outlier.map(|o| o.client))
            .ok_or_else(|| Error::config("theory.removed_client", "no client to remove: set it or configure an outlier"))
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
    ExperimentConfig::from_toml_str(&text)
}
