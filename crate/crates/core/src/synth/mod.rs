//! Synthetic training jobs with injected faults, and the harness that
//! scores diagnoses against their ground truth.

pub mod corpus;
pub mod eval;
mod generate;
pub mod vocab;

use std::path::Path;
use std::str::FromStr;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::temporal::Stage;
pub use generate::{generate, generate_success, SyntheticJob};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("invalid fault injection: {0}")]
    InvalidInjection(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

impl SynthError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
        move |source| SynthError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultType {
    Network,
    Accelerator,
    NodeCrash,
    Storage,
    Config,
    Hang,
}

impl FaultType {
    pub const ALL: [FaultType; 6] = [
        FaultType::Network,
        FaultType::Accelerator,
        FaultType::NodeCrash,
        FaultType::Storage,
        FaultType::Config,
        FaultType::Hang,
    ];

    /// Faults with one physically broken node to localize.
    pub fn is_hardware(self) -> bool {
        matches!(self, FaultType::Network | FaultType::Accelerator | FaultType::NodeCrash | FaultType::Storage)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FaultType::Network => "NETWORK",
            FaultType::Accelerator => "ACCELERATOR",
            FaultType::NodeCrash => "NODE_CRASH",
            FaultType::Storage => "STORAGE",
            FaultType::Config => "CONFIG",
            FaultType::Hang => "HANG",
        }
    }
}

impl fmt::Display for FaultType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FaultType {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FaultType::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| SynthError::InvalidInjection(format!("unknown fault type {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePlan {
    /// Shard-load lines per node during data loading.
    pub data_shards: usize,
    /// A checkpoint follows every this many iterations (and the last one).
    pub checkpoint_interval: usize,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan { data_shards: 2, checkpoint_interval: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    /// Per node and per kind, chance of a benign event from the common
    /// vocabulary outside the training loop.
    pub common_noise_prob: f64,
    /// Expected number of never-before-seen benign events per job.
    pub novel_events_per_job: f64,
    /// Per node and checkpoint, chance of a benign write-retry error.
    pub checkpoint_retry_prob: f64,
    /// Emit the ERROR-level events every healthy node logs.
    pub benign_errors: bool,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile { common_noise_prob: 0.15, novel_events_per_job: 0.5, checkpoint_retry_prob: 0.3, benign_errors: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub node_count: usize,
    pub iterations: usize,
    /// Lines per iteration, marker included (4 to 7).
    pub events_per_iteration: usize,
    pub stages: StagePlan,
    pub noise: NoiseProfile,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            node_count: 16,
            iterations: 60,
            events_per_iteration: vocab::ITERATION_BODY,
            stages: StagePlan::default(),
            noise: NoiseProfile::default(),
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.node_count < 4 {
            return bad(format!("need at least 4 nodes, got {}", self.node_count));
        }
        if self.node_count > 10_000 {
            return bad(format!("too many nodes: {}", self.node_count));
        }
        if self.iterations < 25 {
            return bad(format!("need at least 25 iterations, got {}", self.iterations));
        }
        if !(4..=vocab::ITERATION_BODY).contains(&self.events_per_iteration) {
            return bad(format!("events per iteration must be 4..={}", vocab::ITERATION_BODY));
        }
        if self.stages.checkpoint_interval == 0 {
            return bad("checkpoint interval must be positive".into());
        }
        let n = &self.noise;
        for (name, p) in [("common_noise_prob", n.common_noise_prob), ("checkpoint_retry_prob", n.checkpoint_retry_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be a probability"));
            }
        }
        if !(n.novel_events_per_job >= 0.0 && n.novel_events_per_job.is_finite()) {
            return bad("novel_events_per_job must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultInjection {
    pub fault_type: FaultType,
    /// Node indices; empty lets the seed choose. Ignored for CONFIG.
    #[serde(default)]
    pub target_nodes: Vec<usize>,
    pub onset_iteration: usize,
    /// NETWORK: nodes that also log communication errors (default 7).
    /// HANG: peers that log the wait timeout (default 3).
    #[serde(default)]
    pub neighbors: Option<usize>,
    /// STORAGE: ITER_TRAIN (data read) or MODEL_INIT (checkpoint load).
    /// CONFIG: ENV_INIT (rank table) or MODEL_INIT (driver mode).
    #[serde(default)]
    pub stage: Option<Stage>,
    /// NETWORK: iterations the job survives after the link goes down.
    #[serde(default)]
    pub continue_iterations: Option<usize>,
}

impl FaultInjection {
    pub fn new(fault_type: FaultType, onset_iteration: usize) -> Self {
        FaultInjection {
            fault_type,
            target_nodes: Vec::new(),
            onset_iteration,
            neighbors: None,
            stage: None,
            continue_iterations: None,
        }
    }

    pub fn validate(&self, spec: &WorkloadSpec) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidInjection(m));
        if let Some(&t) = self.target_nodes.iter().find(|&&t| t >= spec.node_count) {
            return bad(format!("target node {t} outside 0..{}", spec.node_count));
        }
        if self.onset_iteration >= spec.iterations {
            return bad(format!("onset {} not before iteration count {}", self.onset_iteration, spec.iterations));
        }
        if self.neighbors.is_some_and(|k| k >= spec.node_count) {
            return bad("more neighbors than other nodes".into());
        }
        let stage_ok = match (self.fault_type, self.stage) {
            (_, None) => true,
            (FaultType::Storage, Some(s)) => matches!(s, Stage::IterTrain | Stage::ModelInit),
            (FaultType::Config, Some(s)) => matches!(s, Stage::EnvInit | Stage::ModelInit),
            (_, Some(s)) => s == Stage::IterTrain,
        };
        if !stage_ok {
            return bad(format!("{} cannot fire in {}", self.fault_type, self.stage.unwrap_or(Stage::IterTrain)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub job_id: String,
    pub fault_type: Option<FaultType>,
    pub faulty_nodes: Vec<String>,
    /// Signatures (masked, space-joined tokens) of every injected line.
    pub failure_indicating_signatures: Vec<String>,
    pub faulty_iteration: Option<usize>,
    pub failing_stage: Option<Stage>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let text = serde_json::to_string_pretty(self).expect("truth serializes");
        std::fs::write(path, text).map_err(SynthError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path).map_err(SynthError::io(path))?;
        serde_json::from_str(&text)
            .map_err(|e| SynthError::Format { path: path.display().to_string(), reason: e.to_string() })
    }
}

/// Reads a TOML document into `T`.
pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, SynthError> {
    let text = std::fs::read_to_string(path).map_err(SynthError::io(path))?;
    toml::from_str(&text).map_err(|e| SynthError::Format { path: path.display().to_string(), reason: e.to_string() })
}
