//! JSON experiment description. Unknown keys are rejected, and
//! [`ExperimentConfig::validate`] checks every block before anything runs.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::models::{node_training_sets, Diversity, SyntheticTask, TrainingConfig};
use crate::network::CapacityDistribution;
use crate::numerics::RngStream;
use crate::protocol::{Algorithm, DEFAULT_RHO};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    LatencyCdf,
    Train,
    Infer,
    SweepK,
    SweepBits,
    SweepP,
}

impl Task {
    pub fn is_sweep(self) -> bool {
        matches!(self, Task::SweepK | Task::SweepBits | Task::SweepP)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::LatencyCdf => "latency-cdf",
            Task::Train => "train",
            Task::Infer => "infer",
            Task::SweepK => "sweep-k",
            Task::SweepBits => "sweep-bits",
            Task::SweepP => "sweep-p",
        })
    }
}

/// Link model used whenever trained models are evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkBlock {
    /// Link probability for `infer`.
    pub p: f64,
    pub capacity: CapacityDistribution,
    pub tau_ms: f64,
    /// Charge the reply (N class probabilities at 16 bits each) to the link
    /// delay; off by default, leaving the feature payload only.
    pub include_response: bool,
}

impl NetworkBlock {
    /// Reply payload in bits for `classes` classes.
    pub fn response_bits(&self, classes: usize) -> u64 {
        if self.include_response {
            16 * classes as u64
        } else {
            0
        }
    }
}

impl Default for NetworkBlock {
    fn default() -> Self {
        NetworkBlock {
            p: 1.0,
            capacity: CapacityDistribution::default(),
            tau_ms: 700.0,
            include_response: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauSpec {
    Uniform(f64),
    PerUser(Vec<f64>),
}

impl TauSpec {
    pub fn for_users(&self, users: usize) -> Vec<f64> {
        match self {
            TauSpec::Uniform(t) => vec![*t; users],
            TauSpec::PerUser(v) => v.clone(),
        }
    }
}

/// Grid of delay-CDF cells: one output file per `(p, b1_bits, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyBlock {
    pub tau_ms: TauSpec,
    pub p: Vec<f64>,
    pub b1_bits: Vec<u64>,
    pub k: Vec<usize>,
    pub b2_bits: u64,
    pub capacity: CapacityDistribution,
    pub trials: usize,
    pub grid_points: usize,
    pub inferring_user: usize,
}

impl Default for LatencyBlock {
    fn default() -> Self {
        LatencyBlock {
            tau_ms: TauSpec::Uniform(700.0),
            p: vec![0.2, 0.8],
            b1_bits: vec![32, 128],
            k: vec![4, 64],
            b2_bits: 0,
            capacity: CapacityDistribution::default(),
            trials: 1_000_000,
            grid_points: 256,
            inferring_user: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    /// K values, log₂P values, or link probabilities, depending on the task.
    pub values: Vec<f64>,
    /// Independent replicates (data, training and evaluation seeds).
    pub seeds: usize,
    pub algorithm: Algorithm,
    /// Ensemble size for sweep-p and sweep-bits; defaults to `training.nodes`.
    pub k: Option<usize>,
    /// Link probability for sweep-k and sweep-bits.
    pub p: f64,
    pub snapshots_per_sample: usize,
    pub rho: f64,
    /// Pre-trained ensembles, one per replicate, instead of training.
    pub model_dirs: Option<Vec<PathBuf>>,
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock {
            values: Vec::new(),
            seeds: 5,
            algorithm: Algorithm::Shared,
            k: None,
            p: 1.0,
            snapshots_per_sample: 1,
            rho: DEFAULT_RHO,
            model_dirs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferBlock {
    pub model_dir: PathBuf,
    #[serde(default)]
    pub sample_index: usize,
    #[serde(default)]
    pub inferring_user: usize,
    #[serde(default = "default_infer_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_infer_algorithm() -> Algorithm {
    Algorithm::LocalRaw
}

fn default_rho() -> f64 {
    DEFAULT_RHO
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    /// Output directory.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub data: SyntheticTask,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub network: NetworkBlock,
    #[serde(default)]
    pub latency: Option<LatencyBlock>,
    #[serde(default)]
    pub sweep: Option<SweepBlock>,
    #[serde(default)]
    pub infer: Option<InferBlock>,
}

/// Seeds of one replicate; replicate `r` of base seed `s` equals replicate
/// 0 of base seed `s + r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicateSeeds {
    pub data: u64,
    pub train: u64,
    /// Base for evaluation streams; sweep point `i` uses `eval + i`.
    pub eval: u64,
}

pub fn replicate_seeds(base: u64, replicate: usize) -> ReplicateSeeds {
    let mut s = RngStream::new(base.wrapping_add(replicate as u64));
    ReplicateSeeds {
        data: s.next_u64(),
        train: s.next_u64(),
        eval: s.next_u64(),
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn wrap(block: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| invalid(format!("{block}: {e}")))
}

fn check_probability(what: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("{what} = {p} is not a probability")));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<()> {
    if !rho.is_finite() {
        return Err(invalid(format!("rho = {rho} must be finite")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn latency(&self) -> Result<&LatencyBlock> {
        self.latency.as_ref().ok_or_else(|| invalid(format!("task {} needs a \"latency\" block", self.task)))
    }

    pub fn sweep(&self) -> Result<&SweepBlock> {
        self.sweep.as_ref().ok_or_else(|| invalid(format!("task {} needs a \"sweep\" block", self.task)))
    }

    pub fn infer(&self) -> Result<&InferBlock> {
        self.infer.as_ref().ok_or_else(|| invalid(format!("task {} needs an \"infer\" block", self.task)))
    }

    /// Ensemble size evaluated by sweep-p and sweep-bits.
    pub fn sweep_nodes(&self) -> Result<usize> {
        Ok(self.sweep()?.k.unwrap_or(self.training.nodes))
    }

    /// Checks every block the task uses. Reads and writes no files.
    pub fn validate(&self) -> Result<()> {
        if self.output.as_os_str().is_empty() {
            return Err(invalid("output path is empty"));
        }
        match self.task {
            Task::LatencyCdf => self.validate_latency(),
            Task::Train => self.validate_models(self.training.nodes),
            Task::Infer => self.validate_infer(),
            _ => self.validate_sweep(),
        }
    }

    fn validate_models(&self, nodes: usize) -> Result<()> {
        wrap("data", self.data.validate())?;
        let training = TrainingConfig {
            nodes,
            ..self.training.clone()
        };
        wrap("training", training.validate())?;
        if let Diversity::Bagging { .. } = training.diversity {
            wrap(
                "training",
                node_training_sets(self.data.train, nodes, training.diversity, &mut RngStream::new(0)).map(|_| ()),
            )?;
        }
        self.validate_network()
    }

    fn validate_network(&self) -> Result<()> {
        check_probability("network.p", self.network.p)?;
        wrap("network.capacity", self.network.capacity.validate())?;
        if !(self.network.tau_ms.is_finite() && self.network.tau_ms > 0.0) {
            return Err(invalid("network.tau_ms must be > 0"));
        }
        Ok(())
    }

    fn validate_latency(&self) -> Result<()> {
        let lat = self.latency()?;
        if lat.p.is_empty() || lat.b1_bits.is_empty() || lat.k.is_empty() {
            return Err(invalid("latency: p, b1_bits and k must be non-empty"));
        }
        for &p in &lat.p {
            check_probability("latency.p", p)?;
        }
        if lat.b1_bits.contains(&0) {
            return Err(invalid("latency.b1_bits must be >= 1"));
        }
        if lat.trials == 0 || lat.grid_points == 0 {
            return Err(invalid("latency: trials and grid_points must be >= 1"));
        }
        wrap("latency.capacity", lat.capacity.validate())?;
        for &k in &lat.k {
            if k == 0 {
                return Err(invalid("latency.k must be >= 1"));
            }
            if lat.inferring_user >= k {
                return Err(invalid(format!("latency.inferring_user {} is not below K = {k}", lat.inferring_user)));
            }
            let tau = lat.tau_ms.for_users(k);
            if tau.len() != k {
                return Err(invalid(format!("latency.tau_ms lists {} delays but K = {k}", tau.len())));
            }
            if tau.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                return Err(invalid("latency.tau_ms must be > 0"));
            }
        }
        Ok(())
    }

    fn validate_infer(&self) -> Result<()> {
        let inf = self.infer()?;
        self.validate_network()?;
        wrap("data", self.data.validate())?;
        check_rho(inf.rho)?;
        if inf.sample_index >= self.data.test {
            return Err(invalid(format!(
                "infer.sample_index {} is not below the test split size {}",
                inf.sample_index, self.data.test
            )));
        }
        Ok(())
    }

    fn validate_sweep(&self) -> Result<()> {
        let sw = self.sweep()?;
        if sw.values.is_empty() {
            return Err(invalid("sweep.values is empty"));
        }
        if sw.seeds < 3 {
            return Err(invalid(format!("sweep.seeds = {} but at least 3 are needed", sw.seeds)));
        }
        if sw.snapshots_per_sample == 0 {
            return Err(invalid("sweep.snapshots_per_sample must be >= 1"));
        }
        check_rho(sw.rho)?;
        check_probability("sweep.p", sw.p)?;
        if let Some(dirs) = &sw.model_dirs {
            if self.task == Task::SweepBits {
                return Err(invalid("sweep-bits retrains the quantizer; model_dirs is not allowed"));
            }
            if dirs.len() != sw.seeds {
                return Err(invalid(format!("sweep.model_dirs has {} entries for {} seeds", dirs.len(), sw.seeds)));
            }
        }
        let integral = |v: f64| v.fract() == 0.0 && v >= 1.0;
        let nodes = match self.task {
            Task::SweepK => {
                if let Some(bad) = sw.values.iter().find(|v| !integral(**v)) {
                    return Err(invalid(format!("sweep-k value {bad} is not a positive integer")));
                }
                if sw.k.is_some() {
                    return Err(invalid("sweep-k takes K from sweep.values; remove sweep.k"));
                }
                sw.values.iter().fold(0.0f64, |a, &b| a.max(b)) as usize
            }
            Task::SweepBits => {
                if let Some(bad) = sw.values.iter().find(|v| !integral(**v) || **v > 16.0) {
                    return Err(invalid(format!("sweep-bits value {bad} is not an integer in 1..=16")));
                }
                self.sweep_nodes()?
            }
            _ => {
                for &p in &sw.values {
                    check_probability("sweep-p value", p)?;
                }
                self.sweep_nodes()?
            }
        };
        self.validate_models(nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_configs_parse() {
        let c = ExperimentConfig::from_json(r#"{"task": "latency-cdf", "latency": {}}"#).unwrap();
        c.validate().unwrap();
        assert_eq!(c.latency().unwrap().k, vec![4, 64]);
        let c = ExperimentConfig::from_json(r#"{"task": "sweep-k", "sweep": {"values": [1, 2]}}"#).unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_json(r#"{"task": "train", "sede": 3}"#).unwrap_err();
        assert!(e.to_string().contains("sede"), "{e}");
        assert!(ExperimentConfig::from_json(r#"{"task": "train", "training": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn missing_block_and_bad_values() {
        let c = ExperimentConfig::from_json(r#"{"task": "sweep-p"}"#).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ExperimentConfig::from_json(r#"{"task": "sweep-p", "sweep": {"values": [1.5]}}"#).unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::from_json(r#"{"task": "sweep-k", "sweep": {"values": [2], "seeds": 2}}"#).unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::from_json(r#"{"task": "latency-cdf", "latency": {"k": [4], "tau_ms": [1, 2]}}"#)
            .unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn replicate_shift() {
        assert_eq!(replicate_seeds(10, 3), replicate_seeds(13, 0));
        assert_ne!(replicate_seeds(10, 0).data, replicate_seeds(10, 0).train);
    }
}
