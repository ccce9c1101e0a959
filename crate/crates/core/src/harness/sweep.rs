//! Accuracy sweeps over ensemble size, quantizer bits, or link probability.
//!
//! Each replicate `r` regenerates the synthetic data and retrains (or loads)
//! an ensemble from [`replicate_seeds`]. Every test sample is inferred once
//! per inferring user and per drawn snapshot; accuracy and delay are means
//! over those rounds, and a row reports the mean and sample standard
//! deviation over replicates.

use rayon::prelude::*;

use crate::latency::LatencyConfig;
use crate::models::{load_ensemble, train_ensemble, Dataset, NodeModel, Splits, TrainedEnsemble, TrainingConfig};
use crate::network::sample_snapshot;
use crate::numerics::RngStream;
use crate::protocol::{run_round, Algorithm, InferenceRequest};
use crate::{Error, Result};

use super::config::{replicate_seeds, ExperimentConfig, NetworkBlock, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    K,
    Bits,
    P,
}

impl SweepKind {
    pub fn from_task(task: Task) -> Option<Self> {
        match task {
            Task::SweepK => Some(SweepKind::K),
            Task::SweepBits => Some(SweepKind::Bits),
            Task::SweepP => Some(SweepKind::P),
            _ => None,
        }
    }

    /// Name of the independent-variable column.
    pub fn column(self) -> &'static str {
        match self {
            SweepKind::K => "k",
            SweepKind::Bits => "bits",
            SweepKind::P => "p",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            SweepKind::K => "sweep_k.csv",
            SweepKind::Bits => "sweep_bits.csv",
            SweepKind::P => "sweep_p.csv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub x: f64,
    pub accuracy: f64,
    /// Sample standard deviation over replicates.
    pub accuracy_std: f64,
    pub delay_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSettings<'a> {
    pub algorithm: Algorithm,
    pub p: f64,
    pub snapshots_per_sample: usize,
    pub rho: f64,
    pub network: &'a NetworkBlock,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub delay_ms: f64,
    pub rounds: usize,
}

/// Latency model for `users` nodes exchanging `b1` feature bits and
/// `classes`-way replies.
pub fn latency_config(network: &NetworkBlock, users: usize, b1: u64, classes: usize, p: f64) -> LatencyConfig {
    let b2 = network.response_bits(classes);
    LatencyConfig::homogeneous(users, network.tau_ms, b1, b2, p, network.capacity.clone())
}

/// Test accuracy of `nodes` (ids `0..K`) with every node taking a turn as
/// the inferring user on every snapshot.
pub fn evaluate(nodes: &[NodeModel], test: &Dataset, s: &EvalSettings, rng: &mut RngStream) -> Result<Evaluation> {
    let first = nodes.first().ok_or(Error::Empty("ensemble"))?;
    let k = nodes.len();
    let cfg = latency_config(s.network, k, first.shared.codebook.bit_budget(), first.n_classes(), s.p);
    let mut correct = 0usize;
    let mut delay = 0.0;
    let mut rounds = 0usize;
    for (x, label) in &test.samples {
        for _ in 0..s.snapshots_per_sample {
            let snapshot = sample_snapshot(k, s.p, &s.network.capacity, rng)?;
            let mut req = InferenceRequest {
                inferring: 0,
                x: x.clone(),
                snapshot,
                algorithm: s.algorithm,
            };
            for i_t in 0..k {
                req.inferring = i_t;
                let trace = run_round(&req, nodes, &cfg, s.rho)?;
                correct += usize::from(trace.prediction == *label);
                delay += trace.delay_ms;
                rounds += 1;
            }
        }
    }
    if rounds == 0 {
        return Err(Error::Empty("test set"));
    }
    Ok(Evaluation {
        accuracy: correct as f64 / rounds as f64,
        delay_ms: delay / rounds as f64,
        rounds,
    })
}

/// Copies of `nodes` renumbered `0..len`.
fn renumbered(nodes: &[NodeModel]) -> Vec<NodeModel> {
    nodes
        .iter()
        .enumerate()
        .map(|(j, n)| NodeModel {
            node_id: j,
            ..n.clone()
        })
        .collect()
}

/// Data splits and trained ensemble of replicate `r`, with `nodes` nodes
/// and, if given, a codebook of `codebook_size` entries.
pub fn train_replicate(
    cfg: &ExperimentConfig,
    r: usize,
    nodes: usize,
    codebook_size: Option<usize>,
) -> Result<(Splits, TrainedEnsemble)> {
    let seeds = replicate_seeds(cfg.seed, r);
    let splits = cfg.data.generate(seeds.data)?;
    let training = TrainingConfig {
        nodes,
        codebook_size: codebook_size.unwrap_or(cfg.training.codebook_size),
        ..cfg.training.clone()
    };
    let ensemble = train_ensemble(&splits.train, &splits.validation, &training, &RngStream::new(seeds.train))?;
    Ok((splits, ensemble))
}

/// Test split and first `nodes` nodes of replicate `r`, trained or loaded.
fn replicate_models(cfg: &ExperimentConfig, r: usize, nodes: usize) -> Result<(Dataset, Vec<NodeModel>)> {
    let sweep = cfg.sweep()?;
    match &sweep.model_dirs {
        Some(dirs) => {
            let (_, mut loaded) = load_ensemble(&dirs[r])?;
            if loaded.len() < nodes {
                return Err(Error::InvalidParameter(format!(
                    "{} holds {} nodes, the sweep needs {nodes}",
                    dirs[r].display(),
                    loaded.len()
                )));
            }
            loaded.truncate(nodes);
            let splits = cfg.data.generate(replicate_seeds(cfg.seed, r).data)?;
            Ok((splits.test, loaded))
        }
        None => {
            let (splits, ensemble) = train_replicate(cfg, r, nodes, None)?;
            Ok((splits.test, ensemble.nodes))
        }
    }
}

fn summarize(x: f64, evals: &[Evaluation]) -> SweepRow {
    let n = evals.len() as f64;
    let accuracy = evals.iter().map(|e| e.accuracy).sum::<f64>() / n;
    let var = evals.iter().map(|e| (e.accuracy - accuracy).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    SweepRow {
        x,
        accuracy,
        accuracy_std: var.sqrt(),
        delay_ms: evals.iter().map(|e| e.delay_ms).sum::<f64>() / n,
    }
}

/// Runs the sweep described by `cfg`. Points and replicates are evaluated
/// concurrently; point `i` of replicate `r` draws snapshots from the
/// stream seeded `eval + i`, so results do not depend on scheduling.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let kind = SweepKind::from_task(cfg.task)
        .ok_or_else(|| Error::Config(format!("task {} is not a sweep", cfg.task)))?;
    let sweep = cfg.sweep()?;
    let settings = |p: f64| EvalSettings {
        algorithm: sweep.algorithm,
        p,
        snapshots_per_sample: sweep.snapshots_per_sample,
        rho: sweep.rho,
        network: &cfg.network,
    };
    let jobs: Vec<(usize, usize)> = (0..sweep.values.len())
        .flat_map(|i| (0..sweep.seeds).map(move |r| (i, r)))
        .collect();

    let evals: Vec<Evaluation> = match kind {
        SweepKind::Bits => {
            let k = cfg.sweep_nodes()?;
            jobs.par_iter()
                .map(|&(i, r)| {
                    let bits = sweep.values[i] as u32;
                    let (splits, ensemble) = train_replicate(cfg, r, k, Some(1usize << bits))?;
                    let mut rng = RngStream::new(replicate_seeds(cfg.seed, r).eval.wrapping_add(i as u64));
                    evaluate(&ensemble.nodes, &splits.test, &settings(sweep.p), &mut rng)
                })
                .collect::<Result<_>>()?
        }
        SweepKind::K | SweepKind::P => {
            let k_max = match kind {
                SweepKind::K => sweep.values.iter().fold(0.0f64, |a, &b| a.max(b)) as usize,
                _ => cfg.sweep_nodes()?,
            };
            let models = (0..sweep.seeds)
                .into_par_iter()
                .map(|r| replicate_models(cfg, r, k_max))
                .collect::<Result<Vec<_>>>()?;
            jobs.par_iter()
                .map(|&(i, r)| {
                    let (test, nodes) = &models[r];
                    let mut rng = RngStream::new(replicate_seeds(cfg.seed, r).eval.wrapping_add(i as u64));
                    match kind {
                        SweepKind::K => {
                            // disjoint groups of K consecutive nodes
                            let k = sweep.values[i] as usize;
                            let groups: Vec<Evaluation> = nodes
                                .chunks_exact(k)
                                .map(|g| evaluate(&renumbered(g), test, &settings(sweep.p), &mut rng))
                                .collect::<Result<_>>()?;
                            let n = groups.len() as f64;
                            Ok(Evaluation {
                                accuracy: groups.iter().map(|e| e.accuracy).sum::<f64>() / n,
                                delay_ms: groups.iter().map(|e| e.delay_ms).sum::<f64>() / n,
                                rounds: groups.iter().map(|e| e.rounds).sum(),
                            })
                        }
                        _ => evaluate(nodes, test, &settings(sweep.values[i]), &mut rng),
                    }
                })
                .collect::<Result<_>>()?
        }
    };

    let rows = sweep
        .values
        .iter()
        .enumerate()
        .map(|(i, &x)| summarize(x, &evals[i * sweep.seeds..(i + 1) * sweep.seeds]))
        .collect();
    Ok(SweepResult { kind, rows })
}
