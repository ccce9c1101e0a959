//! One collaborative inference round.
//!
//! [`Algorithm::Shared`]: every participant, the inferring user included,
//! decodes the broadcast quantized features; the replies are averaged.
//!
//! [`Algorithm::LocalRaw`]: the inferring user decodes its raw sample with
//! its raw-path decoder, neighbors decode the quantized features, and the
//! replies are combined with accuracy-derived weights.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::latency::{round_delay, LatencyConfig};
use crate::models::{decode, NodeModel};
use crate::network::NetworkSnapshot;
use crate::numerics::{argmax, ProbVector};
use crate::{Error, Result};

/// Default sharpening exponent for the aggregation weights.
pub const DEFAULT_RHO: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// All participants decode quantized features; mean aggregation.
    #[serde(rename = "algo1")]
    Shared,
    /// Raw-sample local decode plus weighted neighbor votes.
    #[serde(rename = "algo2")]
    LocalRaw,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Shared => "algo1",
            Algorithm::LocalRaw => "algo2",
        })
    }
}

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub inferring: usize,
    pub x: Vec<f64>,
    pub snapshot: NetworkSnapshot,
    pub algorithm: Algorithm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    pub prediction: usize,
    pub per_node_probs: BTreeMap<usize, ProbVector>,
    /// Aggregation weight per node; only set for [`Algorithm::LocalRaw`].
    pub weights: Option<BTreeMap<usize, f64>>,
    pub delay_ms: f64,
    pub participants: Vec<usize>,
}

fn check_uniform(probs: &[&ProbVector]) -> Result<usize> {
    let n = probs.first().ok_or(Error::Empty("probability vectors"))?.len();
    if let Some(bad) = probs.iter().find(|p| p.len() != n) {
        return Err(Error::shape(format!("{n} classes"), bad.len()));
    }
    Ok(n)
}

/// Argmax of the averaged probability vectors; ties go to the lowest label.
pub fn aggregate_mean(probs: &[ProbVector]) -> Result<usize> {
    let refs: Vec<&ProbVector> = probs.iter().collect();
    let n = check_uniform(&refs)?;
    let scale = 1.0 / probs.len() as f64;
    let mean: Vec<f64> = (0..n)
        .map(|c| probs.iter().map(|p| p.probs()[c]).sum::<f64>() * scale)
        .collect();
    Ok(argmax(&mean))
}

/// Weights for `K` participants from validation accuracies `v`, where
/// `v[0]` is the inferring user's raw-path accuracy and the rest are the
/// neighbors' quantized-path accuracies.
///
/// With `v̂_j = v_j^ρ / Σ v_i^ρ` and `Z = v_0 + Σ_{i≥1} v̂_i / √K`:
/// `α_0 = v_0 / Z` and `α_j = v̂_j / (√K · Z)`.
pub fn aggregation_weights(v: &[f64], rho: f64, k: usize) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("validation accuracies"));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    if let Some(bad) = v.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::InvalidParameter(format!(
            "validation accuracy {bad} is outside (0, 1]"
        )));
    }
    if !rho.is_finite() {
        return Err(Error::InvalidParameter(format!("rho = {rho}")));
    }
    let powered: Vec<f64> = v.iter().map(|x| x.powf(rho)).collect();
    let total: f64 = powered.iter().sum();
    let root_k = (k as f64).sqrt();
    let relative: Vec<f64> = powered.iter().map(|x| x / total).collect();
    let z = v[0] + relative[1..].iter().sum::<f64>() / root_k;
    let mut alpha = Vec::with_capacity(v.len());
    alpha.push(v[0] / z);
    alpha.extend(relative[1..].iter().map(|r| r / (root_k * z)));
    Ok(alpha)
}

/// `argmax (1/|S|)·(α_0·local + Σ_j α_j·neighbor_j)`; `weights[0]` is the
/// local weight.
pub fn aggregate_weighted(local: &ProbVector, neighbors: &[ProbVector], weights: &[f64]) -> Result<usize> {
    if weights.len() != neighbors.len() + 1 {
        return Err(Error::shape(
            format!("{} weights", neighbors.len() + 1),
            weights.len(),
        ));
    }
    let mut refs = vec![local];
    refs.extend(neighbors.iter());
    let n = check_uniform(&refs)?;
    let scale = 1.0 / refs.len() as f64;
    let scores: Vec<f64> = (0..n)
        .map(|c| {
            let neighbor: f64 = neighbors
                .iter()
                .zip(&weights[1..])
                .map(|(p, a)| a * p.probs()[c])
                .sum();
            scale * (neighbor + weights[0] * local.probs()[c])
        })
        .collect();
    Ok(argmax(&scores))
}

/// Runs one round over `ensemble` (indexed by node id) with aggregation
/// sharpening `rho`.
pub fn run_round(
    req: &InferenceRequest,
    ensemble: &[NodeModel],
    cfg: &LatencyConfig,
    rho: f64,
) -> Result<InferenceTrace> {
    let users = req.snapshot.users();
    if ensemble.len() != users || cfg.users() != users {
        return Err(Error::shape(
            format!("{users} nodes and compute delays"),
            format!("{} nodes, {} delays", ensemble.len(), cfg.users()),
        ));
    }
    if let Some((pos, node)) = ensemble.iter().enumerate().find(|(i, n)| n.node_id != *i) {
        return Err(Error::InvalidParameter(format!(
            "ensemble slot {pos} holds node {}",
            node.node_id
        )));
    }
    let shared = &ensemble[0].shared;
    if ensemble.iter().any(|n| !Arc::ptr_eq(&n.shared, shared) && *n.shared != **shared) {
        return Err(Error::InvalidParameter("nodes do not share one encoder and codebook".into()));
    }
    let participants = req.snapshot.active_neighbors(req.inferring)?;
    let delay_ms = round_delay(&req.snapshot, cfg, req.inferring)?;
    let z = shared.encode(&req.x)?;
    let features = z.dequantized.data();

    let mut per_node_probs = BTreeMap::new();
    let (prediction, weights) = match req.algorithm {
        Algorithm::Shared => {
            let probs = participants
                .iter()
                .map(|&j| decode(&ensemble[j].decoder_quant, features))
                .collect::<Result<Vec<_>>>()?;
            let prediction = aggregate_mean(&probs)?;
            per_node_probs.extend(participants.iter().copied().zip(probs));
            (prediction, None)
        }
        Algorithm::LocalRaw => {
            let me = &ensemble[req.inferring];
            let local = decode(&me.decoder_raw, &req.x)?;
            let others: Vec<usize> = participants.iter().copied().filter(|&j| j != req.inferring).collect();
            let neighbor_probs = others
                .iter()
                .map(|&j| decode(&ensemble[j].decoder_quant, features))
                .collect::<Result<Vec<_>>>()?;
            let mut v = vec![me.val_acc_raw];
            v.extend(others.iter().map(|&j| ensemble[j].val_acc_quant));
            let alpha = aggregation_weights(&v, rho, participants.len())?;
            let prediction = aggregate_weighted(&local, &neighbor_probs, &alpha)?;
            let mut weights = BTreeMap::new();
            weights.insert(req.inferring, alpha[0]);
            weights.extend(others.iter().copied().zip(alpha[1..].iter().copied()));
            per_node_probs.insert(req.inferring, local);
            per_node_probs.extend(others.into_iter().zip(neighbor_probs));
            (prediction, Some(weights))
        }
    };
    Ok(InferenceTrace {
        prediction,
        per_node_probs,
        weights,
        delay_ms,
        participants,
    })
}
