use std::sync::Arc;

use edge_ensemble::models::{
    decode, load_ensemble, save_ensemble, train_ensemble, Dataset, Diversity, SyntheticTask, TrainedEnsemble,
    TrainingConfig,
};
use edge_ensemble::numerics::RngStream;
use edge_ensemble::Error;

/// Two classes split by a hyperplane with a margin of 0.5.
fn separable(n: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed);
    let w = [1.0, -2.0, 0.5, 1.5];
    let mut samples = Vec::new();
    while samples.len() < n {
        let x: Vec<f64> = (0..4).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let s: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
        if s.abs() >= 0.5 {
            samples.push((x, usize::from(s > 0.0)));
        }
    }
    Dataset::new(samples, 2).unwrap()
}

fn small_task() -> (Dataset, Dataset) {
    let task = SyntheticTask {
        train: 300,
        validation: 200,
        test: 4,
        ..SyntheticTask::default()
    };
    let s = task.generate(31).unwrap();
    (s.train, s.validation)
}

fn small_config(nodes: usize) -> TrainingConfig {
    TrainingConfig {
        nodes,
        epochs: 12,
        ..TrainingConfig::default()
    }
}

fn train(nodes: usize, seed: u64) -> TrainedEnsemble {
    let (train, val) = small_task();
    train_ensemble(&train, &val, &small_config(nodes), &RngStream::new(seed)).unwrap()
}

#[test]
fn single_node_learns_separable_data() {
    let data = separable(200, 1);
    let cfg = TrainingConfig {
        nodes: 1,
        epochs: 200,
        ..TrainingConfig::default()
    };
    let ens = train_ensemble(&data, &separable(100, 2), &cfg, &RngStream::new(3)).unwrap();
    let node = &ens.nodes[0];
    let correct = data
        .samples
        .iter()
        .filter(|(x, l)| node.predict_quant(x).unwrap() == *l)
        .count();
    let acc = correct as f64 / data.len() as f64;
    assert!(acc >= 0.95, "training accuracy {acc}");
}

#[test]
fn random_init_decoders_differ_and_disagree() {
    let ens = train(3, 4);
    let (_, val) = small_task();
    for a in 0..3 {
        for b in a + 1..3 {
            let pa = ens.nodes[a].decoder_quant.flat_params();
            let pb = ens.nodes[b].decoder_quant.flat_params();
            let dist: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum();
            assert!(dist > 0.0);
            let disagree = val
                .samples
                .iter()
                .filter(|(x, _)| ens.nodes[a].predict_quant(x).unwrap() != ens.nodes[b].predict_quant(x).unwrap())
                .count();
            assert!(disagree > 0, "nodes {a} and {b} never disagree");
        }
    }
}

#[test]
fn training_is_deterministic() {
    let a = train(2, 9);
    let b = train(2, 9);
    assert_eq!(*a.shared, *b.shared);
    for (x, y) in a.nodes.iter().zip(&b.nodes) {
        assert_eq!(x.to_bytes(), y.to_bytes());
    }
    assert_eq!(a.loss_history, b.loss_history);
}

#[test]
fn nodes_share_one_encoder() {
    let ens = train(3, 5);
    for node in &ens.nodes {
        assert!(Arc::ptr_eq(&node.shared, &ens.shared));
    }
}

#[test]
fn loss_is_non_increasing_within_tolerance() {
    let ens = train(3, 6);
    for history in &ens.loss_history {
        assert_eq!(history.len(), 13);
        for w in history.windows(2) {
            assert!(w[1] <= 1.05 * w[0], "loss rose from {} to {}", w[0], w[1]);
        }
        assert!(history[12] < history[0]);
    }
}

#[test]
fn validation_accuracy_uses_full_pipeline() {
    let ens = train(2, 7);
    let (_, val) = small_task();
    for node in &ens.nodes {
        let mut quant = 0;
        let mut raw = 0;
        for (x, label) in &val.samples {
            let z = ens.shared.encode(x).unwrap();
            quant += usize::from(decode(&node.decoder_quant, z.dequantized.data()).unwrap().argmax() == *label);
            raw += usize::from(decode(&node.decoder_raw, x).unwrap().argmax() == *label);
        }
        assert_eq!(node.val_acc_quant, quant as f64 / val.len() as f64);
        assert_eq!(node.val_acc_raw, raw as f64 / val.len() as f64);
    }
}

#[test]
fn bagging_sets_are_pool_plus_shard() {
    let task = SyntheticTask::default();
    let s = task.generate(8).unwrap();
    let cfg = TrainingConfig {
        nodes: 4,
        epochs: 1,
        diversity: Diversity::Bagging {
            shared: Some(680),
            private_per_node: Some(20),
        },
        ..TrainingConfig::default()
    };
    let ens = train_ensemble(&s.train, &s.validation, &cfg, &RngStream::new(1)).unwrap();
    let sets = &ens.training_sets;
    assert!(sets.iter().all(|set| set.len() == 700));
    let common: Vec<usize> = sets[0].iter().copied().filter(|i| sets[1..].iter().all(|s| s.contains(i))).collect();
    assert_eq!(common.len(), 680);
    let mut all: Vec<usize> = sets.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 760);
}

#[test]
fn ensemble_files_round_trip_and_report_missing() {
    let ens = train(2, 10);
    let dir = tempfile::tempdir().unwrap();
    save_ensemble(dir.path(), &ens.shared, &ens.nodes).unwrap();
    let (shared, nodes) = load_ensemble(dir.path()).unwrap();
    assert_eq!(*shared, *ens.shared);
    assert_eq!(nodes.len(), 2);
    for (a, b) in nodes.iter().zip(&ens.nodes) {
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    let empty = tempfile::tempdir().unwrap();
    match load_ensemble(empty.path()) {
        Err(Error::MissingFiles(paths)) => {
            assert_eq!(paths.len(), 3);
            let msg = Error::MissingFiles(paths).to_string();
            assert!(msg.contains("encoder.eem") && msg.contains("codebook.eeq") && msg.contains("node_000.eem"));
        }
        other => panic!("expected missing files, got {other:?}"),
    }
}
