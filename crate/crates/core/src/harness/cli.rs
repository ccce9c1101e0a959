//! Command-line front end.
//!
//! ```text
//! edge-ensemble <latency-cdf|train|infer|sweep> --config <path> [--seed N] [--out DIR]
//! ```
//!
//! Exit status: 0 on success, 2 for usage or configuration errors, 1 when
//! a run fails.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::latency::{closed_form_curve, eps_grid, monte_carlo_cdf, LatencyConfig};
use crate::models::{load_ensemble, save_ensemble};
use crate::network::sample_snapshot;
use crate::numerics::RngStream;
use crate::protocol::{run_round, InferenceRequest};
use crate::{Error, Result};

use super::config::{replicate_seeds, ExperimentConfig, Task};
use super::csv::{cdf_csv, fmt_sig, sweep_csv, write_file};
use super::sweep::{latency_config, run_sweep, train_replicate};

#[derive(Debug, Parser)]
#[command(name = "edge-ensemble", version, about = "Edge-ensemble inference experiments", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form and Monte Carlo round-delay CDFs for a grid of cells.
    LatencyCdf(RunArgs),
    /// Train an ensemble and save it.
    Train(RunArgs),
    /// Run one inference round on a saved ensemble.
    Infer(RunArgs),
    /// Accuracy sweep over K, quantizer bits, or link probability.
    Sweep(RunArgs),
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (without the program name), runs the command and returns
/// the exit status.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

/// [`cli_main`] writing to the given streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv = std::iter::once(OsString::from("edge-ensemble")).chain(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    let (args, accepts): (RunArgs, fn(Task) -> bool) = match command {
        Command::LatencyCdf(a) => (a, |t| t == Task::LatencyCdf),
        Command::Train(a) => (a, |t| t == Task::Train),
        Command::Infer(a) => (a, |t| t == Task::Infer),
        Command::Sweep(a) => (a, Task::is_sweep),
    };
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = args.out {
        cfg.output = dir;
    }
    if !accepts(cfg.task) {
        return Err(Error::Config(format!("config task {} does not match the subcommand", cfg.task)));
    }
    cfg.validate()?;
    match cfg.task {
        Task::LatencyCdf => latency_cdf(&cfg, out),
        Task::Train => train(&cfg, out),
        Task::Infer => infer(&cfg, out),
        _ => sweep(&cfg, out),
    }
}

fn report(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// File name of one latency cell.
pub fn cdf_file_name(p: f64, b1: u64, k: usize) -> String {
    format!("cdf_p{}_b{b1}_k{k}.csv", fmt_sig(p))
}

/// All cells are computed before any file is written. Cell `i` (in
/// `p`, `b1_bits`, `k` order) seeds its Monte Carlo run with `seed + i`.
fn latency_cdf(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let lat = cfg.latency()?;
    let mut files = Vec::new();
    for &p in &lat.p {
        for &b1 in &lat.b1_bits {
            for &k in &lat.k {
                let cell = LatencyConfig {
                    tau_p: lat.tau_ms.for_users(k),
                    b1,
                    b2: lat.b2_bits,
                    p,
                    dist: lat.capacity.clone(),
                };
                let grid = eps_grid(&cell, lat.grid_points);
                let closed = closed_form_curve(&cell, lat.inferring_user, &grid)?;
                let seed = cfg.seed.wrapping_add(files.len() as u64);
                let mc = monte_carlo_cdf(&cell, lat.inferring_user, &grid, lat.trials, seed)?;
                files.push((cfg.output.join(cdf_file_name(p, b1, k)), cdf_csv(&closed, &mc)?));
            }
        }
    }
    for (path, text) in &files {
        write_file(path, text)?;
        report(out, &format!("wrote {}", path.display()))?;
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let (_, ens) = train_replicate(cfg, 0, cfg.training.nodes, None)?;
    let mut history = String::from("node,epoch,loss_quantized,loss_raw\n");
    for (j, (q, r)) in ens.loss_history.iter().zip(&ens.raw_loss_history).enumerate() {
        for (epoch, (lq, lr)) in q.iter().zip(r).enumerate() {
            let _ = writeln!(history, "{j},{epoch},{},{}", fmt_sig(*lq), fmt_sig(*lr));
        }
    }
    let mut accuracy = String::from("node,val_acc_raw,val_acc_quant\n");
    for n in &ens.nodes {
        let _ = writeln!(accuracy, "{},{},{}", n.node_id, fmt_sig(n.val_acc_raw), fmt_sig(n.val_acc_quant));
    }
    save_ensemble(&cfg.output, &ens.shared, &ens.nodes)?;
    write_file(&cfg.output.join("loss_history.csv"), &history)?;
    write_file(&cfg.output.join("validation.csv"), &accuracy)?;
    let k = ens.nodes.len() as f64;
    let raw = ens.nodes.iter().map(|n| n.val_acc_raw).sum::<f64>() / k;
    let quant = ens.nodes.iter().map(|n| n.val_acc_quant).sum::<f64>() / k;
    report(
        out,
        &format!(
            "trained {} nodes; mean validation accuracy raw {} quantized {}; wrote {}",
            ens.nodes.len(),
            fmt_sig(raw),
            fmt_sig(quant),
            cfg.output.display()
        ),
    )
}

fn infer(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let inf = cfg.infer()?;
    let (shared, nodes) = load_ensemble(&inf.model_dir)?;
    if inf.inferring_user >= nodes.len() {
        return Err(Error::IndexOutOfRange {
            index: inf.inferring_user,
            len: nodes.len(),
        });
    }
    let seeds = replicate_seeds(cfg.seed, 0);
    let test = cfg.data.generate(seeds.data)?.test;
    let (x, label) = test.samples[inf.sample_index].clone();
    let mut rng = RngStream::new(seeds.eval);
    let snapshot = sample_snapshot(nodes.len(), cfg.network.p, &cfg.network.capacity, &mut rng)?;
    let latency = latency_config(
        &cfg.network,
        nodes.len(),
        shared.codebook.bit_budget(),
        nodes[0].n_classes(),
        cfg.network.p,
    );
    let req = InferenceRequest {
        inferring: inf.inferring_user,
        x,
        snapshot,
        algorithm: inf.algorithm,
    };
    let trace = run_round(&req, &nodes, &latency, inf.rho)?;
    let probs: BTreeMap<String, &[f64]> = trace
        .per_node_probs
        .iter()
        .map(|(j, p)| (j.to_string(), p.probs()))
        .collect();
    let weights = trace
        .weights
        .as_ref()
        .map(|w| w.iter().map(|(j, a)| (j.to_string(), *a)).collect::<BTreeMap<_, _>>());
    let line = serde_json::json!({
        "i_t": inf.inferring_user,
        "algorithm": inf.algorithm,
        "sample_index": inf.sample_index,
        "participants": trace.participants,
        "prediction": trace.prediction,
        "true_label": label,
        "delay_ms": trace.delay_ms,
        "per_node_probs": probs,
        "weights": weights,
    });
    report(out, &line.to_string())
}

fn sweep(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let result = run_sweep(cfg)?;
    let path = cfg.output.join(result.kind.file_name());
    write_file(&path, &sweep_csv(&result))?;
    report(out, &format!("wrote {}", path.display()))
}
