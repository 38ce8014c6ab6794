use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_policy::harness::plot::plot_files;
use hybrid_policy::harness::{ExperimentConfig, Harness, RunMode};

#[derive(Parser)]
#[command(version, about = "Coarse-to-fine hybrid-action policy experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Accept inputs written under a different config hash.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the demonstration dataset.
    GenData(Common),
    /// Train a hierarchical or monolithic model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "hierarchical")]
        mode: RunMode,
    },
    /// Evaluate checkpoints (or the expert / untrained models).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "hierarchical")]
        mode: RunMode,
    },
    /// Train and evaluate one model per bin count.
    SweepBins(Common),
    /// Evaluate one model across horizon expansion factors.
    SweepHorizon(Common),
    /// Tabulate amortized latency per horizon factor.
    LatencyModel(Common),
    /// Render SVG plots from harness CSVs.
    Plot {
        csv: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn harness(c: &Common) -> hybrid_policy::Result<Harness> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut h = Harness::new(cfg, &c.out);
    h.force = c.force;
    h.verbose = true;
    Ok(h)
}

fn run(cmd: Cmd) -> hybrid_policy::Result<()> {
    match cmd {
        Cmd::GenData(c) => {
            let path = harness(&c)?.gen_data()?;
            println!("wrote {}", path.display());
        }
        Cmd::Train { common, mode } => {
            let log = harness(&common)?.train(mode)?;
            if let Some(last) = log.last() {
                println!("trained {mode} for {} steps, final l_diff {:.5}", log.len(), last.l_diff);
            }
        }
        Cmd::Eval { common, mode } => {
            let s = harness(&common)?.eval(mode)?;
            let (lo, hi) = s.rate.interval();
            println!(
                "{mode}: success {:.3} ({}/{}), 95% interval [{lo:.3}, {hi:.3}], latency {:.1} ms/chunk",
                s.rate.rate(),
                s.rate.successes,
                s.rate.episodes,
                s.latency_ms
            );
        }
        Cmd::SweepBins(c) => {
            for r in harness(&c)?.sweep_bins()?.rows {
                println!("N={:<4} success {:.3} ± {:.3}", r.value, r.rate.rate(), r.rate.half_width());
            }
        }
        Cmd::SweepHorizon(c) => {
            for r in harness(&c)?.sweep_horizon()?.rows {
                println!(
                    "M={} success {:.3} ± {:.3} latency {:.1} ms",
                    r.value,
                    r.rate.rate(),
                    r.rate.half_width(),
                    r.latency_ms
                );
            }
        }
        Cmd::LatencyModel(c) => {
            for r in harness(&c)?.latency_model()? {
                println!("M={} amortized {:.2} ms measured {:.2} ms", r.m, r.amortized_ms, r.measured_ms);
            }
        }
        Cmd::Plot { csv, out } => {
            for p in plot_files(&csv, &out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
