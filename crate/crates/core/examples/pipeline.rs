//! The full experiment pipeline on a small config: generate data, train,
//! evaluate against the monolithic baseline, sweep horizons and plot.
//!
//! Pass an output directory to keep the artifacts; otherwise a temporary
//! directory is used.

use hybrid_policy::harness::plot::plot_files;
use hybrid_policy::harness::{ExperimentConfig, Harness, RunMode};

fn main() -> hybrid_policy::Result<()> {
    let tmp = tempfile::tempdir()?;
    let out = std::env::args().nth(1).map_or_else(|| tmp.path().to_path_buf(), Into::into);
    let cfg: ExperimentConfig = "
        data_episodes = 200
        train_steps = 300
        batch_size = 32
        refiner_width = 64
        k_diff = 10
        tau = 0.5
        ema_decay = 0.95
        eval_episodes = 40
        sweep_horizons = 1,2
    "
    .parse()?;
    println!("config hash {}", cfg.hash());
    let h = Harness::new(cfg, &out);
    h.gen_data()?;
    for mode in [RunMode::Hierarchical, RunMode::Monolithic] {
        h.train(mode)?;
        let s = h.eval(mode)?;
        println!("{mode}: success {:.3} ± {:.3}", s.rate.rate(), s.rate.half_width());
    }
    for r in h.sweep_horizon()?.rows {
        println!("M={} success {:.3}, {:.1} ms/chunk", r.value, r.rate.rate(), r.latency_ms);
    }
    h.latency_model()?;
    let csvs = ["metrics.csv", "sweep_horizon.csv", "latency.csv"].map(|f| out.join(f));
    for svg in plot_files(&csvs, &out.join("plots"))? {
        println!("wrote {}", svg.display());
    }
    Ok(())
}
