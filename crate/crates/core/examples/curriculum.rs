//! Joint planner/refiner training under each intent-source strategy. The
//! dynamic strategy trains on ground-truth intents until the planner's
//! accuracy average crosses the threshold, then switches to its own plans.

use hybrid_policy::curriculum::{source_boundaries, IntentSource, Strategy};
use hybrid_policy::harness::{build_samples, generate_dataset, joint_trainer, ExperimentConfig};

fn main() -> hybrid_policy::Result<()> {
    let base: ExperimentConfig = "
        data_episodes = 300
        train_steps = 600
        batch_size = 32
        refiner_width = 64
        k_diff = 20
        tau = 0.6
        ema_decay = 0.95
    "
    .parse()?;
    let data = build_samples(&base, &generate_dataset(&base)?)?;
    for strategy in [Strategy::Dynamic, Strategy::NoTf, Strategy::PureTf] {
        let cfg = ExperimentConfig { strategy, ..base.clone() };
        let mut trainer = joint_trainer(&cfg)?;
        let log = trainer.run(&data, cfg.train_steps, |_| {})?;
        let switch = log.iter().find(|m| m.source == Some(IntentSource::Predicted)).map(|m| m.step);
        let last = log.last().expect("non-empty log");
        println!(
            "{:<8}: final l_plan {:.3} l_diff {:.4} accuracy ema {:.3}, first predicted-intent step {switch:?}, {} source switch(es)",
            strategy.to_string(),
            last.l_plan,
            last.l_diff,
            last.acc_ema,
            source_boundaries(&log)
        );
    }
    Ok(())
}
