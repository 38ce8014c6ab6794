//! The multi-target reaching task: observation channels, the scripted
//! expert and a perturbed demonstration.

use hybrid_policy::env::{self, Channel, EnvConfig};

fn main() -> hybrid_policy::Result<()> {
    let cfg = EnvConfig::default();
    let seed = 11;
    for task in 0..cfg.num_targets {
        let s = env::reset(&cfg, seed, task)?;
        let traj = env::rollout_expert(&cfg, seed, task)?;
        println!(
            "task {task}: goal {:.2?} start error {:.3} expert {} in {} steps",
            s.goal(),
            s.goal_error(),
            if traj.success { "succeeds" } else { "fails" },
            traj.len()
        );
    }

    let s = env::reset(&cfg, seed, 0)?;
    println!("planner sees {:.2?}", env::observe(&cfg, &s, Channel::Planner));
    println!("refiner sees {:.2?}", env::observe(&cfg, &s, Channel::Refiner));

    let noisy = env::rollout_perturbed(&cfg, seed, 0, 0.3)?;
    println!("perturbed demo: {} steps, success {}", noisy.len(), noisy.success);
    Ok(())
}
