//! The intent buffer at work: one plan of `M * H_chunk` rows feeds `M`
//! refiner chunks, so planning cost is amortized across the horizon.

use hybrid_policy::env::EnvConfig;
use hybrid_policy::planner::{PlannerConfig, PlannerModel, SampleMode};
use hybrid_policy::refiner::{RefinerConfig, RefinerModel};
use hybrid_policy::rng::RngState;
use hybrid_policy::runtime::{
    amortized_latency, clock_trace, measure_latency, run_episode, ClockModel, EpisodeSpec, ExecMode, HorizonConfig, Policy,
};

fn main() -> hybrid_policy::Result<()> {
    // Two measured operating points pin down the per-call costs.
    let clock = ClockModel::fit(2, 122.0, 5, 104.0)?;
    println!("fitted refine {:.1} ms, plan {:.1} ms", clock.c_refine, clock.c_plan);
    for m in 1..=5 {
        let measured = measure_latency(&clock_trace(&clock, m, 60)?)?;
        println!("M={m}: amortized {:.1} ms/chunk, simulated {measured:.1} ms/chunk", amortized_latency(&clock, m)?);
    }

    // Untrained models still exercise the buffer schedule.
    let env = EnvConfig { horizon: 60, ..EnvConfig::default() };
    let (h_chunk, max_m) = (5, 4);
    let mut rng = RngState::new(5);
    let planner = PlannerModel::new(PlannerConfig::new(8, max_m * h_chunk, env.dims, env.num_targets), &mut rng)?;
    let refiner = RefinerModel::new(
        RefinerConfig {
            k_diff: 10,
            ..RefinerConfig::new(h_chunk, env.dims, 8, env.num_targets)
        },
        &mut rng,
    )?;
    let policy = Policy::Hierarchical {
        planner: &planner,
        refiner: &refiner,
        plan_mode: SampleMode::Argmax,
    };
    for (m, mode) in [(1, ExecMode::Sync), (2, ExecMode::Async), (4, ExecMode::Async)] {
        let spec = EpisodeSpec {
            env: &env,
            horizon: HorizonConfig::new(m, h_chunk)?,
            mode,
            clock,
            episode_seed: 9,
            task_id: 1,
        };
        let trace = run_episode(&spec, policy, &mut RngState::new(9))?;
        let pattern: String = trace.records.iter().map(|r| if r.planned { 'P' } else { '.' }).collect();
        println!(
            "M={m} {mode:?}: {} chunks, {} plans [{pattern}], {:.0} ms total",
            trace.records.len(),
            trace.planner_calls(),
            trace.total_ms()
        );
    }
    Ok(())
}
