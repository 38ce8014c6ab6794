//! Fit the coarse planner alone on expert demonstrations and watch token
//! accuracy climb.

use hybrid_policy::env::dataset::SampleSet;
use hybrid_policy::env::{rollout_perturbed, EnvConfig};
use hybrid_policy::nn::{Adam, AdamConfig};
use hybrid_policy::planner::{batch_plan_loss, PlannerConfig, PlannerModel, SampleMode};
use hybrid_policy::rng::RngState;
use ndarray::Array2;

fn main() -> hybrid_policy::Result<()> {
    let env_cfg = EnvConfig::default();
    let (n_bins, l_macro) = (8, 10);
    let episodes = (0..200)
        .map(|i| rollout_perturbed(&env_cfg, i, (i % 4) as usize, 0.3))
        .collect::<hybrid_policy::Result<Vec<_>>>()?;
    let data = SampleSet::from_trajectories(&env_cfg, &episodes, l_macro);
    println!("{} samples from {} episodes", data.len(), episodes.len());

    let mut rng = RngState::new(3);
    let mut planner = PlannerModel::new(PlannerConfig::new(n_bins, l_macro, env_cfg.dims, env_cfg.num_targets), &mut rng)?;
    let mut opt = Adam::new(&planner.params, AdamConfig::default());
    let batch = 64;
    for step in 0..=600 {
        let idx: Vec<usize> = (0..batch).map(|_| rng.below(data.len())).collect();
        let obs = Array2::from_shape_fn((batch, data.planner_obs.ncols()), |(b, j)| data.planner_obs[[idx[b], j]]);
        let gt: Vec<_> = idx.iter().map(|&i| data.tokens(i, l_macro, n_bins)).collect();
        let (logits, cache) = planner.forward(&obs)?;
        let (loss, acc, dl) = batch_plan_loss(&logits, &gt)?;
        planner.params.zero_grads();
        planner.backward(&cache, &dl);
        opt.step(&mut planner.params, 3e-3)?;
        if step % 100 == 0 {
            println!("step {step:>4} loss {loss:.4} token accuracy {acc:.3}");
        }
    }

    let obs: Vec<f64> = data.planner_obs.row(0).to_vec();
    let plan = hybrid_policy::planner::sample_coarse(&planner.plan_forward(&obs)?, l_macro, SampleMode::Argmax, &mut rng)?;
    let ids: Vec<u32> = plan.tokens().iter().map(|t| t.0).collect();
    println!("plan for sample 0: {ids:?}");
    println!("truth:             {:?}", data.tokens(0, l_macro, n_bins).iter().map(|t| t.0).collect::<Vec<_>>());
    Ok(())
}
