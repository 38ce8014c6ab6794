//! A conditional diffusion refiner on a two-mode target: the coarse token
//! alone decides which mode a sample lands in.

use hybrid_policy::action::CoarseToken;
use hybrid_policy::nn::{Adam, AdamConfig, LrSchedule};
use hybrid_policy::refiner::{RefinerConfig, RefinerModel};
use hybrid_policy::rng::RngState;
use ndarray::Array2;

fn mode_of(t: CoarseToken) -> f64 {
    if t.0 == 0 {
        -0.5
    } else {
        0.5
    }
}

fn main() -> hybrid_policy::Result<()> {
    let cfg = RefinerConfig {
        width: 64,
        d_emb: 4,
        geo_dim: 8,
        geo_hidden: 16,
        ..RefinerConfig::new(1, 1, 2, 1)
    };
    let mut rng = RngState::new(88);
    let mut model = RefinerModel::new(cfg, &mut rng)?;
    let mut opt = Adam::new(&model.params, AdamConfig::default());
    let (steps, batch) = (4000, 64);
    let sched = LrSchedule::new(3e-3, steps);
    for step in 0..steps {
        let toks: Vec<Vec<CoarseToken>> = (0..batch).map(|_| vec![CoarseToken(rng.below(2) as u32)]).collect();
        let a0 = Array2::from_shape_fn((batch, 1), |(i, _)| mode_of(toks[i][0]));
        let obs = Array2::from_shape_fn((batch, 2), |_| rng.uniform_range(-1.0, 1.0));
        model.params.zero_grads();
        let loss = model.diffusion_loss(&a0, &obs, Some(&toks), &mut rng)?;
        opt.step(&mut model.params, sched.lr_at(step))?;
        if step % 1000 == 0 {
            println!("step {step:>4} noise loss {loss:.4}");
        }
    }

    let n = 200;
    let toks: Vec<Vec<CoarseToken>> = (0..n).map(|i| vec![CoarseToken((i % 2) as u32)]).collect();
    let obs = Array2::from_shape_fn((n, 2), |_| rng.uniform_range(-1.0, 1.0));
    let samples = model.denoise_batch(&obs, Some(&toks), &mut RngState::new(1))?;
    for want in [0u32, 1] {
        let vals: Vec<f64> = (0..n).filter(|i| toks[*i][0].0 == want).map(|i| samples[[i, 0]]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let near = vals.iter().filter(|v| (*v - mode_of(CoarseToken(want))).abs() <= 0.05).count();
        println!("token {want}: mean sample {mean:+.3}, {near}/{} within 0.05 of its mode", vals.len());
    }
    Ok(())
}
