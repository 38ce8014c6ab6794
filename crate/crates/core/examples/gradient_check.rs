//! Finite-difference check of the hand-written backward passes.

use hybrid_policy::nn::gradcheck::{check_param_grads, finite_difference, max_rel_error};
use hybrid_policy::nn::{softmax_ce, Activation, AttentionBlock, Mlp, ParamStore};
use hybrid_policy::rng::RngState;
use ndarray::{Array2, Array3};

fn main() -> hybrid_policy::Result<()> {
    let mut rng = RngState::new(7);

    let mut ps = ParamStore::new();
    let mlp = Mlp::new(&mut ps, "mlp", &[4, 16, 3], Activation::Gelu, &mut rng);
    let x = Array2::from_shape_fn((5, 4), |_| rng.normal());
    let r = Array2::from_shape_fn((5, 3), |_| rng.normal());
    let (_, cache) = mlp.forward(&ps, &x)?;
    ps.zero_grads();
    mlp.backward(&mut ps, &cache, &r);
    let err = check_param_grads(&mut ps, |p| (mlp.apply(p, &x).unwrap() * &r).sum(), 1e-5);
    println!("mlp parameters: max relative error {err:.2e}");

    let mut ps = ParamStore::new();
    let attn = AttentionBlock::new(&mut ps, "attn", 6, &mut rng);
    let x = Array3::from_shape_fn((2, 4, 6), |_| rng.normal());
    let r = Array3::from_shape_fn((2, 4, 6), |_| rng.normal());
    let (_, cache) = attn.forward(&ps, &x)?;
    ps.zero_grads();
    attn.backward(&mut ps, &cache, &r);
    let err = check_param_grads(&mut ps, |p| (attn.forward(p, &x).unwrap().0 * &r).sum(), 1e-5);
    println!("attention parameters: max relative error {err:.2e}");

    let mut logits: Vec<f64> = (0..8).map(|_| 3.0 * rng.normal()).collect();
    let (loss, grad) = softmax_ce(&logits, 2)?;
    let fd = finite_difference(&mut logits, 1e-5, |v| softmax_ce(v, 2).unwrap().0);
    println!("softmax cross-entropy {loss:.4}: max relative error {:.2e}", max_rel_error(&grad, &fd));
    Ok(())
}
