use ndarray::{Array2, Axis};

use super::params::{ParamId, ParamStore};
use crate::error::{shape_err, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Dense layer `y = x W + b` over row-major batches.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngState) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.uniform_range(-bound, bound));
        Self {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), Array2::zeros((1, fan_out))),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.fan_in {
            return Err(shape_err(format!(
                "linear expects {} inputs, got {}",
                self.fan_in,
                x.ncols()
            )));
        }
        Ok(x.dot(ps.value(self.w)) + ps.value(self.b))
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&self, ps: &mut ParamStore, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let dx = dy.dot(&ps.value(self.w).t());
        *ps.grad_mut(self.w) += &x.t().dot(dy);
        *ps.grad_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dx
    }
}

/// Multi-layer perceptron; the activation sits between layers, never on
/// the output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `widths` lists every layer boundary, input first.
    pub fn new(ps: &mut ParamStore, name: &str, widths: &[usize], act: Activation, rng: &mut RngState) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, act }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(ps, &h)?;
            inputs.push(h);
            h = if i + 1 < self.layers.len() {
                let a = z.mapv(|v| self.act.apply(v));
                pre.push(z);
                a
            } else {
                z
            };
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    pub fn apply(&self, ps: &ParamStore, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward(ps, x).map(|(y, _)| y)
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &MlpCache, dy: &Array2<f64>) -> Array2<f64> {
        let mut g = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                let z = &cache.pre[i];
                ndarray::Zip::from(&mut g)
                    .and(z)
                    .for_each(|gv, &zv| *gv *= self.act.derivative(zv));
            }
            g = self.layers[i].backward(ps, &cache.inputs[i], &g);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_param_grads, finite_difference, max_rel_error};
    use ndarray::array;

    #[test]
    fn zero_weights_give_bias() {
        let mut ps = ParamStore::new();
        let mut rng = RngState::new(0);
        let mlp = Mlp::new(&mut ps, "m", &[3, 4, 2], Activation::Gelu, &mut rng);
        for id in ps.ids().collect::<Vec<_>>() {
            ps.value_mut(id).fill(0.0);
        }
        *ps.value_mut(mlp.layers[1].b) = array![[0.7, -1.5]];
        let y = mlp.apply(&ps, &array![[1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(y, array![[0.7, -1.5]]);
    }

    #[test]
    fn identity_linear() {
        let mut ps = ParamStore::new();
        let mut rng = RngState::new(0);
        let lin = Linear::new(&mut ps, "l", 3, 3, &mut rng);
        *ps.value_mut(lin.w) = Array2::eye(3);
        let x = array![[0.1, -0.2, 5.0]];
        assert_eq!(lin.forward(&ps, &x).unwrap(), x);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "l", 3, 2, &mut RngState::new(0));
        assert!(lin.forward(&ps, &Array2::zeros((1, 4))).is_err());
    }

    #[test]
    fn activation_derivatives() {
        for act in [Activation::Gelu, Activation::Tanh] {
            for &x in &[-3.0, -0.5, 0.0, 0.3, 2.0] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for act in [Activation::Gelu, Activation::Tanh] {
            let mut rng = RngState::new(11);
            let mut ps = ParamStore::new();
            let mlp = Mlp::new(&mut ps, "m", &[4, 6, 3], act, &mut rng);
            let x = Array2::from_shape_fn((5, 4), |_| rng.normal());
            let r = Array2::from_shape_fn((5, 3), |_| rng.normal());
            let loss = |ps: &ParamStore, x: &Array2<f64>| (mlp.apply(ps, x).unwrap() * &r).sum();

            let (_, cache) = mlp.forward(&ps, &x).unwrap();
            ps.zero_grads();
            let dx = mlp.backward(&mut ps, &cache, &r);
            assert!(check_param_grads(&mut ps, |p| loss(p, &x), 1e-5) < 1e-4);

            let mut flat = x.iter().copied().collect::<Vec<_>>();
            let fd = finite_difference(&mut flat, 1e-5, |v| {
                loss(&ps, &Array2::from_shape_vec((5, 4), v.to_vec()).unwrap())
            });
            assert!(max_rel_error(dx.as_slice().unwrap(), &fd) < 1e-4);
        }
    }
}
