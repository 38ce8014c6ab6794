//! Single-head bidirectional scaled-dot-product attention with a residual
//! connection: `Y = X + softmax(X Wq (X Wk)^T / sqrt(d)) X Wv Wo`.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array2, Array3, Axis};

use super::params::{ParamId, ParamStore};
use crate::error::{shape_err, Result};
use crate::rng::RngState;

#[derive(Debug)]
pub struct AttentionBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dim: usize,
    calls: AtomicUsize,
}

impl Clone for AttentionBlock {
    fn clone(&self) -> Self {
        Self {
            wq: self.wq,
            wk: self.wk,
            wv: self.wv,
            wo: self.wo,
            dim: self.dim,
            calls: AtomicUsize::new(self.calls()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    batch: usize,
    tokens: usize,
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
}

impl AttentionCache {
    /// Attention weights of sample `b` (rows are queries).
    pub fn weights(&self, b: usize) -> &Array2<f64> {
        &self.attn[b]
    }
}

impl AttentionBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut RngState) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        let mut mk = |suffix: &str| {
            ps.add(
                format!("{name}.{suffix}"),
                Array2::from_shape_fn((dim, dim), |_| rng.uniform_range(-bound, bound)),
            )
        };
        let (wq, wk, wv, wo) = (mk("wq"), mk("wk"), mk("wv"), mk("wo"));
        Self {
            wq,
            wk,
            wv,
            wo,
            dim,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of forward invocations since construction.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Forward a batch `(B, T, d)`.
    pub fn forward(&self, ps: &ParamStore, x: &Array3<f64>) -> Result<(Array3<f64>, AttentionCache)> {
        let (batch, tokens, d) = x.dim();
        if d != self.dim || tokens == 0 {
            return Err(shape_err(format!(
                "attention expects (B, T>=1, {}), got {:?}",
                self.dim,
                x.dim()
            )));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let x2 = x
            .to_shape((batch * tokens, d))
            .map_err(|e| shape_err(e.to_string()))?
            .to_owned();
        let q = x2.dot(ps.value(self.wq));
        let k = x2.dot(ps.value(self.wk));
        let v = x2.dot(ps.value(self.wv));
        let scale = 1.0 / (d as f64).sqrt();
        let mut o = Array2::zeros((batch * tokens, d));
        let mut attn = Vec::with_capacity(batch);
        for b in 0..batch {
            let rows = s![b * tokens..(b + 1) * tokens, ..];
            let mut a = q.slice(rows).dot(&k.slice(rows).t());
            for mut row in a.axis_iter_mut(Axis(0)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| ((v - max) * scale).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            o.slice_mut(rows).assign(&a.dot(&v.slice(rows)));
            attn.push(a);
        }
        let y2 = &x2 + &o.dot(ps.value(self.wo));
        let y = y2
            .into_shape_with_order((batch, tokens, d))
            .map_err(|e| shape_err(e.to_string()))?;
        Ok((
            y,
            AttentionCache {
                batch,
                tokens,
                x: x2,
                q,
                k,
                v,
                attn,
                o,
            },
        ))
    }

    /// Accumulate parameter gradients and return `dL/dX`.
    pub fn backward(&self, ps: &mut ParamStore, cache: &AttentionCache, dy: &Array3<f64>) -> Array3<f64> {
        let (batch, tokens, d) = (cache.batch, cache.tokens, self.dim);
        let dy2 = dy
            .to_shape((batch * tokens, d))
            .expect("dy shape matches forward")
            .to_owned();
        let scale = 1.0 / (d as f64).sqrt();

        *ps.grad_mut(self.wo) += &cache.o.t().dot(&dy2);
        let d_o = dy2.dot(&ps.value(self.wo).t());

        let mut dq = Array2::zeros((batch * tokens, d));
        let mut dk = Array2::zeros((batch * tokens, d));
        let mut dv = Array2::zeros((batch * tokens, d));
        for b in 0..batch {
            let rows = s![b * tokens..(b + 1) * tokens, ..];
            let a = &cache.attn[b];
            let d_ob = d_o.slice(rows);
            let da = d_ob.dot(&cache.v.slice(rows).t());
            dv.slice_mut(rows).assign(&a.t().dot(&d_ob));
            // softmax backward, row-wise
            let mut ds = &da * a;
            let row_sums = ds.sum_axis(Axis(1));
            for (i, mut row) in ds.axis_iter_mut(Axis(0)).enumerate() {
                let ar = a.row(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - ar[j] * row_sums[i]) * scale;
                }
            }
            dq.slice_mut(rows).assign(&ds.dot(&cache.k.slice(rows)));
            dk.slice_mut(rows).assign(&ds.t().dot(&cache.q.slice(rows)));
        }
        *ps.grad_mut(self.wq) += &cache.x.t().dot(&dq);
        *ps.grad_mut(self.wk) += &cache.x.t().dot(&dk);
        *ps.grad_mut(self.wv) += &cache.x.t().dot(&dv);

        let dx2 = dy2
            + dq.dot(&ps.value(self.wq).t())
            + dk.dot(&ps.value(self.wk).t())
            + dv.dot(&ps.value(self.wv).t());
        dx2.into_shape_with_order((batch, tokens, d))
            .expect("dx shape matches forward")
    }

    /// Single-sample convenience wrapper over `(T, d)` tokens.
    pub fn apply(&self, ps: &ParamStore, tokens: &Array2<f64>) -> Result<Array2<f64>> {
        let x = tokens.clone().insert_axis(Axis(0));
        let (y, _) = self.forward(ps, &x)?;
        Ok(y.index_axis_move(Axis(0), 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_param_grads, finite_difference, max_rel_error};

    fn block(seed: u64, d: usize) -> (ParamStore, AttentionBlock, RngState) {
        let mut rng = RngState::new(seed);
        let mut ps = ParamStore::new();
        let blk = AttentionBlock::new(&mut ps, "attn", d, &mut rng);
        (ps, blk, rng)
    }

    #[test]
    fn single_token_is_value_path() {
        let (ps, blk, mut rng) = block(3, 4);
        let x = Array2::from_shape_fn((1, 4), |_| rng.normal());
        let y = blk.apply(&ps, &x).unwrap();
        let expected = &x + &x.dot(ps.value(blk.wv)).dot(ps.value(blk.wo));
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_identical_outputs() {
        let (ps, blk, mut rng) = block(5, 3);
        let row: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let x = Array2::from_shape_fn((6, 3), |(_, j)| row[j]);
        let y = blk.apply(&ps, &x).unwrap();
        for i in 1..6 {
            for j in 0..3 {
                assert!((y[[i, j]] - y[[0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let (ps, blk, _) = block(0, 4);
        assert!(blk.apply(&ps, &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut ps, blk, mut rng) = block(9, 4);
        let x = Array3::from_shape_fn((2, 5, 4), |_| rng.normal());
        let r = Array3::from_shape_fn((2, 5, 4), |_| rng.normal());
        let loss = |ps: &ParamStore, x: &Array3<f64>| (blk.forward(ps, x).unwrap().0 * &r).sum();

        let (_, cache) = blk.forward(&ps, &x).unwrap();
        ps.zero_grads();
        let dx = blk.backward(&mut ps, &cache, &r);
        assert!(check_param_grads(&mut ps, |p| loss(p, &x), 1e-5) < 1e-4);

        let mut flat: Vec<f64> = x.iter().copied().collect();
        let fd = finite_difference(&mut flat, 1e-5, |v| {
            loss(&ps, &Array3::from_shape_vec((2, 5, 4), v.to_vec()).unwrap())
        });
        assert!(max_rel_error(dx.as_slice().unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn counts_invocations() {
        let (ps, blk, _) = block(0, 2);
        blk.apply(&ps, &Array2::zeros((3, 2))).unwrap();
        blk.apply(&ps, &Array2::zeros((3, 2))).unwrap();
        assert_eq!(blk.calls(), 2);
    }
}
