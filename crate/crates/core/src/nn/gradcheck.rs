//! Central finite-difference oracles for analytic gradients.

use super::params::ParamStore;

/// Denominator floor below which differences are treated as absolute.
pub const REL_FLOOR: f64 = 1e-6;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(x);
            x[i] = orig - h;
            let minus = f(x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - b_i| / max(|a_i| + |b_i|, REL_FLOOR)`.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Compare the gradients currently stored in `ps` against central
/// differences of `loss` over every parameter scalar. Returns the maximum
/// relative error.
pub fn check_param_grads(ps: &mut ParamStore, mut loss: impl FnMut(&ParamStore) -> f64, h: f64) -> f64 {
    let analytic = ps.flat_grads();
    let mut numeric = Vec::with_capacity(analytic.len());
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let n = ps.value(id).len();
        for j in 0..n {
            let orig = ps.value(id).as_slice().expect("contiguous")[j];
            ps.value_mut(id).as_slice_mut().expect("contiguous")[j] = orig + h;
            let plus = loss(ps);
            ps.value_mut(id).as_slice_mut().expect("contiguous")[j] = orig - h;
            let minus = loss(ps);
            ps.value_mut(id).as_slice_mut().expect("contiguous")[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    max_rel_error(&analytic, &numeric)
}
