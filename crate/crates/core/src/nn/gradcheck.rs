//! Central finite-difference gradient checking.
//!
//! These helpers only evaluate forward closures, so they stay independent of
//! the analytic backward passes they are used to verify.

use super::params::ParamStore;

pub const FD_STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Numerical gradient of `f` with respect to every scalar in `store`.
pub fn numeric_param_grad(store: &mut ParamStore, f: impl Fn(&ParamStore) -> f64) -> Vec<f64> {
    let n = store.numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = *store.scalar_mut(i);
        *store.scalar_mut(i) = orig + FD_STEP;
        let up = f(store);
        *store.scalar_mut(i) = orig - FD_STEP;
        let down = f(store);
        *store.scalar_mut(i) = orig;
        out.push((up - down) / (2.0 * FD_STEP));
    }
    out
}

/// Numerical gradient of `f` with respect to an input vector.
pub fn numeric_input_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + FD_STEP;
            let up = f(&v);
            v[i] = orig - FD_STEP;
            let down = f(&v);
            v[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Numerical gradient at selected flat coordinates only.
pub fn numeric_param_grad_at(
    store: &mut ParamStore,
    coords: &[usize],
    f: impl Fn(&ParamStore) -> f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let orig = *store.scalar_mut(i);
            *store.scalar_mut(i) = orig + FD_STEP;
            let up = f(store);
            *store.scalar_mut(i) = orig - FD_STEP;
            let down = f(store);
            *store.scalar_mut(i) = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Up to `per_tensor` scattered coordinates from every parameter tensor.
pub fn spread_coords(store: &ParamStore, per_tensor: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    for id in store.ids() {
        let n = store.value(id).data().len();
        out.extend((0..per_tensor.min(n)).map(|i| offset + (i * 7919 + 13) % n));
        offset += n;
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Relative error between the analytic gradient at `coords` and `numeric`.
pub fn rel_err_at(analytic_flat: &[f64], coords: &[usize], numeric: &[f64]) -> f64 {
    let a: Vec<f64> = coords.iter().map(|&i| analytic_flat[i]).collect();
    rel_err(&a, numeric)
}
