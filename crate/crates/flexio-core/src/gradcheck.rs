//! Finite-difference gradient verification utilities.

use crate::autograd::Arr;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_diff<F: FnMut(&Arr) -> f64>(mut f: F, x: &Arr, eps: f64) -> Arr {
    let mut g = Arr::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[&idx];
        xp[&idx] = orig + eps;
        let fp = f(&xp);
        xp[&idx] = orig - eps;
        let fm = f(&xp);
        xp[&idx] = orig;
        g[&idx] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Norm-based relative error ||a - b|| / max(||a|| + ||b||, floor).
pub fn rel_error(a: &Arr, b: &Arr) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt() + b.mapv(|v| v * v).sum().sqrt();
    diff / scale.max(1e-8)
}
