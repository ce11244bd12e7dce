//! Negative SNR training loss and permutation-invariant training (PIT).

use itertools::Itertools;

use crate::autograd::{Graph, Var};
use crate::error::{FlexioError, Result};

/// Clamp inside the loss: caps the loss at -80 dB for a perfect estimate.
pub const LOSS_EPS: f64 = 1e-8;

/// Maximum speaker count for brute-force permutation search (6! = 720).
pub const MAX_PIT_SPEAKERS: usize = 6;

/// -10 log10(||r||^2 / (||r - e||^2 + eps ||r||^2)) as a plain value.
pub fn neg_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(FlexioError::InvalidInput("estimate/target length mismatch".into()));
    }
    let s: f64 = reference.iter().map(|x| x * x).sum();
    if s == 0.0 {
        return Err(FlexioError::InvalidTarget("all-zero target has no defined SNR".into()));
    }
    let e: f64 = est
        .iter()
        .zip(reference)
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    Ok(-10.0 * (s / (e + LOSS_EPS * s)).log10())
}

/// Differentiable negative SNR against a fixed target. The estimate is a
/// graph variable shaped [L]; the returned variable is a scalar ([1]).
pub fn neg_snr_graph(g: &mut Graph, est: Var, reference: &[f64]) -> Result<Var> {
    if g.value(est).len() != reference.len() {
        return Err(FlexioError::InvalidInput("estimate/target length mismatch".into()));
    }
    let s: f64 = reference.iter().map(|x| x * x).sum();
    if s == 0.0 {
        return Err(FlexioError::InvalidTarget("all-zero target has no defined SNR".into()));
    }
    let r = g.constant(
        ndarray::Array1::from_vec(reference.to_vec())
            .into_shape_with_order(g.value(est).raw_dim())
            .unwrap(),
    );
    let d = g.sub(r, est);
    let d2 = g.mul(d, d);
    let e = g.sum_all(d2);
    // loss = (10/ln 10) * ln(e + eps*s) - 10 log10(s)
    let shifted = g.add_scalar(e, LOSS_EPS * s);
    let le = g.ln(shifted);
    let scaled = g.scale(le, 10.0 / std::f64::consts::LN_10);
    Ok(g.add_scalar(scaled, -10.0 * s.log10()))
}

/// PIT loss: minimum over all speaker permutations of the mean per-pair
/// negative SNR. Returns the scalar loss variable and the permutation
/// `perm`, where estimate `i` is matched to target `perm[i]`.
pub fn pit_loss(g: &mut Graph, ests: &[Var], targets: &[Vec<f64>]) -> Result<(Var, Vec<usize>)> {
    let n = ests.len();
    if n == 0 || targets.len() != n {
        return Err(FlexioError::InvalidInput("estimate/target count mismatch".into()));
    }
    if n > MAX_PIT_SPEAKERS {
        return Err(FlexioError::ComplexityError(format!(
            "brute-force permutation search is limited to {MAX_PIT_SPEAKERS} speakers, got {n}"
        )));
    }
    // Pairwise losses once; the permutation search reuses their values.
    let mut pair = vec![Vec::with_capacity(n); n];
    for (i, &e) in ests.iter().enumerate() {
        for t in targets {
            pair[i].push(neg_snr_graph(g, e, t)?);
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| g.value(pair[i][j])[[0]])
            .sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, perm));
        }
    }
    let (_, perm) = best.unwrap();
    let mut acc = pair[0][perm[0]];
    for (i, &j) in perm.iter().enumerate().skip(1) {
        acc = g.add(acc, pair[i][j]);
    }
    Ok((g.scale(acc, 1.0 / n as f64), perm))
}

/// Non-differentiable PIT: minimum mean negative SNR and its permutation.
pub fn pit_assign(ests: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, Vec<usize>)> {
    let n = ests.len();
    if n == 0 || targets.len() != n {
        return Err(FlexioError::InvalidInput("estimate/target count mismatch".into()));
    }
    if n > MAX_PIT_SPEAKERS {
        return Err(FlexioError::ComplexityError(format!(
            "brute-force permutation search is limited to {MAX_PIT_SPEAKERS} speakers, got {n}"
        )));
    }
    let mut pair = vec![Vec::with_capacity(n); n];
    for (i, e) in ests.iter().enumerate() {
        for t in targets {
            pair[i].push(neg_snr(e, t)?);
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| pair[i][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, perm));
        }
    }
    let (total, perm) = best.unwrap();
    Ok((total / n as f64, perm))
}
