//! Scale-invariant SDR metrics and dataset evaluation.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use itertools::Itertools;

use crate::error::{FlexioError, Result};
use crate::loss::MAX_PIT_SPEAKERS;
use crate::model::FlexioModel;
use crate::synth::SceneRecord;

/// SI-SDR values are clamped to this range in dB.
pub const SI_SDR_CLAMP_DB: f64 = 60.0;

/// Scale-invariant signal-to-distortion ratio in dB, clamped to +/-60 dB.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(FlexioError::InvalidInput("estimate/target length mismatch".into()));
    }
    let ref_energy: f64 = reference.iter().map(|x| x * x).sum();
    if ref_energy == 0.0 {
        return Err(FlexioError::InvalidTarget("all-zero target has no defined SI-SDR".into()));
    }
    let dot: f64 = est.iter().zip(reference).map(|(a, b)| a * b).sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let err_energy: f64 = est
        .iter()
        .zip(reference)
        .map(|(a, b)| {
            let e = a - alpha * b;
            e * e
        })
        .sum();
    let db = if err_energy == 0.0 {
        f64::INFINITY
    } else if target_energy == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * (target_energy / err_energy).log10()
    };
    Ok(db.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

/// SI-SDR of the estimate minus SI-SDR of the unprocessed mixture.
pub fn si_sdr_improvement(est: &[f64], mixture: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(si_sdr(est, reference)? - si_sdr(mixture, reference)?)
}

/// Best mean SI-SDR over speaker permutations; `perm[i]` is the target
/// matched to estimate `i`.
pub fn pit_si_sdr(ests: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, Vec<usize>)> {
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
            pair[i].push(si_sdr(e, t)?);
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| pair[i][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, perm));
        }
    }
    let (total, perm) = best.unwrap();
    Ok((total / n as f64, perm))
}

/// Per-scene evaluation result.
#[derive(Clone, Debug)]
pub struct SceneEval {
    pub n: usize,
    pub m: usize,
    pub si_sdr_db: f64,
    pub si_sdri_db: f64,
}

/// Evaluation outcome: per-scene rows plus mean SI-SDRi per (N, M) group.
#[derive(Debug, Default)]
pub struct EvalSummary {
    pub scenes: Vec<SceneEval>,
    pub group_mean_si_sdri: IndexMap<(usize, usize), f64>,
}

/// Run the model over every scene in a manifest and summarize SI-SDR(i).
/// Writes a CSV with one row per scene plus one summary row per group when
/// `csv_path` is given.
pub fn evaluate(
    model: &FlexioModel,
    records: &[SceneRecord],
    base_dir: &Path,
    csv_path: Option<&Path>,
) -> Result<EvalSummary> {
    let threads = crate::parallel::num_threads()?;
    let scenes = crate::parallel::try_map(records, threads, |rec| {
        let scene = rec.load(base_dir)?;
        let sep = model.separate(&scene.mixture, rec.n)?;
        let ests: Vec<Vec<f64>> = (0..rec.n)
            .map(|i| sep.waveforms.row(i).to_vec())
            .collect();
        let targets: Vec<Vec<f64>> = scene
            .targets
            .iter()
            .map(|t| t.samples.row(0).to_vec())
            .collect();
        let (_, perm) = pit_si_sdr(&ests, &targets)?;
        let mix_ref = scene
            .mixture
            .samples
            .row(model.config.ref_channel)
            .to_vec();
        let mut sdr = 0.0;
        let mut sdri = 0.0;
        for (i, &j) in perm.iter().enumerate() {
            sdr += si_sdr(&ests[i], &targets[j])?;
            sdri += si_sdr_improvement(&ests[i], &mix_ref, &targets[j])?;
        }
        sdr /= rec.n as f64;
        sdri /= rec.n as f64;
        Ok(SceneEval { n: rec.n, m: rec.m, si_sdr_db: sdr, si_sdri_db: sdri })
    })?;
    let mut groups: IndexMap<(usize, usize), Vec<f64>> = IndexMap::new();
    for s in &scenes {
        groups.entry((s.n, s.m)).or_default().push(s.si_sdri_db);
    }
    let group_mean_si_sdri: IndexMap<(usize, usize), f64> = groups
        .into_iter()
        .map(|(k, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (k, mean)
        })
        .collect();
    if let Some(path) = csv_path {
        let mut f = File::create(path)?;
        writeln!(f, "kind,n,m,si_sdr_db,si_sdri_db")?;
        for s in &scenes {
            writeln!(f, "scene,{},{},{:.4},{:.4}", s.n, s.m, s.si_sdr_db, s.si_sdri_db)?;
        }
        for (&(n, m), &mean) in &group_mean_si_sdri {
            writeln!(f, "group_mean,{n},{m},,{mean:.4}")?;
        }
    }
    Ok(EvalSummary { scenes, group_mean_si_sdri })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_error_at_one_percent_energy_gives_twenty_db() {
        // est = ref + noise with noise orthogonal to ref and 1% of its energy.
        let n = 1000usize;
        let reference: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 8.0).sin())
            .collect();
        let ref_energy: f64 = reference.iter().map(|x| x * x).sum();
        // Alternating +/- pattern at Nyquist is orthogonal to a period-8 sine.
        let mut noise: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let dot: f64 = noise.iter().zip(&reference).map(|(a, b)| a * b).sum();
        // Remove any tiny residual projection, then scale to 1% energy.
        for (nv, r) in noise.iter_mut().zip(&reference) {
            *nv -= dot / ref_energy * r;
        }
        let noise_energy: f64 = noise.iter().map(|x| x * x).sum();
        let s = (0.01 * ref_energy / noise_energy).sqrt();
        let est: Vec<f64> = reference.iter().zip(&noise).map(|(r, nz)| r + s * nz).collect();
        let v = si_sdr(&est, &reference).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn scale_invariance() {
        let reference: Vec<f64> = (0..64).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect();
        let est: Vec<f64> = reference.iter().enumerate().map(|(i, r)| r + 0.1 * ((i % 5) as f64 - 2.0)).collect();
        let a = si_sdr(&est, &reference).unwrap();
        let scaled: Vec<f64> = est.iter().map(|x| 3.7 * x).collect();
        let b = si_sdr(&scaled, &reference).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn perfect_estimate_clamps_at_sixty_db() {
        let r = vec![0.4, -0.2, 0.9];
        assert!((si_sdr(&r, &r).unwrap() - 60.0).abs() < 1e-12);
    }

    #[test]
    fn improvement_of_the_mixture_itself_is_zero() {
        let reference = vec![1.0, 0.0, -1.0, 0.5];
        let mixture = vec![0.8, 0.3, -0.6, 0.9];
        let v = si_sdr_improvement(&mixture, &mixture, &reference).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn zero_target_is_rejected() {
        assert!(matches!(
            si_sdr(&[1.0, 2.0], &[0.0, 0.0]),
            Err(FlexioError::InvalidTarget(_))
        ));
    }

    #[test]
    fn pit_si_sdr_picks_the_best_permutation() {
        let a = vec![1.0, 0.0, 0.0, 0.1];
        let b = vec![0.0, 1.0, 0.1, 0.0];
        // Estimates swapped relative to targets.
        let ests = vec![b.clone(), a.clone()];
        let targets = vec![a, b];
        let (mean, perm) = pit_si_sdr(&ests, &targets).unwrap();
        assert_eq!(perm, vec![1, 0]);
        assert!(mean > 10.0);
    }
}
