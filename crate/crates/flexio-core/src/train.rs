//! AdamW training loop with linear warmup, plateau-halving learning rate,
//! PIT loss, CSV logging, and per-epoch/best checkpoints.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Arr, Graph};
use crate::checkpoint;
use crate::error::{FlexioError, Result};
use crate::loss::pit_loss;
use crate::model::FlexioModel;
use crate::params::{Bind, ParamSet};
use crate::stft::{Waveform, SAMPLE_RATE};
use crate::synth::Scene;

fn d_seed() -> u64 { 0 }
fn d_steps_per_epoch() -> usize { 100 }
fn d_max_epochs() -> usize { 20 }
fn d_warmup_steps() -> usize { 500 }
fn d_peak_lr() -> f64 { 1e-3 }
fn d_weight_decay() -> f64 { 0.01 }
fn d_plateau_patience() -> usize { 5 }
fn d_halt_patience() -> usize { 10 }
fn d_crop_seconds() -> f64 { 4.0 }
fn d_grad_clip() -> f64 { 5.0 }

/// Optimization hyperparameters; every field has a sensible default so run
/// configs only need to spell out overrides.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_steps_per_epoch")]
    pub steps_per_epoch: usize,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    /// Linear warmup from 0 to `peak_lr` over this many steps.
    #[serde(default = "d_warmup_steps")]
    pub warmup_steps: usize,
    #[serde(default = "d_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    /// Halve the learning rate after this many epochs without a new best
    /// validation loss.
    #[serde(default = "d_plateau_patience")]
    pub plateau_patience: usize,
    /// Stop after this many epochs without a new best validation loss.
    #[serde(default = "d_halt_patience")]
    pub halt_patience: usize,
    /// Random-crop length drawn from each scene per step.
    #[serde(default = "d_crop_seconds")]
    pub crop_seconds: f64,
    /// Global gradient-norm clip.
    #[serde(default = "d_grad_clip")]
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

/// Warmup then constant, scaled down by plateau halvings.
pub fn lr_at(cfg: &TrainConfig, step: usize, halvings: u32) -> f64 {
    let warm = if cfg.warmup_steps == 0 {
        1.0
    } else {
        ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    };
    cfg.peak_lr * warm * 0.5f64.powi(halvings as i32)
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    m: IndexMap<String, Arr>,
    v: IndexMap<String, Arr>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Arr>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params.tensors.get_mut(name).expect("gradient for unknown parameter");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(p.raw_dim()));
            azip_update(p, g, m, v, self.beta1, self.beta2, bc1, bc2, self.eps, lr, self.weight_decay);
        }
        // Keep weights exactly f32-representable so a checkpoint written at
        // any point round-trips bit-exactly.
        params.quantize_f32();
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    p: &mut Arr,
    g: &Arr,
    m: &mut Arr,
    v: &mut Arr,
    b1: f64,
    b2: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
    lr: f64,
    wd: f64,
) {
    ndarray::Zip::from(p)
        .and(g)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * (mh / (vh.sqrt() + eps) + wd * *p);
        });
}

/// External hooks and data for one training run.
pub struct TrainSession<'a> {
    pub train_scenes: &'a [Scene],
    pub val_scenes: &'a [Scene],
    /// Checkpoint root; per-epoch dirs plus `best/` are written underneath.
    pub out_dir: Option<&'a Path>,
    /// CSV log with columns step,epoch,lr,train_loss,val_loss.
    pub log_path: Option<&'a Path>,
    /// Checked every `check_every` steps; return true to stop early.
    #[allow(clippy::type_complexity)]
    pub stop_when: Option<Box<dyn FnMut(usize, &FlexioModel) -> bool + 'a>>,
    pub check_every: usize,
}

impl<'a> TrainSession<'a> {
    pub fn new(train_scenes: &'a [Scene], val_scenes: &'a [Scene]) -> Self {
        TrainSession {
            train_scenes,
            val_scenes,
            out_dir: None,
            log_path: None,
            stop_when: None,
            check_every: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn crop_scene(scene: &Scene, crop_len: usize, rng: &mut impl Rng) -> (Waveform, Vec<Vec<f64>>) {
    let len = scene.mixture.len();
    let take = crop_len.min(len);
    let start = if len > take { rng.gen_range(0..=len - take) } else { 0 };
    let mix = Waveform::new(
        scene.mixture.samples.slice(s![.., start..start + take]).to_owned(),
        scene.mixture.sample_rate,
    )
    .expect("crop produced invalid audio");
    let targets = scene
        .targets
        .iter()
        .map(|t| t.samples.slice(s![0, start..start + take]).to_vec())
        .collect();
    (mix, targets)
}

/// Mean PIT loss over full validation scenes (no gradients).
pub fn validation_loss(model: &FlexioModel, scenes: &[Scene]) -> Result<f64> {
    let mut total = 0.0;
    for scene in scenes {
        let n = scene.targets.len();
        let sep = model.separate(&scene.mixture, n)?;
        let ests: Vec<Vec<f64>> = (0..n).map(|i| sep.waveforms.row(i).to_vec()).collect();
        let targets: Vec<Vec<f64>> = scene
            .targets
            .iter()
            .map(|t| t.samples.row(0).to_vec())
            .collect();
        let (l, _) = crate::loss::pit_assign(&ests, &targets)?;
        total += l;
    }
    Ok(total / scenes.len() as f64)
}

/// One optimization step on a random crop of a random scene.
/// Returns the train loss.
fn train_step(
    model: &mut FlexioModel,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    scene: &Scene,
    crop_len: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (mix, targets) = crop_scene(scene, crop_len, rng);
    let mut g = Graph::new();
    let bind = Bind::new(&mut g, &model.params);
    let outputs = model.forward(&mut g, &bind, &mix, targets.len())?;
    let ests: Vec<_> = outputs.iter().map(|(w, _, _)| *w).collect();
    let (loss, _) = pit_loss(&mut g, &ests, &targets)?;
    let loss_value = g.value(loss)[[0]];
    let mut node_grads = g.backward(loss);
    let mut grads = bind.grads(&mut node_grads);
    let norm: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(FlexioError::TrainingAborted(format!(
            "non-finite gradient norm (train loss {loss_value})"
        )));
    }
    if norm > cfg.grad_clip {
        let s = cfg.grad_clip / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    opt.step(&mut model.params, &grads, lr);
    Ok(loss_value)
}

/// Full training loop. The model is updated in place; the best-validation
/// weights are also left in the model when validation scenes are provided.
pub fn train(
    model: &mut FlexioModel,
    cfg: &TrainConfig,
    mut session: TrainSession<'_>,
) -> Result<TrainOutcome> {
    if session.train_scenes.is_empty() {
        return Err(FlexioError::DataError("no training scenes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let crop_len = ((cfg.crop_seconds * SAMPLE_RATE as f64) as usize).max(1);
    let mut log = match session.log_path {
        Some(p) => {
            let mut f = File::create(p)?;
            writeln!(f, "step,epoch,lr,train_loss,val_loss")?;
            Some(f)
        }
        None => None,
    };

    let mut step = 0usize;
    let mut halvings = 0u32;
    let mut best_val = f64::INFINITY;
    let mut epochs_since_best = 0usize;
    let mut best_params: Option<ParamSet> = None;
    let mut final_train_loss = f64::NAN;
    let mut stopped_early = false;
    let mut epochs_done = 0usize;

    'outer: for epoch in 0..cfg.max_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let scene = &session.train_scenes[rng.gen_range(0..session.train_scenes.len())];
            let lr = lr_at(cfg, step, halvings);
            let loss = train_step(model, &mut opt, cfg, scene, crop_len, lr, &mut rng)
                .map_err(|e| match e {
                    FlexioError::TrainingAborted(msg) => FlexioError::TrainingAborted(format!(
                        "step {step}, seed {}: {msg}",
                        cfg.seed
                    )),
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(FlexioError::TrainingAborted(format!(
                    "non-finite loss at step {step}, seed {}",
                    cfg.seed
                )));
            }
            epoch_loss += loss;
            final_train_loss = loss;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{step},{epoch},{lr:.8},{loss:.6},")?;
            }
            step += 1;
            if step % session.check_every == 0 {
                if let Some(stop) = session.stop_when.as_mut() {
                    if stop(step, model) {
                        stopped_early = true;
                        epochs_done = epoch + 1;
                        break 'outer;
                    }
                }
            }
        }
        epochs_done = epoch + 1;
        let train_mean = epoch_loss / cfg.steps_per_epoch as f64;

        let val = if session.val_scenes.is_empty() {
            train_mean
        } else {
            validation_loss(model, session.val_scenes)?
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{step},{epoch},{:.8},{train_mean:.6},{val:.6}", lr_at(cfg, step, halvings))?;
        }
        if let Some(dir) = session.out_dir {
            checkpoint::save(model, &dir.join(format!("epoch_{epoch:04}")))?;
        }
        if val < best_val {
            best_val = val;
            epochs_since_best = 0;
            best_params = Some(model.params.clone());
            if let Some(dir) = session.out_dir {
                checkpoint::save(model, &dir.join("best"))?;
            }
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.halt_patience {
                break;
            }
            if epochs_since_best % cfg.plateau_patience == 0 {
                halvings += 1;
            }
        }
    }

    if !stopped_early {
        if let Some(p) = best_params {
            model.params = p;
        }
    }
    Ok(TrainOutcome {
        steps: step,
        epochs: epochs_done,
        final_train_loss,
        best_val_loss: best_val,
        stopped_early,
    })
}
