//! Adam, the per-step training flow, JSON-lines logging and periodic checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{training_loss, Aggregation, LossWeights, ModalityLoss};
use crate::model::checkpoint::{self, TrainingState};
use crate::model::Model;
use crate::param::ParamStore;
use crate::sampler::{SampledStep, Sampler, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// One bias-corrected Adam update; `t` is the 1-based step count.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) -> Result<()> {
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::Contract(format!(
            "adam update over {n} values got grad {}, m {}, v {}",
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::Contract("adam step count starts at 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..n {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        param[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Ok(Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Applies one update to every trainable parameter with a gradient; returns the pre-clip norm.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<f64> {
        if self.m.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match the parameter store".into()));
        }
        let norm = grads
            .param_ids()
            .filter(|&id| store.get(id).trainable)
            .filter_map(|id| grads.param(id))
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let factor = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        for id in 0..store.len() {
            if !store.get(id).trainable {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let scaled: Vec<f64>;
            let g = if factor == 1.0 {
                g
            } else {
                scaled = g.iter().map(|x| x * factor).collect();
                &scaled
            };
            adam_update(store.data_mut(id), g, &mut self.m[id], &mut self.v[id], self.step, &self.cfg)?;
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sampler: SamplerConfig,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub aggregation: Aggregation,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            aggregation: Aggregation::PerModality,
            checkpoint_every: 500,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub modality_losses: Vec<ModalityLoss>,
    pub subset_size: usize,
    pub tokens: usize,
    pub queries: usize,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Forward, loss, backward and Adam update for one sampled scene.
pub fn train_step(model: &mut Model, batch: &SampledStep, adam: &mut AdamState, cfg: &TrainConfig, step: u64) -> Result<StepRecord> {
    let start = Instant::now();
    let q = &batch.queries;
    let tape = Tape::new();
    let (loss, terms, grads) = {
        let b = model.bind(&tape);
        let pred = b.forward(&batch.observations, &q.points, &q.task_ids)?;
        let (loss, terms) = training_loss(&tape, pred, &q.task_ids, &q.targets, model.registry(), &cfg.weights, cfg.aggregation)?;
        if let Some(bad) = terms.iter().find(|t| !t.loss.is_finite()) {
            let name = &model.registry().get(bad.modality)?.name;
            return Err(Error::Numeric(format!("step {step}: non-finite loss in the {name} slice")));
        }
        let grads = tape.backward(loss)?;
        (loss.value().item()?, terms, grads)
    };
    let grad_norm = adam.apply(model.params_mut(), &grads)?;
    drop(tape);
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("step {step}: non-finite gradient norm")));
    }
    Ok(StepRecord {
        step,
        loss,
        modality_losses: terms,
        subset_size: batch.observations.len(),
        tokens: batch.token_count(),
        queries: q.len(),
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Owns the model, optimizer and sampler across steps.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub sampler: Sampler,
    pub cfg: TrainConfig,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.weights.validate()?;
        let adam = AdamState::new(cfg.adam, model.params())?;
        let sampler = Sampler::new(cfg.sampler)?;
        Ok(Self {
            model,
            adam,
            sampler,
            cfg,
            step: 0,
        })
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path, cfg: TrainConfig) -> Result<Self> {
        let (model, state) = checkpoint::load(path, None)?;
        let state = state.ok_or_else(|| Error::Checkpoint(format!("{}: no training state", path.display())))?;
        let mut t = Self::new(model, cfg)?;
        t.adam.step = state.adam_step;
        t.adam.m = state.adam_m;
        t.adam.v = state.adam_v;
        t.sampler = Sampler::restore(t.cfg.sampler, &state.sampler)?;
        t.step = state.step;
        Ok(t)
    }

    pub fn training_state(&self) -> TrainingState {
        TrainingState {
            step: self.step,
            sampler: self.sampler.state(),
            adam_step: self.adam.step,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, Some(&self.training_state()))
    }

    pub fn step(&mut self, train: &[Dataset]) -> Result<StepRecord> {
        let batch = self.sampler.sample_step(train)?;
        let rec = train_step(&mut self.model, &batch, &mut self.adam, &self.cfg, self.step + 1)?;
        self.step += 1;
        Ok(rec)
    }

    /// Runs `steps` more steps, appending one JSON line per step to `log` and
    /// checkpointing into `out_dir` every `checkpoint_every` steps and at the end.
    pub fn run(&mut self, train: &[Dataset], steps: u64, out_dir: Option<&Path>, mut log: Option<&mut dyn Write>) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let rec = self.step(train)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                writeln!(w).map_err(|e| Error::io("<train log>", e))?;
            }
            losses.push(rec.loss);
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                    self.save(&checkpoint_path(dir, Some(self.step)))?;
                    self.save(&checkpoint_path(dir, None))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save(&checkpoint_path(dir, None))?;
        }
        Ok(losses)
    }
}

/// `model-<step>.ckpt`, or `model.ckpt` for the latest.
pub fn checkpoint_path(dir: &Path, step: Option<u64>) -> PathBuf {
    match step {
        Some(s) => dir.join(format!("model-{s:06}.ckpt")),
        None => dir.join("model.ckpt"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter() {
        let cfg = AdamConfig::default();
        let mut p = [0.7, -1.2];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &cfg).unwrap();
        assert_eq!(p, [0.7, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig { lr: 1e-3, ..Default::default() };
        let mut p = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &cfg).unwrap();
        let expect = 1e-3 / (1.0 + 1e-8);
        assert!((p[0] + expect).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn minimizes_a_parabola() {
        let cfg = AdamConfig { lr: 1e-2, ..Default::default() };
        let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
        let mut reached = None;
        for t in 1..=2000 {
            let g = [2.0 * p[0]];
            adam_update(&mut p, &g, &mut m, &mut v, t, &cfg).unwrap();
            if p[0].abs() < 1e-2 && reached.is_none() {
                reached = Some(t);
            }
        }
        assert!(reached.is_some(), "final {}", p[0]);
    }

    #[test]
    fn sign_flip_flips_update() {
        let cfg = AdamConfig::default();
        let g = [0.3, -2.0, 1e-4];
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        adam_update(&mut a, &g, &mut [0.0; 3], &mut [0.0; 3], 1, &cfg).unwrap();
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        adam_update(&mut b, &neg, &mut [0.0; 3], &mut [0.0; 3], 1, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let cfg = AdamConfig::default();
        let r = adam_update(&mut [0.0; 2], &[1.0], &mut [0.0; 2], &mut [0.0; 2], 1, &cfg);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
