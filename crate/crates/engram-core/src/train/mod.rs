//! Adapter-only training: only concept vectors and scales receive updates.
//!
//! Training is single-threaded with every stochastic draw derived from the
//! run seed, so identical configs produce bitwise-identical loss curves.
//! Parameters are snapped to f32-representable values after every step,
//! keeping the in-memory state exactly equal to its checkpoint image.

mod checkpoint;
pub(crate) mod grad;
mod loss;
mod tape;

pub use checkpoint::{
    load_adapter, save_adapter, AdapterCheckpoint, CheckpointManifest, StreamManifest,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use grad::{grad_memory, MemoryGrads, StreamGrads};
pub use loss::{loss_ddpm, loss_flow};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::LatentBatch;
use crate::error::{EngramError, Result};
use crate::memory::{EngramMemory, InjectionConfig};
use crate::pipeline::Pipeline;
use crate::util::{component_seed, snap_f32};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ddpm,
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    ReverseAuto,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr_embed: f64,
    pub lr_scale: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub injection: InjectionConfig,
    pub grad_mode: GradMode,
    /// Global-norm clip; off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Ddpm,
            lr_embed: 1e-3,
            lr_scale: 1e-4,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            injection: InjectionConfig::default(),
            grad_mode: GradMode::Analytic,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_embed > 0.0 && self.lr_scale > 0.0) {
            return Err(EngramError::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        if self.lr_scale > self.lr_embed {
            return Err(EngramError::InvalidConfig(
                "lr_scale must not exceed lr_embed".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(EngramError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(EngramError::InvalidConfig("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One training batch: prompts with their clean latents, row-aligned.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub prompts: Vec<String>,
    pub z0: LatentBatch,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Parameter norm of the concept-vector group after the step.
    pub embed_norm: f64,
    /// Parameter norm of the scale group after the step.
    pub scale_norm: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moment state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update with a per-parameter learning rate.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lrs: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        assert_eq!(lrs.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lrs[i] * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Flatten order: per stream, concept table row-major then scale vector.
fn flatten_params(memory: &EngramMemory) -> Vec<f64> {
    let mut out = Vec::with_capacity(memory.num_params());
    for sm in &memory.streams {
        out.extend_from_slice(sm.table.vectors().as_slice().expect("standard layout"));
        out.extend_from_slice(sm.scale.values().as_slice().expect("standard layout"));
    }
    out
}

/// Inverse of [`flatten_params`]; snaps every written value to f32.
fn scatter_params(memory: &mut EngramMemory, flat: &[f64]) {
    let mut i = 0;
    for sm in &mut memory.streams {
        for v in sm.table.vectors_mut().iter_mut() {
            *v = snap_f32(flat[i]);
            i += 1;
        }
        for v in sm.scale.values_mut().iter_mut() {
            *v = snap_f32(flat[i]);
            i += 1;
        }
    }
    assert_eq!(i, flat.len());
}

fn per_param_lrs(memory: &EngramMemory, cfg: &TrainConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(memory.num_params());
    for sm in &memory.streams {
        out.extend(std::iter::repeat_n(
            cfg.lr_embed,
            sm.table.num_keys() * sm.table.width(),
        ));
        out.extend(std::iter::repeat_n(cfg.lr_scale, sm.scale.width()));
    }
    out
}

fn group_norms(memory: &EngramMemory) -> (f64, f64) {
    let mut embed_sq = 0.0;
    let mut scale_sq = 0.0;
    for sm in &memory.streams {
        for &v in sm.table.vectors().iter() {
            embed_sq += v * v;
        }
        for &v in sm.scale.values().iter() {
            scale_sq += v * v;
        }
    }
    (embed_sq.sqrt(), scale_sq.sqrt())
}

/// One optimization step: gradients, optional clip, grouped Adam update.
/// Non-finite losses or gradients abort before touching any parameter.
pub fn train_step(
    pipeline: &mut Pipeline,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    batch: &BatchInputs,
) -> Result<TrainRecord> {
    let step = opt.step as usize;
    let noise_seed = component_seed(cfg.seed, &format!("noise.{step}"));
    let (loss, mut grads) = grad_memory(
        pipeline,
        batch,
        noise_seed,
        cfg.objective,
        cfg.grad_mode,
    )
    .map_err(|e| match e {
        EngramError::NonFiniteLoss(_) => EngramError::NonFiniteLoss(step),
        EngramError::NonFiniteGradient(_) => EngramError::NonFiniteGradient(step),
        other => other,
    })?;
    if !grads.all_finite() {
        return Err(EngramError::NonFiniteGradient(step));
    }
    let grad_norm = grads.global_norm();
    if let Some(clip) = cfg.clip_norm {
        if grad_norm > clip {
            grads.scale_by(clip / grad_norm);
        }
    }
    let mut params = flatten_params(&pipeline.memory);
    let flat_grads = grads.flatten();
    let lrs = per_param_lrs(&pipeline.memory, cfg);
    opt.update(&mut params, &flat_grads, &lrs);
    scatter_params(&mut pipeline.memory, &params);
    let (embed_norm, scale_norm) = group_norms(&pipeline.memory);
    Ok(TrainRecord {
        step,
        loss,
        grad_norm,
        embed_norm,
        scale_norm,
    })
}

/// Full training loop over a prompt/latent dataset with seeded batch
/// sampling (uniform with replacement).
pub fn run_training(
    pipeline: &mut Pipeline,
    data: &[(String, Vec<f64>)],
    cfg: &TrainConfig,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(EngramError::InvalidConfig("empty training dataset".into()));
    }
    let d_z = pipeline.backbone().spec().latent_dim;
    for (prompt, z0) in data {
        if z0.len() != d_z {
            return Err(EngramError::InvalidConfig(format!(
                "latent width {} for prompt {prompt:?}, expected {d_z}",
                z0.len()
            )));
        }
    }
    pipeline.injection = cfg.injection;
    let mut opt = AdamState::new(pipeline.memory.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(component_seed(cfg.seed, "batch"));
    let mut records = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idxs: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let prompts: Vec<String> = idxs.iter().map(|&i| data[i].0.clone()).collect();
        let mut z0 = Array2::<f64>::zeros((cfg.batch_size, d_z));
        for (row, &i) in idxs.iter().enumerate() {
            for c in 0..d_z {
                z0[[row, c]] = data[i].1[c];
            }
        }
        records.push(train_step(pipeline, &mut opt, cfg, &BatchInputs { prompts, z0 })?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_converges_on_quadratic() {
        // loss (p - 3)^2, gradient 2(p - 3)
        let mut p = vec![2.0];
        let mut opt = AdamState::new(1);
        for _ in 0..500 {
            let g = vec![2.0 * (p[0] - 3.0)];
            opt.update(&mut p, &g, &[1e-2]);
        }
        assert!((p[0] - 3.0).abs() < 1e-2, "p = {}", p[0]);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![0.7, -1.2];
        let before = p.clone();
        let mut opt = AdamState::new(2);
        for _ in 0..10 {
            opt.update(&mut p, &[0.0, 0.0], &[1e-2, 1e-2]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lr_scale = cfg.lr_embed * 2.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.batch_size = 1;
        cfg.lr_embed = -1.0;
        assert!(cfg.validate().is_err());
    }
}
