//! Noising schedules for the two training objectives.
//!
//! DDPM uses a linear beta schedule with exact cumulative-product
//! alpha-bars; rectified flow uses straight-line interpolation between the
//! clean latent and noise with a constant velocity target.

use serde::{Deserialize, Serialize};

use crate::backbone::LatentBatch;
use crate::error::{EngramError, Result};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;
pub const DEFAULT_T_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmSchedule {
    t_steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DdpmSchedule {
    /// Linear beta schedule; alpha-bars are running products of (1 - beta).
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(EngramError::InvalidSchedule("t_steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(EngramError::InvalidSchedule(format!(
                "beta range ({beta_start}, {beta_end}) outside (0, 1)"
            )));
        }
        let mut betas = Vec::with_capacity(t_steps);
        if t_steps == 1 {
            betas.push(beta_start);
        } else {
            let step = (beta_end - beta_start) / (t_steps - 1) as f64;
            for t in 0..t_steps {
                betas.push(beta_start + step * t as f64);
            }
        }
        let mut alpha_bars = Vec::with_capacity(t_steps);
        let mut prod = 1.0;
        for &beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        Ok(Self {
            t_steps,
            betas,
            alpha_bars,
        })
    }

    /// The conventional latent-diffusion default: 1e-4 to 2e-2 over 1000.
    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default range is valid")
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.betas
            .get(t)
            .copied()
            .ok_or(EngramError::TimestepOutOfRange {
                t,
                len: self.t_steps,
            })
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(EngramError::TimestepOutOfRange {
                t,
                len: self.t_steps,
            })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Forward noising: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, per sample.
pub fn ddpm_add_noise(
    sched: &DdpmSchedule,
    z0: &LatentBatch,
    eps: &LatentBatch,
    t: &[usize],
) -> Result<LatentBatch> {
    let (b_sz, d_z) = z0.dim();
    if eps.dim() != (b_sz, d_z) {
        return Err(EngramError::ShapeMismatch(format!(
            "eps shape {:?}, z0 shape {:?}",
            eps.dim(),
            z0.dim()
        )));
    }
    if t.len() != b_sz {
        return Err(EngramError::ShapeMismatch(format!(
            "t has {} entries for batch {b_sz}",
            t.len()
        )));
    }
    let mut z_t = LatentBatch::zeros((b_sz, d_z));
    for b in 0..b_sz {
        let abar = sched.alpha_bar(t[b])?;
        let signal = abar.sqrt();
        let noise = (1.0 - abar).sqrt();
        for c in 0..d_z {
            z_t[[b, c]] = signal * z0[[b, c]] + noise * eps[[b, c]];
        }
    }
    Ok(z_t)
}

/// Rectified-flow interpolation: z_t = (1 - t) z0 + t eps, velocity target
/// eps - z0 (independent of t).
pub fn flow_interpolate(
    z0: &LatentBatch,
    eps: &LatentBatch,
    t: &[f64],
) -> Result<(LatentBatch, LatentBatch)> {
    let (b_sz, d_z) = z0.dim();
    if eps.dim() != (b_sz, d_z) {
        return Err(EngramError::ShapeMismatch(format!(
            "eps shape {:?}, z0 shape {:?}",
            eps.dim(),
            z0.dim()
        )));
    }
    if t.len() != b_sz {
        return Err(EngramError::ShapeMismatch(format!(
            "t has {} entries for batch {b_sz}",
            t.len()
        )));
    }
    debug_assert!(t.iter().all(|&v| (0.0..=1.0).contains(&v)));
    let mut z_t = LatentBatch::zeros((b_sz, d_z));
    let mut target = LatentBatch::zeros((b_sz, d_z));
    for b in 0..b_sz {
        for c in 0..d_z {
            z_t[[b, c]] = (1.0 - t[b]) * z0[[b, c]] + t[b] * eps[[b, c]];
            target[[b, c]] = eps[[b, c]] - z0[[b, c]];
        }
    }
    Ok((z_t, target))
}
