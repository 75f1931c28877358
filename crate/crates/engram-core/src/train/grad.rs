//! Exact gradients of the objective losses with respect to memory only.
//!
//! The analytic path chains hand-derived vector-Jacobian products through
//! loss → denoiser → layout/projection → injection. The frozen encoder
//! weights and the base hidden states are constants: rho is computed from
//! pre-injection states and the tri-stream pooled row is built from
//! unedited states, so neither contributes a gradient path.

use ndarray::{Array1, Array2, Array3};

use crate::backbone::{affine_transpose, Topology};
use crate::error::{EngramError, Result};
use crate::memory::{EngramMemory, InjectionConfig, InjectionRule, OverlapMode, StreamMemory};
use crate::pipeline::{Pipeline, StreamConditioning};

use super::loss::{check_objective, forward_loss, ForwardTrace};
use super::tape::tape_loss_and_grads;
use super::{BatchInputs, GradMode, Objective};

/// Gradient of one stream's adapter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamGrads {
    pub d_table: Array2<f64>,
    pub d_scale: Array1<f64>,
}

/// Gradients mirroring [`EngramMemory`]'s parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryGrads {
    pub streams: Vec<StreamGrads>,
}

impl MemoryGrads {
    pub fn zeros_like(memory: &EngramMemory) -> Self {
        Self {
            streams: memory
                .streams
                .iter()
                .map(|sm| StreamGrads {
                    d_table: Array2::zeros((sm.table.num_keys(), sm.table.width())),
                    d_scale: Array1::zeros(sm.scale.width()),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.streams.iter().all(|s| {
            s.d_table.iter().all(|v| v.is_finite()) && s.d_scale.iter().all(|v| v.is_finite())
        })
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for s in &self.streams {
            for &v in s.d_table.iter() {
                sq += v * v;
            }
            for &v in s.d_scale.iter() {
                sq += v * v;
            }
        }
        sq.sqrt()
    }

    pub fn scale_by(&mut self, f: f64) {
        for s in &mut self.streams {
            s.d_table.mapv_inplace(|v| v * f);
            s.d_scale.mapv_inplace(|v| v * f);
        }
    }

    /// Flat layout matching the optimizer's parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.streams {
            out.extend_from_slice(s.d_table.as_slice().expect("standard layout"));
            out.extend_from_slice(s.d_scale.as_slice().expect("standard layout"));
        }
        out
    }
}

/// Loss and adapter gradients for one batch under the selected engine.
pub fn grad_memory(
    pipeline: &Pipeline,
    batch: &BatchInputs,
    noise_seed: u64,
    objective: Objective,
    mode: GradMode,
) -> Result<(f64, MemoryGrads)> {
    check_objective(pipeline, objective)?;
    match mode {
        GradMode::Analytic => {
            let trace = forward_loss(pipeline, batch, noise_seed, objective, true)?;
            if !trace.loss.is_finite() {
                return Err(EngramError::NonFiniteLoss(0));
            }
            let grads = backward_analytic(pipeline, &trace);
            Ok((trace.loss, grads))
        }
        GradMode::ReverseAuto => tape_loss_and_grads(pipeline, batch, noise_seed, objective),
    }
}

fn backward_analytic(pipeline: &Pipeline, trace: &ForwardTrace) -> MemoryGrads {
    let d_cond = denoiser_backward(pipeline, trace);
    let mut grads = MemoryGrads::zeros_like(&pipeline.memory);
    match pipeline.backbone().spec().topology {
        Topology::SingleStream => {
            inject_backward(
                &pipeline.memory.streams[0],
                &pipeline.injection,
                &trace.cond.streams[0],
                &d_cond,
                &mut grads.streams[0],
            );
        }
        Topology::TriStreamLayout => {
            let spec = pipeline.backbone().spec();
            let l_clip = spec.streams[0].max_len;
            let l_t5 = spec.streams[2].max_len;
            let (d_a, d_b) = (spec.streams[0].width, spec.streams[1].width);
            let b_sz = d_cond.dim().0;
            // pooled row (last) and the zero-pad block carry no memory
            // gradient; split the remaining rows back into stream slots
            let mut d_h = [
                Array3::<f64>::zeros((b_sz, l_clip, d_a)),
                Array3::<f64>::zeros((b_sz, l_clip, d_b)),
                Array3::<f64>::zeros((b_sz, l_t5, spec.streams[2].width)),
            ];
            for b in 0..b_sz {
                for l in 0..l_clip {
                    for c in 0..d_a {
                        d_h[0][[b, l, c]] = d_cond[[b, l, c]];
                    }
                    for c in 0..d_b {
                        d_h[1][[b, l, c]] = d_cond[[b, l, d_a + c]];
                    }
                }
                for l in 0..l_t5 {
                    for c in 0..spec.streams[2].width {
                        d_h[2][[b, l, c]] = d_cond[[b, l_clip + l, c]];
                    }
                }
            }
            for (i, dh) in d_h.iter().enumerate() {
                inject_backward(
                    &pipeline.memory.streams[i],
                    &pipeline.injection,
                    &trace.cond.streams[i],
                    dh,
                    &mut grads.streams[i],
                );
            }
        }
        Topology::ProjectedStream => {
            let spec = pipeline.backbone().spec();
            let sc = &spec.streams[0];
            let w = &pipeline
                .backbone()
                .projection_weights()
                .expect("projected topology")
                .w;
            let (b_sz, _, d_model) = d_cond.dim();
            let mut d_h = Array3::<f64>::zeros((b_sz, sc.max_len, sc.width));
            let mut g_row = vec![0.0; d_model];
            let mut back = vec![0.0; sc.width];
            for b in 0..b_sz {
                for l in 0..sc.max_len {
                    for c in 0..d_model {
                        g_row[c] = d_cond[[b, l, c]];
                    }
                    affine_transpose(w, &g_row, &mut back);
                    for c in 0..sc.width {
                        d_h[[b, l, c]] = back[c];
                    }
                }
            }
            inject_backward(
                &pipeline.memory.streams[0],
                &pipeline.injection,
                &trace.cond.streams[0],
                &d_h,
                &mut grads.streams[0],
            );
        }
    }
    grads
}

/// dL/dC through the loss head, the two denoiser blocks, and both pools.
fn denoiser_backward(pipeline: &Pipeline, trace: &ForwardTrace) -> Array3<f64> {
    let bb = pipeline.backbone();
    let spec = bb.spec();
    let dw = bb.denoiser_weights();
    let (b_sz, d_z) = trace.pred.dim();
    let hidden = spec.hidden;
    let d_in = spec.denoiser_input_dim();
    let d_c = spec.cond_width();
    let l = trace.cond.c.dim().1;
    let (_, _, off_mean, off_attn) = bb.input_offsets();
    let inv_n = 1.0 / (b_sz * d_z) as f64;
    let inv_sqrt_d = 1.0 / (d_c as f64).sqrt();

    let mut d_cond = Array3::<f64>::zeros((b_sz, l, d_c));
    let mut dpred = vec![0.0; d_z];
    let mut dv = vec![0.0; hidden];
    let mut dq2 = vec![0.0; hidden];
    let mut du = vec![0.0; hidden];
    let mut dp1 = vec![0.0; hidden];
    let mut dx = vec![0.0; d_in];
    let mut gw = vec![0.0; l];
    for b in 0..b_sz {
        for c in 0..d_z {
            dpred[c] = 2.0 * (trace.pred[[b, c]] - trace.target[[b, c]]) * inv_n;
        }
        affine_transpose(&dw.w3, &dpred, &mut dv);
        for i in 0..hidden {
            let t = trace.den.v[[b, i]];
            dq2[i] = dv[i] * (1.0 - t * t);
        }
        affine_transpose(&dw.w2, &dq2, &mut du);
        for i in 0..hidden {
            let t = trace.den.u[[b, i]];
            dp1[i] = du[i] * (1.0 - t * t);
        }
        affine_transpose(&dw.w1, &dp1, &mut dx);
        let dmean = &dx[off_mean..off_mean + d_c];
        let dattn = &dx[off_attn..off_attn + d_c];

        // mean pool
        let inv_l = 1.0 / l as f64;
        for pos in 0..l {
            for ch in 0..d_c {
                d_cond[[b, pos, ch]] += dmean[ch] * inv_l;
            }
        }
        // attention pool: value path plus softmax score path
        let mut sum_wg = 0.0;
        for pos in 0..l {
            let mut acc = 0.0;
            for ch in 0..d_c {
                acc += trace.cond.c[[b, pos, ch]] * dattn[ch];
            }
            gw[pos] = acc;
            sum_wg += trace.den.attn_w[[b, pos]] * acc;
        }
        for pos in 0..l {
            let w_pos = trace.den.attn_w[[b, pos]];
            let ds = w_pos * (gw[pos] - sum_wg);
            for ch in 0..d_c {
                d_cond[[b, pos, ch]] +=
                    w_pos * dattn[ch] + ds * dw.query[ch] * inv_sqrt_d;
            }
        }
    }
    d_cond
}

/// Accumulate dL/d(e_k, s) from dL/dH-tilde across one stream's matches.
fn inject_backward(
    mem: &StreamMemory,
    inj: &InjectionConfig,
    sc: &StreamConditioning,
    d_h: &Array3<f64>,
    out: &mut StreamGrads,
) {
    let d = mem.table.width();
    let mut g_delta = vec![0.0; d];
    for m in sc.matches.iter() {
        for g in g_delta.iter_mut() {
            *g = 0.0;
        }
        for l in m.start..m.start + m.len {
            let weight = match inj.overlap_mode {
                OverlapMode::Sum => 1.0,
                OverlapMode::Mean => 1.0 / sc.details.cover[[m.batch, l]] as f64,
            };
            for c in 0..d {
                g_delta[c] += weight * d_h[[m.batch, l, c]];
            }
        }
        let e = mem.table.vector(m.key).expect("matched key exists");
        let s = mem.scale.values();
        match inj.rule {
            InjectionRule::Absolute => {
                for c in 0..d {
                    out.d_table[[m.key, c]] += s[c] * g_delta[c];
                    out.d_scale[c] += e[c] * g_delta[c];
                }
            }
            InjectionRule::RelativeNorm => {
                let rho = sc.details.rho[m.batch];
                let mut sq = 0.0;
                for c in 0..d {
                    sq += e[c] * e[c];
                }
                let norm = sq.sqrt();
                let denom = norm.max(inj.norm_epsilon);
                if norm > inj.norm_epsilon {
                    // delta_c = (e_c / ||e||) tanh(s_c) rho: project the
                    // upstream gradient off the radial direction
                    let mut dot = 0.0;
                    let mut g = vec![0.0; d];
                    for c in 0..d {
                        g[c] = g_delta[c] * s[c].tanh() * rho;
                        dot += (e[c] / norm) * g[c];
                    }
                    for c in 0..d {
                        out.d_table[[m.key, c]] += (g[c] - (e[c] / norm) * dot) / norm;
                    }
                } else {
                    // epsilon branch: constant denominator
                    for c in 0..d {
                        out.d_table[[m.key, c]] += g_delta[c] * s[c].tanh() * rho / denom;
                    }
                }
                for c in 0..d {
                    let th = s[c].tanh();
                    out.d_scale[c] += g_delta[c] * (e[c] / denom) * (1.0 - th * th) * rho;
                }
            }
        }
    }
}
