//! Objective losses over the frozen pipeline with injected memory.
//!
//! Noise and timesteps are drawn from the per-call seed in a fixed order
//! (timesteps first, then noise row-major), so a loss value is a pure
//! function of (pipeline state, batch, seed).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{denoise_with_trace, DenoiseTrace, LatentBatch, Topology};
use crate::error::{EngramError, Result};
use crate::pipeline::{ConditioningOutput, Pipeline};
use crate::schedule::{ddpm_add_noise, flow_interpolate};

use super::{BatchInputs, Objective};

/// Everything the backward pass needs from one loss evaluation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    pub cond: ConditioningOutput,
    /// Denoiser time inputs (integer steps as reals for DDPM).
    pub t: Vec<f64>,
    pub z_t: LatentBatch,
    pub target: LatentBatch,
    pub pred: LatentBatch,
    pub den: DenoiseTrace,
    pub loss: f64,
}

pub(crate) fn check_objective(pipeline: &Pipeline, objective: Objective) -> Result<()> {
    let topo = pipeline.backbone().spec().topology;
    let ok = match objective {
        Objective::Ddpm => topo == Topology::SingleStream,
        Objective::Flow => matches!(
            topo,
            Topology::TriStreamLayout | Topology::ProjectedStream
        ),
    };
    if ok {
        Ok(())
    } else {
        Err(EngramError::TopologyMismatch {
            expected: match objective {
                Objective::Ddpm => "single_stream".into(),
                Objective::Flow => "tri_stream_layout or projected_stream".into(),
            },
            got: format!("{topo:?}"),
        })
    }
}

/// Seeded timesteps and noise: uniform integer steps for DDPM, uniform
/// reals in [0, 1) for flow; then one standard normal per latent element.
pub(crate) fn draw_time_and_eps(
    objective: Objective,
    t_steps: usize,
    b_sz: usize,
    d_z: usize,
    seed: u64,
) -> (Vec<f64>, Vec<usize>, LatentBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t_den = Vec::with_capacity(b_sz);
    let mut t_idx = Vec::new();
    match objective {
        Objective::Ddpm => {
            for _ in 0..b_sz {
                let t = rng.random_range(0..t_steps);
                t_idx.push(t);
                t_den.push(t as f64);
            }
        }
        Objective::Flow => {
            for _ in 0..b_sz {
                t_den.push(rng.random_range(0.0..1.0));
            }
        }
    }
    let mut eps = LatentBatch::zeros((b_sz, d_z));
    for b in 0..b_sz {
        for c in 0..d_z {
            eps[[b, c]] = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
    }
    (t_den, t_idx, eps)
}

fn validate_batch(pipeline: &Pipeline, batch: &BatchInputs) -> Result<()> {
    let d_z = pipeline.backbone().spec().latent_dim;
    let (b_sz, got_d) = batch.z0.dim();
    if got_d != d_z {
        return Err(EngramError::ShapeMismatch(format!(
            "z0 width {got_d}, expected {d_z}"
        )));
    }
    if batch.prompts.len() != b_sz {
        return Err(EngramError::ShapeMismatch(format!(
            "{} prompts for batch of {b_sz}",
            batch.prompts.len()
        )));
    }
    if b_sz == 0 {
        return Err(EngramError::ShapeMismatch("empty batch".into()));
    }
    Ok(())
}

/// Forward pass under either objective, keeping the trace.
pub(crate) fn forward_loss(
    pipeline: &Pipeline,
    batch: &BatchInputs,
    noise_seed: u64,
    objective: Objective,
    use_memory: bool,
) -> Result<ForwardTrace> {
    validate_batch(pipeline, batch)?;
    let (b_sz, d_z) = batch.z0.dim();
    let t_steps = pipeline.schedule.t_steps();
    let (t_den, t_idx, eps) = draw_time_and_eps(objective, t_steps, b_sz, d_z, noise_seed);
    let (z_t, target) = match objective {
        Objective::Ddpm => {
            let z_t = ddpm_add_noise(&pipeline.schedule, &batch.z0, &eps, &t_idx)?;
            (z_t, eps)
        }
        Objective::Flow => flow_interpolate(&batch.z0, &eps, &t_den)?,
    };
    let cond = pipeline.conditioning(&batch.prompts, use_memory)?;
    let (pred, den) = denoise_with_trace(pipeline.backbone(), &z_t, &t_den, &cond.c)?;
    let mut acc = 0.0;
    for b in 0..b_sz {
        for c in 0..d_z {
            let d = pred[[b, c]] - target[[b, c]];
            acc += d * d;
        }
    }
    let loss = acc / (b_sz * d_z) as f64;
    Ok(ForwardTrace {
        cond,
        t: t_den,
        z_t,
        target,
        pred,
        den,
        loss,
    })
}

/// DDPM noise-prediction loss; single-stream topology only.
pub fn loss_ddpm(pipeline: &Pipeline, batch: &BatchInputs, noise_seed: u64) -> Result<f64> {
    check_objective(pipeline, Objective::Ddpm)?;
    forward_loss(pipeline, batch, noise_seed, Objective::Ddpm, true).map(|t| t.loss)
}

/// Rectified-flow velocity loss; layout topologies only.
pub fn loss_flow(pipeline: &Pipeline, batch: &BatchInputs, noise_seed: u64) -> Result<f64> {
    check_objective(pipeline, Objective::Flow)?;
    forward_loss(pipeline, batch, noise_seed, Objective::Flow, true).map(|t| t.loss)
}

#[cfg(test)]
mod tests {
    use super::super::grad::tests::{build_pipeline, make_batch};
    use super::super::GradMode;
    use super::*;
    use crate::memory::{InjectionRule, OverlapMode};
    use crate::registry::match_spans;
    use crate::tokenizer::PAD_ID;
    use crate::backbone::Site;
    use ndarray::{Array2, Array3};

    /// y = W x + b with reversed accumulation, so the oracle shares no
    /// arithmetic ordering with the library affine.
    fn affine_alt(w: &Array2<f64>, bias: &ndarray::Array1<f64>, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = w.dim();
        (0..rows)
            .map(|o| {
                let mut acc = 0.0;
                for i in (0..cols).rev() {
                    acc += w[[o, i]] * x[i];
                }
                acc + bias[o]
            })
            .collect()
    }

    /// Straight-line reimplementation of the full forward pass.
    fn oracle_loss(p: &Pipeline, batch: &BatchInputs, seed: u64, objective: Objective) -> f64 {
        let spec = p.backbone().spec();
        let (b_sz, d_z) = batch.z0.dim();
        let (t_den, t_idx, eps) =
            draw_time_and_eps(objective, p.schedule.t_steps(), b_sz, d_z, seed);
        let mut z_t = Array2::<f64>::zeros((b_sz, d_z));
        let mut target = Array2::<f64>::zeros((b_sz, d_z));
        for b in 0..b_sz {
            match objective {
                Objective::Ddpm => {
                    let ab = p.schedule.alpha_bar(t_idx[b]).unwrap();
                    for c in 0..d_z {
                        z_t[[b, c]] = ab.sqrt() * batch.z0[[b, c]] + (1.0 - ab).sqrt() * eps[[b, c]];
                        target[[b, c]] = eps[[b, c]];
                    }
                }
                Objective::Flow => {
                    let t = t_den[b];
                    for c in 0..d_z {
                        z_t[[b, c]] = (1.0 - t) * batch.z0[[b, c]] + t * eps[[b, c]];
                        target[[b, c]] = eps[[b, c]] - batch.z0[[b, c]];
                    }
                }
            }
        }

        // per-stream base states, then injected states
        let mut h_base = Vec::new();
        let mut h_inj = Vec::new();
        for (si, sc) in spec.streams.iter().enumerate() {
            let tok = p.tokenizer(si);
            let sw = p.backbone().stream_weights(&sc.stream_id).unwrap();
            let mem = &p.memory.streams[si];
            let seqs: Vec<_> = batch
                .prompts
                .iter()
                .map(|pr| tok.encode(pr).truncated(sc.max_len))
                .collect();
            let mut hb = Array3::<f64>::zeros((b_sz, sc.max_len, sc.width));
            for b in 0..b_sz {
                let ids = seqs[b].as_slice();
                for l in 0..sc.max_len {
                    let id = if l < ids.len() {
                        ids[l] as usize
                    } else {
                        PAD_ID as usize
                    };
                    let x: Vec<f64> = (0..sc.width)
                        .map(|c| sw.tok_emb[[id, c]] + sw.pos_emb[[l, c]])
                        .collect();
                    let u: Vec<f64> = affine_alt(&sw.a1, &sw.c1, &x)
                        .into_iter()
                        .map(f64::tanh)
                        .collect();
                    let row: Vec<f64> = match sc.site {
                        Site::Penultimate => u,
                        Site::Final => affine_alt(&sw.a2, &sw.c2, &u)
                            .into_iter()
                            .map(f64::tanh)
                            .collect(),
                    };
                    for c in 0..sc.width {
                        hb[[b, l, c]] = row[c];
                    }
                }
            }
            let ms = match_spans(&mem.registry, &seqs);
            let rho: Vec<f64> = (0..b_sz)
                .map(|b| {
                    let mut acc = 0.0;
                    for l in (0..sc.max_len).rev() {
                        let mut sq = 0.0;
                        for c in (0..sc.width).rev() {
                            sq += hb[[b, l, c]] * hb[[b, l, c]];
                        }
                        acc += sq.sqrt();
                    }
                    acc / sc.max_len as f64
                })
                .collect();
            let mut delta = Array3::<f64>::zeros((b_sz, sc.max_len, sc.width));
            let mut cover = Array2::<u32>::zeros((b_sz, sc.max_len));
            for m in ms.iter() {
                let e = mem.table.vector(m.key).unwrap();
                let s = mem.scale.values();
                let r: Vec<f64> = match p.injection.rule {
                    InjectionRule::Absolute => (0..sc.width).map(|c| e[c] * s[c]).collect(),
                    InjectionRule::RelativeNorm => {
                        let mut sq = 0.0;
                        for c in (0..sc.width).rev() {
                            sq += e[c] * e[c];
                        }
                        let norm = sq.sqrt();
                        let denom = if norm < p.injection.norm_epsilon {
                            p.injection.norm_epsilon
                        } else {
                            norm
                        };
                        (0..sc.width)
                            .map(|c| e[c] / denom * s[c].tanh() * rho[m.batch])
                            .collect()
                    }
                };
                for l in m.start..m.start + m.len {
                    cover[[m.batch, l]] += 1;
                    for c in 0..sc.width {
                        delta[[m.batch, l, c]] += r[c];
                    }
                }
            }
            let mut hi = hb.clone();
            for b in 0..b_sz {
                for l in 0..sc.max_len {
                    if cover[[b, l]] > 0 {
                        let div = match p.injection.overlap_mode {
                            OverlapMode::Sum => 1.0,
                            OverlapMode::Mean => 1.0 / cover[[b, l]] as f64,
                        };
                        for c in 0..sc.width {
                            hi[[b, l, c]] += delta[[b, l, c]] * div;
                        }
                    }
                }
            }
            h_base.push(hb);
            h_inj.push(hi);
        }

        // assemble conditioning
        let cond: Array3<f64> = match spec.topology {
            Topology::SingleStream => h_inj[0].clone(),
            Topology::TriStreamLayout => {
                let l_clip = spec.streams[0].max_len;
                let l_t5 = spec.streams[2].max_len;
                let (d_a, d_b) = (spec.streams[0].width, spec.streams[1].width);
                let d_wide = spec.streams[2].width;
                let rows = l_clip + l_t5 + 1;
                let mut c = Array3::<f64>::zeros((b_sz, rows, d_wide));
                for b in 0..b_sz {
                    for l in 0..l_clip {
                        for ch in 0..d_a {
                            c[[b, l, ch]] = h_inj[0][[b, l, ch]];
                        }
                        for ch in 0..d_b {
                            c[[b, l, d_a + ch]] = h_inj[1][[b, l, ch]];
                        }
                    }
                    for l in 0..l_t5 {
                        for ch in 0..d_wide {
                            c[[b, l_clip + l, ch]] = h_inj[2][[b, l, ch]];
                        }
                    }
                    for (off, (grid, d)) in
                        [(0usize, (&h_base[0], d_a)), (d_a, (&h_base[1], d_b))]
                    {
                        for ch in 0..d {
                            let mut acc = 0.0;
                            for l in (0..l_clip).rev() {
                                acc += grid[[b, l, ch]];
                            }
                            c[[b, rows - 1, off + ch]] = acc / l_clip as f64;
                        }
                    }
                }
                c
            }
            Topology::ProjectedStream => {
                let proj = p.backbone().projection_weights().unwrap();
                let l_pad = spec.proj_len.unwrap();
                let l_m = spec.streams[0].max_len;
                let d_model = proj.w.nrows();
                let mut c = Array3::<f64>::zeros((b_sz, l_pad, d_model));
                for b in 0..b_sz {
                    for l in 0..l_pad {
                        let row = if l < l_m {
                            let x: Vec<f64> =
                                (0..spec.streams[0].width).map(|ch| h_inj[0][[b, l, ch]]).collect();
                            affine_alt(&proj.w, &proj.b, &x)
                        } else {
                            proj.b.iter().copied().collect()
                        };
                        for ch in 0..d_model {
                            c[[b, l, ch]] = row[ch];
                        }
                    }
                }
                c
            }
        };

        // denoiser and loss
        let dw = p.backbone().denoiser_weights();
        let d_c = spec.cond_width();
        let rows = cond.dim().1;
        let mut acc_loss = 0.0;
        for b in (0..b_sz).rev() {
            let mut x = Vec::new();
            for c in 0..d_z {
                x.push(z_t[[b, c]]);
            }
            let pairs = crate::backbone::TEMB_DIM / 2;
            for i in 0..pairs {
                let omega = 1000f64.powf(-(i as f64) / (pairs as f64 - 1.0));
                x.push((t_den[b] * omega).sin());
                x.push((t_den[b] * omega).cos());
            }
            for ch in 0..d_c {
                let mut acc = 0.0;
                for l in (0..rows).rev() {
                    acc += cond[[b, l, ch]];
                }
                x.push(acc / rows as f64);
            }
            let scores: Vec<f64> = (0..rows)
                .map(|l| {
                    let mut acc = 0.0;
                    for ch in (0..d_c).rev() {
                        acc += cond[[b, l, ch]] * dw.query[ch];
                    }
                    acc / (d_c as f64).sqrt()
                })
                .collect();
            let max_s = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max_s).exp()).collect();
            let z_norm: f64 = exps.iter().rev().sum();
            for ch in 0..d_c {
                let mut acc = 0.0;
                for l in (0..rows).rev() {
                    acc += exps[l] / z_norm * cond[[b, l, ch]];
                }
                x.push(acc);
            }
            let u: Vec<f64> = affine_alt(&dw.w1, &dw.b1, &x)
                .into_iter()
                .map(f64::tanh)
                .collect();
            let v: Vec<f64> = affine_alt(&dw.w2, &dw.b2, &u)
                .into_iter()
                .map(f64::tanh)
                .collect();
            let pred = affine_alt(&dw.w3, &dw.b3, &v);
            for c in (0..d_z).rev() {
                let d = pred[c] - target[[b, c]];
                acc_loss += d * d;
            }
        }
        acc_loss / (b_sz * d_z) as f64
    }

    #[test]
    fn losses_match_duplicate_forward_oracle() {
        let cases = [
            (Topology::SingleStream, InjectionRule::RelativeNorm, OverlapMode::Sum),
            (Topology::SingleStream, InjectionRule::Absolute, OverlapMode::Mean),
            (Topology::TriStreamLayout, InjectionRule::RelativeNorm, OverlapMode::Mean),
            (Topology::ProjectedStream, InjectionRule::Absolute, OverlapMode::Sum),
        ];
        for (i, &(topo, rule, overlap)) in cases.iter().enumerate() {
            let p = build_pipeline(topo, 700 + i as u64, rule, overlap);
            let batch = make_batch(800 + i as u64, 3, 5);
            let seed = 900 + i as u64;
            let (objective, got) = match topo {
                Topology::SingleStream => {
                    (Objective::Ddpm, loss_ddpm(&p, &batch, seed).unwrap())
                }
                _ => (Objective::Flow, loss_flow(&p, &batch, seed).unwrap()),
            };
            let want = oracle_loss(&p, &batch, seed, objective);
            let rel = (got - want).abs() / want.abs().max(got.abs());
            assert!(rel <= 1e-10, "case {i} {topo:?}: {got} vs oracle {want} rel {rel}");
        }
    }

    #[test]
    fn loss_at_identity_equals_frozen_base_bitwise() {
        // fresh zero scales: injection is exactly the identity
        for topo in [
            Topology::SingleStream,
            Topology::TriStreamLayout,
            Topology::ProjectedStream,
        ] {
            let mut p = build_pipeline(topo, 31, InjectionRule::RelativeNorm, OverlapMode::Sum);
            for sm in &mut p.memory.streams {
                for v in sm.scale.values_mut().iter_mut() {
                    *v = 0.0;
                }
            }
            let objective = match topo {
                Topology::SingleStream => Objective::Ddpm,
                _ => Objective::Flow,
            };
            let batch = make_batch(32, 2, 5);
            let with = forward_loss(&p, &batch, 33, objective, true).unwrap().loss;
            let without = forward_loss(&p, &batch, 33, objective, false).unwrap().loss;
            assert_eq!(with.to_bits(), without.to_bits(), "{topo:?}");
        }
    }

    #[test]
    fn loss_is_deterministic_in_the_seed() {
        let p = build_pipeline(
            Topology::SingleStream,
            5,
            InjectionRule::RelativeNorm,
            OverlapMode::Sum,
        );
        let batch = make_batch(6, 2, 5);
        let a = loss_ddpm(&p, &batch, 77).unwrap();
        let b = loss_ddpm(&p, &batch, 77).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let c = loss_ddpm(&p, &batch, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn grad_mode_is_threaded_through_train_step() {
        // one step under each engine from identical initial state
        for mode in [GradMode::Analytic, GradMode::ReverseAuto] {
            let mut p = build_pipeline(
                Topology::SingleStream,
                11,
                InjectionRule::RelativeNorm,
                OverlapMode::Sum,
            );
            let cfg = super::super::TrainConfig {
                grad_mode: mode,
                ..Default::default()
            };
            let mut opt = super::super::AdamState::new(p.memory.num_params());
            let batch = make_batch(12, 2, 5);
            let rec = super::super::train_step(&mut p, &mut opt, &cfg, &batch).unwrap();
            assert!(rec.loss.is_finite());
            assert!(rec.grad_norm.is_finite());
        }
    }
}
