//! Scalar reverse-mode autodiff over a replayed conditioning forward.
//!
//! The tape engine rebuilds the injection, layout, and denoiser arithmetic
//! symbolically with concept vectors and scales as leaves. Everything else
//! (base hidden states, rho, cover counts, z_t, timestep embeddings, frozen
//! weights) enters as a constant: rho comes from pre-injection states and
//! the pooled row from unedited states, so treating them as constants is
//! exact, not an approximation. Node construction mirrors the numeric
//! code's accumulation order, so the taped loss equals the analytic one and
//! the two gradient engines disagree only in roundoff.

use ndarray::{Array1, Array2};

use crate::backbone::{sinusoidal_temb, Topology};
use crate::error::{EngramError, Result};
use crate::memory::{InjectionRule, OverlapMode};
use crate::pipeline::{Pipeline, StreamConditioning};

use super::grad::MemoryGrads;
use super::loss::forward_loss;
use super::{BatchInputs, Objective};

pub(crate) type Var = u32;

const NO_PARENT: u32 = u32::MAX;

/// Flat expression tape; each node keeps at most two parents with
/// precomputed local partials, so backward is one reverse sweep.
pub(crate) struct Tape {
    values: Vec<f64>,
    parents: Vec<[(u32, f64); 2]>,
}

impl Tape {
    pub(crate) fn new() -> Self {
        Self {
            values: Vec::new(),
            parents: Vec::new(),
        }
    }

    fn push(&mut self, value: f64, parents: [(u32, f64); 2]) -> Var {
        let id = self.values.len();
        assert!(id < NO_PARENT as usize, "tape overflow");
        self.values.push(value);
        self.parents.push(parents);
        id as Var
    }

    pub(crate) fn value(&self, v: Var) -> f64 {
        self.values[v as usize]
    }

    /// Differentiable input; the caller keeps the id to read its adjoint.
    pub(crate) fn leaf(&mut self, v: f64) -> Var {
        self.push(v, [(NO_PARENT, 0.0); 2])
    }

    pub(crate) fn constant(&mut self, v: f64) -> Var {
        self.push(v, [(NO_PARENT, 0.0); 2])
    }

    pub(crate) fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, [(a, 1.0), (b, 1.0)])
    }

    pub(crate) fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va * vb, [(a, vb), (b, va)])
    }

    pub(crate) fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va / vb, [(a, 1.0 / vb), (b, -va / (vb * vb))])
    }

    pub(crate) fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, [(a, k), (NO_PARENT, 0.0)])
    }

    pub(crate) fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, [(a, 1.0), (NO_PARENT, 0.0)])
    }

    pub(crate) fn div_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) / k;
        self.push(v, [(a, 1.0 / k), (NO_PARENT, 0.0)])
    }

    pub(crate) fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).tanh();
        self.push(t, [(a, 1.0 - t * t), (NO_PARENT, 0.0)])
    }

    pub(crate) fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.push(e, [(a, e), (NO_PARENT, 0.0)])
    }

    pub(crate) fn sqrt(&mut self, a: Var) -> Var {
        let s = self.value(a).sqrt();
        // at exactly zero the downstream max-with-epsilon kills the adjoint,
        // so a zero partial here avoids inf * 0
        let partial = if s == 0.0 { 0.0 } else { 1.0 / (2.0 * s) };
        self.push(s, [(a, partial), (NO_PARENT, 0.0)])
    }

    pub(crate) fn max_const(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let partial = if va > c { 1.0 } else { 0.0 };
        self.push(va.max(c), [(a, partial), (NO_PARENT, 0.0)])
    }

    /// Adjoints of every node with respect to `root`.
    pub(crate) fn backward(&self, root: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.values.len()];
        adj[root as usize] = 1.0;
        for i in (0..self.values.len()).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            for &(p, partial) in &self.parents[i] {
                if p != NO_PARENT {
                    adj[p as usize] += partial * g;
                }
            }
        }
        adj
    }
}

/// A value in the symbolic forward: either a plain constant or a tape node.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Cell {
    Const(f64),
    Node(Var),
}

impl Tape {
    pub(crate) fn cell_value(&self, c: Cell) -> f64 {
        match c {
            Cell::Const(v) => v,
            Cell::Node(n) => self.value(n),
        }
    }

    fn promote(&mut self, c: Cell) -> Var {
        match c {
            Cell::Const(v) => self.constant(v),
            Cell::Node(n) => n,
        }
    }

    fn cadd(&mut self, a: Cell, b: Cell) -> Cell {
        match (a, b) {
            (Cell::Const(x), Cell::Const(y)) => Cell::Const(x + y),
            (Cell::Const(x), Cell::Node(n)) | (Cell::Node(n), Cell::Const(x)) => {
                Cell::Node(self.add_const(n, x))
            }
            (Cell::Node(x), Cell::Node(y)) => Cell::Node(self.add(x, y)),
        }
    }

    fn cmul(&mut self, a: Cell, b: Cell) -> Cell {
        match (a, b) {
            (Cell::Const(x), Cell::Const(y)) => Cell::Const(x * y),
            (Cell::Const(x), Cell::Node(n)) | (Cell::Node(n), Cell::Const(x)) => {
                Cell::Node(self.scale(n, x))
            }
            (Cell::Node(x), Cell::Node(y)) => Cell::Node(self.mul(x, y)),
        }
    }

    fn cdiv(&mut self, a: Cell, b: Cell) -> Cell {
        match (a, b) {
            (Cell::Const(x), Cell::Const(y)) => Cell::Const(x / y),
            (Cell::Node(n), Cell::Const(y)) => Cell::Node(self.div_const(n, y)),
            (a, b @ Cell::Node(_)) => {
                let an = self.promote(a);
                let bn = self.promote(b);
                Cell::Node(self.div(an, bn))
            }
        }
    }

    fn cadd_const(&mut self, a: Cell, k: f64) -> Cell {
        match a {
            Cell::Const(v) => Cell::Const(v + k),
            Cell::Node(n) => Cell::Node(self.add_const(n, k)),
        }
    }

    fn cdiv_const(&mut self, a: Cell, k: f64) -> Cell {
        match a {
            Cell::Const(v) => Cell::Const(v / k),
            Cell::Node(n) => Cell::Node(self.div_const(n, k)),
        }
    }

    fn ctanh(&mut self, a: Cell) -> Cell {
        match a {
            Cell::Const(v) => Cell::Const(v.tanh()),
            Cell::Node(n) => Cell::Node(self.tanh(n)),
        }
    }

    fn cexp(&mut self, a: Cell) -> Cell {
        match a {
            Cell::Const(v) => Cell::Const(v.exp()),
            Cell::Node(n) => Cell::Node(self.exp(n)),
        }
    }
}

/// Loss and adapter gradients via the tape engine.
pub(crate) fn tape_loss_and_grads(
    pipeline: &Pipeline,
    batch: &BatchInputs,
    noise_seed: u64,
    objective: Objective,
) -> Result<(f64, MemoryGrads)> {
    let trace = forward_loss(pipeline, batch, noise_seed, objective, true)?;
    let spec = pipeline.backbone().spec();
    let (b_sz, d_z) = trace.pred.dim();
    let mut tape = Tape::new();

    // adapter leaves in optimizer order: per stream, table rows then scale
    let mut table_leaves: Vec<Vec<Vec<Var>>> = Vec::new();
    let mut scale_leaves: Vec<Vec<Var>> = Vec::new();
    for sm in &pipeline.memory.streams {
        let (keys, w) = (sm.table.num_keys(), sm.table.width());
        let mut rows = Vec::with_capacity(keys);
        for k in 0..keys {
            rows.push(
                (0..w)
                    .map(|c| tape.leaf(sm.table.vectors()[[k, c]]))
                    .collect::<Vec<_>>(),
            );
        }
        table_leaves.push(rows);
        scale_leaves.push((0..w).map(|c| tape.leaf(sm.scale.values()[c])).collect());
    }

    let mut h_cells: Vec<Vec<Vec<Vec<Cell>>>> = Vec::new();
    for (si, sc) in trace.cond.streams.iter().enumerate() {
        h_cells.push(injected_cells(
            &mut tape,
            pipeline,
            sc,
            &table_leaves[si],
            &scale_leaves[si],
        ));
    }

    let c_cells = match spec.topology {
        Topology::SingleStream => h_cells.swap_remove(0),
        Topology::TriStreamLayout => tri_cells(&trace.cond.streams, &h_cells, spec),
        Topology::ProjectedStream => {
            let proj = pipeline
                .backbone()
                .projection_weights()
                .expect("projected topology");
            let l_pad = spec.proj_len.expect("validated");
            let l_m = spec.streams[0].max_len;
            let d_model = proj.w.nrows();
            let mut out = Vec::with_capacity(b_sz);
            for b in 0..b_sz {
                let mut rows = Vec::with_capacity(l_pad);
                for l in 0..l_pad {
                    if l < l_m {
                        rows.push(affine_cells(&mut tape, &proj.w, &proj.b, &h_cells[0][b][l]));
                    } else {
                        rows.push((0..d_model).map(|c| Cell::Const(proj.b[c])).collect());
                    }
                }
                out.push(rows);
            }
            out
        }
    };

    // denoiser rows, mirroring denoise_with_trace
    let dw = pipeline.backbone().denoiser_weights();
    let d_c = spec.cond_width();
    let sqrt_d = (d_c as f64).sqrt();
    let l_rows = c_cells[0].len();
    let mut preds: Vec<Vec<Cell>> = Vec::with_capacity(b_sz);
    for b in 0..b_sz {
        let mut x_cells: Vec<Cell> = Vec::with_capacity(spec.denoiser_input_dim());
        for i in 0..d_z {
            x_cells.push(Cell::Const(trace.z_t[[b, i]]));
        }
        let temb = sinusoidal_temb(trace.t[b]);
        for &v in temb.iter() {
            x_cells.push(Cell::Const(v));
        }
        for ch in 0..d_c {
            let mut acc = Cell::Const(0.0);
            for pos in 0..l_rows {
                acc = tape.cadd(acc, c_cells[b][pos][ch]);
            }
            x_cells.push(tape.cdiv_const(acc, l_rows as f64));
        }
        let mut scores = Vec::with_capacity(l_rows);
        let mut max_s = f64::NEG_INFINITY;
        for pos in 0..l_rows {
            let mut acc = Cell::Const(0.0);
            for ch in 0..d_c {
                let term = tape.cmul(c_cells[b][pos][ch], Cell::Const(dw.query[ch]));
                acc = tape.cadd(acc, term);
            }
            let sc = tape.cdiv_const(acc, sqrt_d);
            let v = tape.cell_value(sc);
            if v > max_s {
                max_s = v;
            }
            scores.push(sc);
        }
        // the row max is a plain f64: softmax is shift-invariant, so its
        // derivative contribution is exactly zero
        let mut exps = Vec::with_capacity(l_rows);
        let mut z_norm = Cell::Const(0.0);
        for &sc in &scores {
            let shifted = tape.cadd_const(sc, -max_s);
            let e = tape.cexp(shifted);
            exps.push(e);
            z_norm = tape.cadd(z_norm, e);
        }
        let weights: Vec<Cell> = exps.iter().map(|&e| tape.cdiv(e, z_norm)).collect();
        for ch in 0..d_c {
            let mut acc = Cell::Const(0.0);
            for pos in 0..l_rows {
                let term = tape.cmul(weights[pos], c_cells[b][pos][ch]);
                acc = tape.cadd(acc, term);
            }
            x_cells.push(acc);
        }

        let p1 = affine_cells(&mut tape, &dw.w1, &dw.b1, &x_cells);
        let u: Vec<Cell> = p1.iter().map(|&p| tape.ctanh(p)).collect();
        let p2 = affine_cells(&mut tape, &dw.w2, &dw.b2, &u);
        let v: Vec<Cell> = p2.iter().map(|&p| tape.ctanh(p)).collect();
        preds.push(affine_cells(&mut tape, &dw.w3, &dw.b3, &v));
    }

    let mut acc = Cell::Const(0.0);
    for (b, row) in preds.iter().enumerate() {
        for (c, &p) in row.iter().enumerate() {
            let d = tape.cadd_const(p, -trace.target[[b, c]]);
            let sq = tape.cmul(d, d);
            acc = tape.cadd(acc, sq);
        }
    }
    let loss_cell = tape.cdiv_const(acc, (b_sz * d_z) as f64);
    let loss = tape.cell_value(loss_cell);
    if !loss.is_finite() {
        return Err(EngramError::NonFiniteLoss(0));
    }

    let mut grads = MemoryGrads::zeros_like(&pipeline.memory);
    if let Cell::Node(root) = loss_cell {
        let adj = tape.backward(root);
        for (si, rows) in table_leaves.iter().enumerate() {
            for (k, row) in rows.iter().enumerate() {
                for (c, &leaf) in row.iter().enumerate() {
                    grads.streams[si].d_table[[k, c]] = adj[leaf as usize];
                }
            }
            for (c, &leaf) in scale_leaves[si].iter().enumerate() {
                grads.streams[si].d_scale[c] = adj[leaf as usize];
            }
        }
    }
    Ok((loss, grads))
}

/// Symbolic replay of `inject_with_details` for one stream.
fn injected_cells(
    tape: &mut Tape,
    pipeline: &Pipeline,
    sc: &StreamConditioning,
    t_leaves: &[Vec<Var>],
    s_leaves: &[Var],
) -> Vec<Vec<Vec<Cell>>> {
    let inj = &pipeline.injection;
    let (b_sz, l_sz, d) = sc.h_base.data.dim();
    let mut grid: Vec<Vec<Vec<Cell>>> = (0..b_sz)
        .map(|b| {
            (0..l_sz)
                .map(|l| {
                    (0..d)
                        .map(|c| Cell::Const(sc.h_base.data[[b, l, c]]))
                        .collect()
                })
                .collect()
        })
        .collect();
    if sc.matches.is_empty() {
        return grid;
    }

    let mut delta: Vec<Option<Var>> = vec![None; b_sz * l_sz * d];
    for m in sc.matches.iter() {
        let e = &t_leaves[m.key];
        let r: Vec<Var> = match inj.rule {
            InjectionRule::Absolute => (0..d).map(|c| tape.mul(e[c], s_leaves[c])).collect(),
            InjectionRule::RelativeNorm => {
                let mut sq = tape.constant(0.0);
                for &ec in e.iter() {
                    let p = tape.mul(ec, ec);
                    sq = tape.add(sq, p);
                }
                let norm = tape.sqrt(sq);
                let denom = tape.max_const(norm, inj.norm_epsilon);
                let rho = sc.details.rho[m.batch];
                (0..d)
                    .map(|c| {
                        let dir = tape.div(e[c], denom);
                        let th = tape.tanh(s_leaves[c]);
                        let prod = tape.mul(dir, th);
                        tape.scale(prod, rho)
                    })
                    .collect()
            }
        };
        for l in m.start..m.start + m.len {
            for c in 0..d {
                let idx = (m.batch * l_sz + l) * d + c;
                delta[idx] = Some(match delta[idx] {
                    None => r[c],
                    Some(prev) => tape.add(prev, r[c]),
                });
            }
        }
    }

    for b in 0..b_sz {
        for l in 0..l_sz {
            let count = sc.details.cover[[b, l]];
            if count == 0 {
                continue;
            }
            let scale_div = match inj.overlap_mode {
                OverlapMode::Sum => 1.0,
                OverlapMode::Mean => 1.0 / count as f64,
            };
            for c in 0..d {
                let dvar = delta[(b * l_sz + l) * d + c].expect("covered position");
                let dv = tape.scale(dvar, scale_div);
                grid[b][l][c] = Cell::Node(tape.add_const(dv, sc.h_base.data[[b, l, c]]));
            }
        }
    }
    grid
}

/// Symbolic replay of `layout_tri_stream` plus the frozen pooled row.
fn tri_cells(
    streams: &[StreamConditioning],
    h_cells: &[Vec<Vec<Vec<Cell>>>],
    spec: &crate::backbone::BackboneSpec,
) -> Vec<Vec<Vec<Cell>>> {
    let l_clip = spec.streams[0].max_len;
    let l_t5 = spec.streams[2].max_len;
    let (d_a, d_b) = (spec.streams[0].width, spec.streams[1].width);
    let d_wide = spec.streams[2].width;
    let b_sz = h_cells[0].len();
    let rows = l_clip + l_t5 + 1;
    let mut out = vec![vec![vec![Cell::Const(0.0); d_wide]; rows]; b_sz];
    for b in 0..b_sz {
        for l in 0..l_clip {
            for c in 0..d_a {
                out[b][l][c] = h_cells[0][b][l][c];
            }
            for c in 0..d_b {
                out[b][l][d_a + c] = h_cells[1][b][l][c];
            }
        }
        for l in 0..l_t5 {
            for c in 0..d_wide {
                out[b][l_clip + l][c] = h_cells[2][b][l][c];
            }
        }
        // pooled row from unedited base states; a constant by construction
        for ch in 0..d_a {
            let mut acc = 0.0;
            for pos in 0..l_clip {
                acc += streams[0].h_base.data[[b, pos, ch]];
            }
            out[b][rows - 1][ch] = Cell::Const(acc / l_clip as f64);
        }
        for ch in 0..d_b {
            let mut acc = 0.0;
            for pos in 0..l_clip {
                acc += streams[1].h_base.data[[b, pos, ch]];
            }
            out[b][rows - 1][d_a + ch] = Cell::Const(acc / l_clip as f64);
        }
    }
    out
}

/// acc = b[o] then acc += w[o][i] * x[i], matching the numeric affine.
fn affine_cells(tape: &mut Tape, w: &Array2<f64>, b: &Array1<f64>, x: &[Cell]) -> Vec<Cell> {
    let (rows, cols) = w.dim();
    debug_assert_eq!(cols, x.len());
    (0..rows)
        .map(|o| {
            let mut acc = Cell::Const(b[o]);
            for (i, &xi) in x.iter().enumerate() {
                let term = tape.cmul(xi, Cell::Const(w[[o, i]]));
                acc = tape.cadd(acc, term);
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::grad::tests::{build_pipeline, make_batch};
    use super::super::grad::{grad_memory, MemoryGrads};
    use super::super::GradMode;
    use super::*;
    use crate::memory::{InjectionRule, OverlapMode};

    fn assert_engines_close(a: &MemoryGrads, b: &MemoryGrads, tag: &str) {
        for (si, (x, y)) in a.streams.iter().zip(&b.streams).enumerate() {
            let pairs = x
                .d_table
                .iter()
                .zip(y.d_table.iter())
                .chain(x.d_scale.iter().zip(y.d_scale.iter()));
            for (i, (&p, &q)) in pairs.enumerate() {
                let denom = p.abs().max(q.abs());
                if denom < 1e-9 {
                    assert!((p - q).abs() <= 1e-12, "{tag} s{si} p{i}: {p} vs {q}");
                } else {
                    let rel = (p - q).abs() / denom;
                    assert!(rel <= 1e-8, "{tag} s{si} p{i}: {p} vs {q} rel {rel}");
                }
            }
        }
    }

    #[test]
    fn tape_backward_matches_closed_form() {
        // f(a, b) = tanh(a b) + a / b + sqrt(max(b, 2)) + exp(a / 2)
        let check = |a_v: f64, b_v: f64| {
            let mut tape = Tape::new();
            let a = tape.leaf(a_v);
            let b = tape.leaf(b_v);
            let ab = tape.mul(a, b);
            let t1 = tape.tanh(ab);
            let t2 = tape.div(a, b);
            let mx = tape.max_const(b, 2.0);
            let t3 = tape.sqrt(mx);
            let half_a = tape.scale(a, 0.5);
            let t4 = tape.exp(half_a);
            let s1 = tape.add(t1, t2);
            let s2 = tape.add(s1, t3);
            let f = tape.add(s2, t4);
            let adj = tape.backward(f);
            let sech2 = 1.0 - (a_v * b_v).tanh().powi(2);
            let want_da = b_v * sech2 + 1.0 / b_v + 0.5 * (0.5 * a_v).exp();
            let sqrt_term = if b_v > 2.0 {
                1.0 / (2.0 * b_v.sqrt())
            } else {
                0.0
            };
            let want_db = a_v * sech2 - a_v / (b_v * b_v) + sqrt_term;
            assert!((adj[a as usize] - want_da).abs() < 1e-12, "da at ({a_v},{b_v})");
            assert!((adj[b as usize] - want_db).abs() < 1e-12, "db at ({a_v},{b_v})");
        };
        check(0.8, 1.7);
        check(-0.4, 3.0);
    }

    #[test]
    fn shared_node_adjoints_accumulate() {
        // f = (x + 3)^2 via a squared shared node: df/dx = 2 (x + 3)
        let mut tape = Tape::new();
        let x = tape.leaf(1.25);
        let y = tape.add_const(x, 3.0);
        let f = tape.mul(y, y);
        let adj = tape.backward(f);
        assert_eq!(adj[x as usize], 2.0 * 4.25);
        assert_eq!(tape.values.len(), 3);
    }

    #[test]
    fn tape_agrees_with_analytic_engine() {
        let cases = [
            (Topology::SingleStream, InjectionRule::Absolute, OverlapMode::Sum),
            (Topology::SingleStream, InjectionRule::RelativeNorm, OverlapMode::Mean),
            (Topology::TriStreamLayout, InjectionRule::RelativeNorm, OverlapMode::Sum),
            (Topology::ProjectedStream, InjectionRule::Absolute, OverlapMode::Mean),
            (Topology::ProjectedStream, InjectionRule::RelativeNorm, OverlapMode::Sum),
        ];
        for (i, &(topo, rule, overlap)) in cases.iter().enumerate() {
            let p = build_pipeline(topo, 400 + i as u64, rule, overlap);
            let objective = match topo {
                Topology::SingleStream => Objective::Ddpm,
                _ => Objective::Flow,
            };
            let batch = make_batch(500 + i as u64, 2, 5);
            let seed = 600 + i as u64;
            let (loss_a, grads_a) =
                grad_memory(&p, &batch, seed, objective, GradMode::Analytic).unwrap();
            let (loss_t, grads_t) =
                grad_memory(&p, &batch, seed, objective, GradMode::ReverseAuto).unwrap();
            // identical accumulation order keeps the losses equal
            assert_eq!(loss_a, loss_t, "case {i}");
            assert_engines_close(&grads_a, &grads_t, &format!("case {i} {topo:?} {rule:?}"));
        }
    }

    #[test]
    fn control_batch_yields_constant_loss_and_zero_grads() {
        let p = build_pipeline(
            Topology::SingleStream,
            77,
            InjectionRule::RelativeNorm,
            OverlapMode::Sum,
        );
        let batch = BatchInputs {
            prompts: vec!["a quiet harbor at dusk".to_string()],
            z0: ndarray::Array::from_shape_fn((1, 5), |(_, c)| 0.3 * c as f64 - 0.6),
        };
        let (loss, grads) =
            grad_memory(&p, &batch, 3, Objective::Ddpm, GradMode::ReverseAuto).unwrap();
        assert!(loss.is_finite());
        assert!(grads.streams[0].d_table.iter().all(|&v| v == 0.0));
        assert!(grads.streams[0].d_scale.iter().all(|&v| v == 0.0));
    }
}
