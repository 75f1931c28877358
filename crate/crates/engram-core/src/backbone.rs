//! Frozen toy backbones: text encoders, conditioning layouts, denoiser.
//!
//! Every weight tensor is generated from `frozen_seed` through a per-tensor
//! tagged sub-seed, so weights are independent of construction order and
//! bit-identical across runs. Nothing in this module is ever trained or
//! serialized; checkpoints record only the seed.
//!
//! All matrix arithmetic uses explicit accumulation loops with a fixed
//! order. Bitwise reproducibility of the frozen path is a contract, not an
//! accident.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EngramError, Result};
use crate::memory::HiddenStates;
use crate::registry::TokenSequence;
use crate::util::component_seed;

/// Width of the sinusoidal timestep embedding fed to the denoiser.
pub const TEMB_DIM: usize = 16;

/// Conditioning site within the two-block toy encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// After the first block.
    Penultimate,
    /// After the second block.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub stream_id: String,
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub site: Site,
}

/// How per-stream hidden states are assembled into denoiser conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// One stream, conditioning is the stream's hidden states directly.
    SingleStream,
    /// Two clip-like streams feature-concatenated, zero-padded to the
    /// t5-like width, then token-concatenated with the t5-like stream.
    TriStreamLayout,
    /// One stream zero-padded in sequence then affinely projected to the
    /// model width.
    ProjectedStream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub topology: Topology,
    pub streams: Vec<StreamConfig>,
    /// Latent dimension d_z of the toy latents.
    pub latent_dim: usize,
    /// Hidden width of the denoiser blocks.
    pub hidden: usize,
    pub frozen_seed: u64,
    /// Projection output width, projected_stream only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proj_width: Option<usize>,
    /// Padded sequence length before projection, projected_stream only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proj_len: Option<usize>,
}

/// Toy latent batch, shape (B, d_z). The projected topology's optional
/// frame axis is not modeled; no operation here consumes frames.
pub type LatentBatch = Array2<f64>;

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 || self.hidden < 1 {
            return Err(EngramError::InvalidConfig(
                "latent_dim and hidden must be at least 1".into(),
            ));
        }
        for s in &self.streams {
            if s.width < 1 || s.max_len < 1 {
                return Err(EngramError::InvalidConfig(format!(
                    "stream {} has degenerate shape",
                    s.stream_id
                )));
            }
            if s.vocab_size < 2 {
                return Err(EngramError::InvalidConfig(format!(
                    "stream {} vocab must include pad and unk",
                    s.stream_id
                )));
            }
        }
        let mut ids: Vec<&str> = self.streams.iter().map(|s| s.stream_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.streams.len() {
            return Err(EngramError::InvalidConfig(
                "stream ids must be distinct".into(),
            ));
        }
        match self.topology {
            Topology::SingleStream => {
                if self.streams.len() != 1 {
                    return Err(EngramError::InvalidConfig(
                        "single_stream needs exactly 1 stream".into(),
                    ));
                }
            }
            Topology::TriStreamLayout => {
                if self.streams.len() != 3 {
                    return Err(EngramError::InvalidConfig(
                        "tri_stream_layout needs exactly 3 streams".into(),
                    ));
                }
                let (a, b, t5) = (&self.streams[0], &self.streams[1], &self.streams[2]);
                if a.max_len != b.max_len {
                    return Err(EngramError::InvalidConfig(
                        "clip-like streams must share max_len".into(),
                    ));
                }
                if a.width + b.width > t5.width {
                    return Err(EngramError::InvalidConfig(
                        "clip widths must fit inside the t5 width".into(),
                    ));
                }
            }
            Topology::ProjectedStream => {
                if self.streams.len() != 1 {
                    return Err(EngramError::InvalidConfig(
                        "projected_stream needs exactly 1 stream".into(),
                    ));
                }
                let w = self.proj_width.ok_or_else(|| {
                    EngramError::InvalidConfig("projected_stream needs proj_width".into())
                })?;
                let l = self.proj_len.ok_or_else(|| {
                    EngramError::InvalidConfig("projected_stream needs proj_len".into())
                })?;
                if w < 1 {
                    return Err(EngramError::InvalidConfig("proj_width must be >= 1".into()));
                }
                if l < self.streams[0].max_len {
                    return Err(EngramError::InvalidConfig(
                        "proj_len must cover the stream max_len".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Channel width of the conditioning array fed to the denoiser.
    pub fn cond_width(&self) -> usize {
        match self.topology {
            Topology::SingleStream => self.streams[0].width,
            Topology::TriStreamLayout => self.streams[2].width,
            Topology::ProjectedStream => self.proj_width.expect("validated"),
        }
    }

    pub fn denoiser_input_dim(&self) -> usize {
        self.latent_dim + TEMB_DIM + 2 * self.cond_width()
    }

    pub fn stream(&self, stream_id: &str) -> Option<(usize, &StreamConfig)> {
        self.streams
            .iter()
            .enumerate()
            .find(|(_, s)| s.stream_id == stream_id)
    }
}

/// Frozen parameters of one stream encoder.
#[derive(Debug, Clone)]
pub struct StreamWeights {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub a1: Array2<f64>,
    pub c1: Array1<f64>,
    pub a2: Array2<f64>,
    pub c2: Array1<f64>,
}

/// Frozen affine projection for the projected topology.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Frozen parameters of the conditional denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserWeights {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    /// Attention-pool query over conditioning channels.
    pub query: Array1<f64>,
}

/// A fully constructed frozen backbone.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    spec: BackboneSpec,
    streams: Vec<StreamWeights>,
    projection: Option<ProjectionWeights>,
    denoiser: DenoiserWeights,
}

fn gauss_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(component_seed(seed, tag))
}

fn gauss_mat(seed: u64, tag: &str, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let mut rng = gauss_rng(seed, tag);
    let dist = Normal::new(0.0, std).expect("finite std");
    let mut v = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        v.push(dist.sample(&mut rng));
    }
    Array2::from_shape_vec((rows, cols), v).expect("length matches shape")
}

fn gauss_vec(seed: u64, tag: &str, len: usize, std: f64) -> Array1<f64> {
    let mut rng = gauss_rng(seed, tag);
    let dist = Normal::new(0.0, std).expect("finite std");
    let mut v = Vec::with_capacity(len);
    for _ in 0..len {
        v.push(dist.sample(&mut rng));
    }
    Array1::from(v)
}

/// out = W x + b with a pinned accumulation order.
pub(crate) fn affine(w: &Array2<f64>, b: &Array1<f64>, x: &[f64], out: &mut [f64]) {
    let (rows, cols) = w.dim();
    debug_assert_eq!(cols, x.len());
    debug_assert_eq!(rows, out.len());
    for o in 0..rows {
        let mut acc = b[o];
        for i in 0..cols {
            acc += w[[o, i]] * x[i];
        }
        out[o] = acc;
    }
}

/// out = Wᵀ g; the adjoint of the affine map's linear part.
pub(crate) fn affine_transpose(w: &Array2<f64>, g: &[f64], out: &mut [f64]) {
    let (rows, cols) = w.dim();
    debug_assert_eq!(rows, g.len());
    debug_assert_eq!(cols, out.len());
    for i in 0..cols {
        let mut acc = 0.0;
        for o in 0..rows {
            acc += w[[o, i]] * g[o];
        }
        out[i] = acc;
    }
}

/// Sinusoidal timestep embedding over geometrically spaced frequencies.
/// DDPM passes integer steps as reals; flow passes t in [0, 1].
pub fn sinusoidal_temb(t: f64) -> [f64; TEMB_DIM] {
    let mut out = [0.0; TEMB_DIM];
    let pairs = TEMB_DIM / 2;
    for i in 0..pairs {
        let omega = 1000f64.powf(-(i as f64) / (pairs as f64 - 1.0));
        out[2 * i] = (t * omega).sin();
        out[2 * i + 1] = (t * omega).cos();
    }
    out
}

/// Forward intermediates kept for the backward pass over conditioning.
#[derive(Debug, Clone)]
pub struct DenoiseTrace {
    /// Concatenated denoiser input rows, (B, d_in).
    pub x: Array2<f64>,
    /// First block activations tanh(p1), (B, hidden).
    pub u: Array2<f64>,
    /// Second block activations tanh(p2), (B, hidden).
    pub v: Array2<f64>,
    /// Attention-pool weights per conditioning row, (B, L).
    pub attn_w: Array2<f64>,
}

impl ToyBackbone {
    pub fn new(spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let seed = spec.frozen_seed;
        let mut streams = Vec::with_capacity(spec.streams.len());
        for sc in &spec.streams {
            let d = sc.width;
            let sid = &sc.stream_id;
            streams.push(StreamWeights {
                tok_emb: gauss_mat(seed, &format!("{sid}.tok_emb"), sc.vocab_size, d, 1.0),
                pos_emb: gauss_mat(seed, &format!("{sid}.pos_emb"), sc.max_len, d, 0.5),
                a1: gauss_mat(seed, &format!("{sid}.a1"), d, d, 1.0 / (d as f64).sqrt()),
                c1: gauss_vec(seed, &format!("{sid}.c1"), d, 0.1),
                a2: gauss_mat(seed, &format!("{sid}.a2"), d, d, 1.0 / (d as f64).sqrt()),
                c2: gauss_vec(seed, &format!("{sid}.c2"), d, 0.1),
            });
        }
        let projection = match spec.topology {
            Topology::ProjectedStream => {
                let d_in = spec.streams[0].width;
                let d_out = spec.proj_width.expect("validated");
                Some(ProjectionWeights {
                    w: gauss_mat(seed, "proj.w", d_out, d_in, 1.0 / (d_in as f64).sqrt()),
                    b: gauss_vec(seed, "proj.b", d_out, 0.1),
                })
            }
            _ => None,
        };
        let d_in = spec.denoiser_input_dim();
        let hidden = spec.hidden;
        let d_z = spec.latent_dim;
        let d_c = spec.cond_width();
        let denoiser = DenoiserWeights {
            w1: gauss_mat(seed, "den.w1", hidden, d_in, 1.0 / (d_in as f64).sqrt()),
            b1: gauss_vec(seed, "den.b1", hidden, 0.1),
            w2: gauss_mat(seed, "den.w2", hidden, hidden, 1.0 / (hidden as f64).sqrt()),
            b2: gauss_vec(seed, "den.b2", hidden, 0.1),
            // head gain above Xavier so bounded activations can still reach
            // targets several sigma from the origin
            w3: gauss_mat(seed, "den.w3", d_z, hidden, 2.0 / (hidden as f64).sqrt()),
            b3: Array1::zeros(d_z),
            query: gauss_vec(seed, "den.query", d_c, 1.0),
        };
        Ok(Self {
            spec,
            streams,
            projection,
            denoiser,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn stream_weights(&self, stream_id: &str) -> Option<&StreamWeights> {
        let (idx, _) = self.spec.stream(stream_id)?;
        Some(&self.streams[idx])
    }

    pub fn projection_weights(&self) -> Option<&ProjectionWeights> {
        self.projection.as_ref()
    }

    pub fn denoiser_weights(&self) -> &DenoiserWeights {
        &self.denoiser
    }

    /// Offsets of the (z_t, temb, mean-pool, attn-pool) segments in the
    /// denoiser input row.
    pub fn input_offsets(&self) -> (usize, usize, usize, usize) {
        let d_z = self.spec.latent_dim;
        let d_c = self.spec.cond_width();
        (0, d_z, d_z + TEMB_DIM, d_z + TEMB_DIM + d_c)
    }

    /// SHA-256 over every frozen weight tensor in a fixed order.
    pub fn frozen_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"engram-frozen-v1");
        let mut feed = |arr: &[f64]| {
            for &v in arr {
                hasher.update(v.to_le_bytes());
            }
        };
        for sw in &self.streams {
            feed(sw.tok_emb.as_slice().expect("standard layout"));
            feed(sw.pos_emb.as_slice().expect("standard layout"));
            feed(sw.a1.as_slice().expect("standard layout"));
            feed(sw.c1.as_slice().expect("standard layout"));
            feed(sw.a2.as_slice().expect("standard layout"));
            feed(sw.c2.as_slice().expect("standard layout"));
        }
        if let Some(p) = &self.projection {
            feed(p.w.as_slice().expect("standard layout"));
            feed(p.b.as_slice().expect("standard layout"));
        }
        let d = &self.denoiser;
        feed(d.w1.as_slice().expect("standard layout"));
        feed(d.b1.as_slice().expect("standard layout"));
        feed(d.w2.as_slice().expect("standard layout"));
        feed(d.b2.as_slice().expect("standard layout"));
        feed(d.w3.as_slice().expect("standard layout"));
        feed(d.b3.as_slice().expect("standard layout"));
        feed(d.query.as_slice().expect("standard layout"));
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// Frozen text states for one stream: token + position embedding, then two
/// per-position affine-tanh blocks; the site picks which block's output is
/// exposed. Prompts are truncated to `max_len` and padded with the pad id.
pub fn encode_text(
    bb: &ToyBackbone,
    stream_id: &str,
    batch: &[TokenSequence],
) -> Result<HiddenStates> {
    let (idx, sc) = bb
        .spec
        .stream(stream_id)
        .ok_or_else(|| EngramError::InvalidConfig(format!("unknown stream {stream_id}")))?;
    let sw = &bb.streams[idx];
    let (l_m, d) = (sc.max_len, sc.width);
    let b_sz = batch.len();

    for seq in batch {
        for &id in seq.as_slice().iter().take(l_m) {
            if id as usize >= sc.vocab_size {
                return Err(EngramError::VocabOverflow {
                    id,
                    vocab: sc.vocab_size,
                });
            }
        }
    }

    let mut out = Array3::<f64>::zeros((b_sz, l_m, d));
    let mut x = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut v = vec![0.0; d];
    for (b, seq) in batch.iter().enumerate() {
        let ids = seq.as_slice();
        for l in 0..l_m {
            let id = if l < ids.len() {
                ids[l] as usize
            } else {
                crate::tokenizer::PAD_ID as usize
            };
            for c in 0..d {
                x[c] = sw.tok_emb[[id, c]] + sw.pos_emb[[l, c]];
            }
            affine(&sw.a1, &sw.c1, &x, &mut u);
            for val in u.iter_mut() {
                *val = val.tanh();
            }
            match sc.site {
                Site::Penultimate => {
                    for c in 0..d {
                        out[[b, l, c]] = u[c];
                    }
                }
                Site::Final => {
                    affine(&sw.a2, &sw.c2, &u, &mut v);
                    for c in 0..d {
                        out[[b, l, c]] = v[c].tanh();
                    }
                }
            }
        }
    }
    Ok(HiddenStates::new(out, stream_id))
}

/// Tri-stream conditioning: feature-concat the clip-like states, zero-pad
/// to the t5 width, token-concat with the t5 states. Values are copied
/// bitwise; the pad block is exactly zero.
pub fn layout_tri_stream(
    h_a: &HiddenStates,
    h_b: &HiddenStates,
    h_t5: &HiddenStates,
) -> Result<Array3<f64>> {
    let (ba, la, da) = h_a.data.dim();
    let (bb_, lb, db) = h_b.data.dim();
    let (bt, lt, dt) = h_t5.data.dim();
    if ba != bb_ || ba != bt {
        return Err(EngramError::ShapeMismatch(format!(
            "batch sizes differ: {ba}, {bb_}, {bt}"
        )));
    }
    if la != lb {
        return Err(EngramError::ShapeMismatch(format!(
            "clip-like streams must share sequence length: {la} vs {lb}"
        )));
    }
    if da + db > dt {
        return Err(EngramError::ShapeMismatch(format!(
            "clip widths {da}+{db} exceed t5 width {dt}"
        )));
    }
    let mut out = Array3::<f64>::zeros((ba, la + lt, dt));
    for b in 0..ba {
        for l in 0..la {
            for c in 0..da {
                out[[b, l, c]] = h_a.data[[b, l, c]];
            }
            for c in 0..db {
                out[[b, l, da + c]] = h_b.data[[b, l, c]];
            }
        }
        for l in 0..lt {
            for c in 0..dt {
                out[[b, la + l, c]] = h_t5.data[[b, l, c]];
            }
        }
    }
    Ok(out)
}

/// Projected conditioning: zero-pad the sequence to `proj_len`, then apply
/// the frozen affine projection per position. Padding rows map to the bias.
pub fn project_context(bb: &ToyBackbone, h: &HiddenStates) -> Result<Array3<f64>> {
    if bb.spec.topology != Topology::ProjectedStream {
        return Err(EngramError::TopologyMismatch {
            expected: "projected_stream".into(),
            got: format!("{:?}", bb.spec.topology),
        });
    }
    let proj = bb.projection.as_ref().expect("validated topology");
    let sc = &bb.spec.streams[0];
    if h.stream_id != sc.stream_id {
        return Err(EngramError::InvalidConfig(format!(
            "projected stream is {}, got {}",
            sc.stream_id, h.stream_id
        )));
    }
    let (b_sz, l_m, d_m) = h.data.dim();
    if d_m != sc.width {
        return Err(EngramError::WidthMismatch {
            expected: sc.width,
            got: d_m,
        });
    }
    let l_pad = bb.spec.proj_len.expect("validated");
    if l_m > l_pad {
        return Err(EngramError::ShapeMismatch(format!(
            "sequence length {l_m} exceeds proj_len {l_pad}"
        )));
    }
    let d_model = proj.w.nrows();
    let mut out = Array3::<f64>::zeros((b_sz, l_pad, d_model));
    let mut row = vec![0.0; d_model];
    let mut x = vec![0.0; d_m];
    for b in 0..b_sz {
        for l in 0..l_pad {
            if l < l_m {
                for c in 0..d_m {
                    x[c] = h.data[[b, l, c]];
                }
                affine(&proj.w, &proj.b, &x, &mut row);
            } else {
                // affine on an all-zero padding row reduces to the bias
                row.copy_from_slice(proj.b.as_slice().expect("standard layout"));
            }
            for c in 0..d_model {
                out[[b, l, c]] = row[c];
            }
        }
    }
    Ok(out)
}

/// Denoiser forward returning the backward-pass trace.
///
/// Per batch row: mean-pool and attention-pool the conditioning, concatenate
/// with z_t and the timestep embedding, run two affine-tanh blocks and a
/// linear head.
pub fn denoise_with_trace(
    bb: &ToyBackbone,
    z_t: &LatentBatch,
    t: &[f64],
    c: &Array3<f64>,
) -> Result<(LatentBatch, DenoiseTrace)> {
    let d_z = bb.spec.latent_dim;
    let d_c = bb.spec.cond_width();
    let (b_sz, l, dc_got) = c.dim();
    if z_t.dim() != (b_sz, d_z) {
        return Err(EngramError::ShapeMismatch(format!(
            "z_t shape {:?}, expected ({b_sz}, {d_z})",
            z_t.dim()
        )));
    }
    if t.len() != b_sz {
        return Err(EngramError::ShapeMismatch(format!(
            "t has {} entries for batch {b_sz}",
            t.len()
        )));
    }
    if dc_got != d_c || l == 0 {
        return Err(EngramError::ShapeMismatch(format!(
            "conditioning shape {:?}, expected (_, >=1, {d_c})",
            c.dim()
        )));
    }

    let d_in = bb.spec.denoiser_input_dim();
    let hidden = bb.spec.hidden;
    let dw = &bb.denoiser;
    let (off_z, off_t, off_mean, off_attn) = bb.input_offsets();

    let mut x = Array2::<f64>::zeros((b_sz, d_in));
    let mut u = Array2::<f64>::zeros((b_sz, hidden));
    let mut v = Array2::<f64>::zeros((b_sz, hidden));
    let mut attn_w = Array2::<f64>::zeros((b_sz, l));
    let mut pred = Array2::<f64>::zeros((b_sz, d_z));

    let mut scores = vec![0.0; l];
    let mut p = vec![0.0; hidden];
    let mut q = vec![0.0; hidden];
    let mut head = vec![0.0; d_z];
    for b in 0..b_sz {
        for i in 0..d_z {
            x[[b, off_z + i]] = z_t[[b, i]];
        }
        let temb = sinusoidal_temb(t[b]);
        for i in 0..TEMB_DIM {
            x[[b, off_t + i]] = temb[i];
        }
        for ch in 0..d_c {
            let mut acc = 0.0;
            for pos in 0..l {
                acc += c[[b, pos, ch]];
            }
            x[[b, off_mean + ch]] = acc / l as f64;
        }
        // content-dependent attention pool
        let mut max_s = f64::NEG_INFINITY;
        for (pos, sc) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            for ch in 0..d_c {
                acc += c[[b, pos, ch]] * dw.query[ch];
            }
            *sc = acc / (d_c as f64).sqrt();
            if *sc > max_s {
                max_s = *sc;
            }
        }
        let mut z_norm = 0.0;
        for sc in scores.iter_mut() {
            *sc = (*sc - max_s).exp();
            z_norm += *sc;
        }
        for (pos, sc) in scores.iter().enumerate() {
            attn_w[[b, pos]] = sc / z_norm;
        }
        for ch in 0..d_c {
            let mut acc = 0.0;
            for pos in 0..l {
                acc += attn_w[[b, pos]] * c[[b, pos, ch]];
            }
            x[[b, off_attn + ch]] = acc;
        }

        let x_row: Vec<f64> = (0..d_in).map(|i| x[[b, i]]).collect();
        affine(&dw.w1, &dw.b1, &x_row, &mut p);
        for (i, val) in p.iter().enumerate() {
            u[[b, i]] = val.tanh();
        }
        let u_row: Vec<f64> = (0..hidden).map(|i| u[[b, i]]).collect();
        affine(&dw.w2, &dw.b2, &u_row, &mut q);
        for (i, val) in q.iter().enumerate() {
            v[[b, i]] = val.tanh();
        }
        let v_row: Vec<f64> = (0..hidden).map(|i| v[[b, i]]).collect();
        affine(&dw.w3, &dw.b3, &v_row, &mut head);
        for (i, val) in head.iter().enumerate() {
            pred[[b, i]] = *val;
        }
    }
    Ok((pred, DenoiseTrace { x, u, v, attn_w }))
}

/// Frozen denoiser prediction, shape (B, d_z).
pub fn denoise_predict(
    bb: &ToyBackbone,
    z_t: &LatentBatch,
    t: &[f64],
    c: &Array3<f64>,
) -> Result<LatentBatch> {
    denoise_with_trace(bb, z_t, t, c).map(|(pred, _)| pred)
}
