//! Concept tables, channel scales, and localized residual injection.
//!
//! Injection is the only edit the mechanism performs: hidden states at
//! positions covered by matched trigger spans receive an accumulated
//! residual; every other element of the array is returned bitwise
//! unchanged. Both residual rules are exactly zero at scale zero, so a
//! freshly initialized memory is the identity.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EngramError, Result};
use crate::registry::{MatchSet, TriggerRegistry};
use crate::util::snap_f32;

/// How a matched key's residual is formed from its concept vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionRule {
    /// delta = e_k ⊙ s
    Absolute,
    /// delta = (e_k / max(‖e_k‖, ε)) ⊙ tanh(s) · ρ_b
    RelativeNorm,
}

/// How residuals combine at positions covered by several matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    Sum,
    /// Per-position arithmetic mean over the covering matches.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub rule: InjectionRule,
    pub overlap_mode: OverlapMode,
    pub norm_epsilon: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            rule: InjectionRule::RelativeNorm,
            overlap_mode: OverlapMode::Sum,
            norm_epsilon: 1e-8,
        }
    }
}

/// Frozen text-conditioning states for one stream, shape (B, L_m, d_m).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub data: Array3<f64>,
    pub stream_id: String,
}

impl HiddenStates {
    pub fn new(data: Array3<f64>, stream_id: &str) -> Self {
        Self {
            data,
            stream_id: stream_id.to_string(),
        }
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn seq_len(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// One learned vector per registry entry; row k belongs to key index k.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptTable {
    vectors: Array2<f64>,
}

impl ConceptTable {
    pub fn new(vectors: Array2<f64>) -> Self {
        Self { vectors }
    }

    pub fn num_keys(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn width(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vector(&self, key: usize) -> Result<ArrayView1<'_, f64>> {
        if key >= self.num_keys() {
            return Err(EngramError::MissingKey(key));
        }
        Ok(self.vectors.row(key))
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Array2<f64> {
        &mut self.vectors
    }
}

/// Learned per-channel scale, shared across keys within a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVector {
    s: Array1<f64>,
}

impl ScaleVector {
    pub fn new(s: Array1<f64>) -> Self {
        Self { s }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            s: Array1::zeros(width),
        }
    }

    pub fn width(&self) -> usize {
        self.s.len()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.s
    }

    pub fn values_mut(&mut self) -> &mut Array1<f64> {
        &mut self.s
    }
}

/// Absolute rule: elementwise e_k ⊙ s.
pub fn residual_absolute(e_k: ArrayView1<'_, f64>, s: &ScaleVector) -> Result<Array1<f64>> {
    if e_k.len() != s.width() {
        return Err(EngramError::WidthMismatch {
            expected: e_k.len(),
            got: s.width(),
        });
    }
    let mut out = Array1::zeros(e_k.len());
    for (c, o) in out.iter_mut().enumerate() {
        *o = e_k[c] * s.s[c];
    }
    Ok(out)
}

/// Activation scale of one batch row: mean over positions of the
/// per-position Euclidean norm. Padding positions are included, exactly as
/// the formula states.
pub fn stream_scale_rho(h_b: ArrayView2<'_, f64>) -> f64 {
    let l = h_b.nrows();
    if l == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for row in h_b.outer_iter() {
        let mut sq = 0.0;
        for &v in row.iter() {
            sq += v * v;
        }
        acc += sq.sqrt();
    }
    acc / l as f64
}

/// Mask-aware variant of [`stream_scale_rho`] averaging only the first
/// `real_len` positions. Experimental; `inject` always uses the unmasked
/// formula.
pub fn stream_scale_rho_masked(h_b: ArrayView2<'_, f64>, real_len: usize) -> f64 {
    let l = real_len.min(h_b.nrows());
    if l == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for row in h_b.outer_iter().take(l) {
        let mut sq = 0.0;
        for &v in row.iter() {
            sq += v * v;
        }
        acc += sq.sqrt();
    }
    acc / l as f64
}

/// Relative-norm rule: (e_k / max(‖e_k‖₂, ε)) ⊙ tanh(s) · ρ.
///
/// Bounded per channel by ρ since |tanh| < 1 and the direction vector has
/// unit norm (or less, under the ε guard).
pub fn residual_relative(
    e_k: ArrayView1<'_, f64>,
    s: &ScaleVector,
    rho: f64,
    epsilon: f64,
) -> Result<Array1<f64>> {
    if e_k.len() != s.width() {
        return Err(EngramError::WidthMismatch {
            expected: e_k.len(),
            got: s.width(),
        });
    }
    let mut sq = 0.0;
    for &v in e_k.iter() {
        sq += v * v;
    }
    let denom = sq.sqrt().max(epsilon);
    let mut out = Array1::zeros(e_k.len());
    for (c, o) in out.iter_mut().enumerate() {
        *o = (e_k[c] / denom) * s.s[c].tanh() * rho;
    }
    Ok(out)
}

/// Byproducts of an injection pass needed by the backward pass.
#[derive(Debug, Clone)]
pub struct InjectDetails {
    /// Per-batch activation scale; empty under the absolute rule.
    pub rho: Vec<f64>,
    /// Per-position covering-match counts.
    pub cover: Array2<u32>,
}

/// Apply accumulated residuals at matched spans.
///
/// Residuals for all matches are summed (or averaged by per-position cover
/// count) into a delta array first, then added in a single pass. Elements
/// whose accumulated delta is exactly zero are copied through untouched, so
/// locality and the empty-match identity hold bitwise, signed zeros
/// included.
pub fn inject(
    h: &HiddenStates,
    matches: &MatchSet,
    table: &ConceptTable,
    scale: &ScaleVector,
    cfg: &InjectionConfig,
) -> Result<HiddenStates> {
    inject_with_details(h, matches, table, scale, cfg).map(|(out, _)| out)
}

/// [`inject`] plus the per-batch rho values and cover counts it used.
pub fn inject_with_details(
    h: &HiddenStates,
    matches: &MatchSet,
    table: &ConceptTable,
    scale: &ScaleVector,
    cfg: &InjectionConfig,
) -> Result<(HiddenStates, InjectDetails)> {
    let (b_sz, l_sz, d) = h.data.dim();
    if table.width() != d {
        return Err(EngramError::WidthMismatch {
            expected: d,
            got: table.width(),
        });
    }
    if scale.width() != d {
        return Err(EngramError::WidthMismatch {
            expected: d,
            got: scale.width(),
        });
    }
    for m in matches.iter() {
        if m.batch >= b_sz || m.start + m.len > l_sz {
            return Err(EngramError::MatchOutOfBounds {
                batch: m.batch,
                start: m.start,
                end: m.start + m.len,
                batch_size: b_sz,
                seq_len: l_sz,
            });
        }
        if m.key >= table.num_keys() {
            return Err(EngramError::MissingKey(m.key));
        }
    }
    if matches.is_empty() {
        return Ok((
            h.clone(),
            InjectDetails {
                rho: Vec::new(),
                cover: Array2::zeros((b_sz, l_sz)),
            },
        ));
    }

    let rho: Vec<f64> = match cfg.rule {
        InjectionRule::Absolute => Vec::new(),
        InjectionRule::RelativeNorm => (0..b_sz)
            .map(|b| stream_scale_rho(h.data.index_axis(Axis(0), b)))
            .collect(),
    };

    let mut delta = Array3::<f64>::zeros((b_sz, l_sz, d));
    let mut cover = Array2::<u32>::zeros((b_sz, l_sz));
    for m in matches.iter() {
        let e_k = table.vector(m.key)?;
        let r = match cfg.rule {
            InjectionRule::Absolute => residual_absolute(e_k, scale)?,
            InjectionRule::RelativeNorm => {
                residual_relative(e_k, scale, rho[m.batch], cfg.norm_epsilon)?
            }
        };
        for l in m.start..m.start + m.len {
            for c in 0..d {
                delta[[m.batch, l, c]] += r[c];
            }
            cover[[m.batch, l]] += 1;
        }
    }

    let mut out = h.data.clone();
    for b in 0..b_sz {
        for l in 0..l_sz {
            let count = cover[[b, l]];
            if count == 0 {
                continue;
            }
            let scale_div = match cfg.overlap_mode {
                OverlapMode::Sum => 1.0,
                OverlapMode::Mean => 1.0 / count as f64,
            };
            for c in 0..d {
                let dv = delta[[b, l, c]] * scale_div;
                if dv != 0.0 {
                    out[[b, l, c]] += dv;
                }
            }
        }
    }
    Ok((
        HiddenStates::new(out, &h.stream_id),
        InjectDetails { rho, cover },
    ))
}

/// Fresh memory for one stream: Gaussian concept vectors, zero scales.
///
/// Zero scales make the initial injection exactly the identity under both
/// rules. Parameters are snapped to f32-representable values so checkpoint
/// round-trips through the f32 payload are bit-exact.
pub fn init_memory(
    registry: &TriggerRegistry,
    width: usize,
    seed: u64,
    init_std: f64,
) -> (ConceptTable, ScaleVector) {
    assert!(width >= 1, "concept width must be at least 1");
    assert!(init_std >= 0.0, "init_std must be non-negative");
    let n = registry.entry_count();
    let mut vectors = Array2::<f64>::zeros((n, width));
    if init_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, init_std).expect("finite non-negative std");
        for v in vectors.iter_mut() {
            *v = snap_f32(normal.sample(&mut rng));
        }
    }
    (ConceptTable::new(vectors), ScaleVector::zeros(width))
}

/// Adapter state for one encoder stream.
#[derive(Debug, Clone)]
pub struct StreamMemory {
    pub registry: TriggerRegistry,
    pub table: ConceptTable,
    pub scale: ScaleVector,
}

impl StreamMemory {
    pub fn init(registry: TriggerRegistry, width: usize, seed: u64, init_std: f64) -> Self {
        let (table, scale) = init_memory(&registry, width, seed, init_std);
        Self {
            registry,
            table,
            scale,
        }
    }

    pub fn stream_id(&self) -> &str {
        self.registry.stream_id()
    }

    pub fn width(&self) -> usize {
        self.table.width()
    }

    pub fn num_params(&self) -> usize {
        self.table.num_keys() * self.table.width() + self.scale.width()
    }
}

/// All trainable state across streams; the backbone stays frozen.
#[derive(Debug, Clone, Default)]
pub struct EngramMemory {
    pub streams: Vec<StreamMemory>,
}

impl EngramMemory {
    pub fn stream(&self, id: &str) -> Option<&StreamMemory> {
        self.streams.iter().find(|s| s.stream_id() == id)
    }

    pub fn stream_mut(&mut self, id: &str) -> Option<&mut StreamMemory> {
        self.streams.iter_mut().find(|s| s.stream_id() == id)
    }

    pub fn num_params(&self) -> usize {
        self.streams.iter().map(StreamMemory::num_params).sum()
    }

    /// Snap every parameter to the nearest f32-representable value.
    pub fn snap_to_f32(&mut self) {
        for sm in &mut self.streams {
            sm.table.vectors_mut().mapv_inplace(snap_f32);
            sm.scale.values_mut().mapv_inplace(snap_f32);
        }
    }
}
