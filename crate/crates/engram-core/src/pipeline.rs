//! End-to-end frozen pipeline with trainable memory.
//!
//! A pipeline owns one tokenizer, registry, and memory per stream plus the
//! frozen backbone. Conditioning is assembled per topology:
//!
//! - single_stream: injected stream states directly.
//! - tri_stream_layout: injected clip/t5 states through the layout, plus one
//!   appended pooled-projection row computed from the *unedited* clip states
//!   (pooled projections are never edited).
//! - projected_stream: injected states zero-padded and affinely projected.

use ndarray::{Array2, Array3};

use crate::backbone::{
    encode_text, layout_tri_stream, project_context, LatentBatch, Topology, ToyBackbone,
};
use crate::error::{EngramError, Result};
use crate::memory::{
    inject_with_details, EngramMemory, HiddenStates, InjectDetails, InjectionConfig, StreamMemory,
};
use crate::registry::{match_spans, MatchSet, TokenSequence};
use crate::sampler::{sample_generate, SamplerConfig};
use crate::schedule::DdpmSchedule;
use crate::tokenizer::Tokenizer;

/// Per-stream artifacts of one conditioning pass.
#[derive(Debug, Clone)]
pub struct StreamConditioning {
    pub stream_id: String,
    /// Tokenized prompts truncated to the stream's max_len; matching runs on
    /// exactly these ids.
    pub tokens: Vec<TokenSequence>,
    pub matches: MatchSet,
    pub h_base: HiddenStates,
    pub h_injected: HiddenStates,
    pub details: InjectDetails,
}

/// Assembled conditioning plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ConditioningOutput {
    pub c: Array3<f64>,
    pub streams: Vec<StreamConditioning>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    backbone: ToyBackbone,
    tokenizers: Vec<Tokenizer>,
    pub memory: EngramMemory,
    pub injection: InjectionConfig,
    pub schedule: DdpmSchedule,
    pub sampler: SamplerConfig,
}

impl Pipeline {
    /// `tokenizers` and `memory.streams` must parallel the backbone's stream
    /// order, one entry per stream.
    pub fn new(
        backbone: ToyBackbone,
        tokenizers: Vec<Tokenizer>,
        memory: EngramMemory,
        injection: InjectionConfig,
        schedule: DdpmSchedule,
        sampler: SamplerConfig,
    ) -> Result<Self> {
        let spec = backbone.spec();
        if tokenizers.len() != spec.streams.len() || memory.streams.len() != spec.streams.len() {
            return Err(EngramError::InvalidConfig(format!(
                "expected {} tokenizers and memories, got {} and {}",
                spec.streams.len(),
                tokenizers.len(),
                memory.streams.len()
            )));
        }
        for (sc, mem) in spec.streams.iter().zip(&memory.streams) {
            if mem.stream_id() != sc.stream_id {
                return Err(EngramError::InvalidConfig(format!(
                    "memory stream {} does not match backbone stream {}",
                    mem.stream_id(),
                    sc.stream_id
                )));
            }
            if mem.width() != sc.width {
                return Err(EngramError::WidthMismatch {
                    expected: sc.width,
                    got: mem.width(),
                });
            }
        }
        Ok(Self {
            backbone,
            tokenizers,
            memory,
            injection,
            schedule,
            sampler,
        })
    }

    pub fn backbone(&self) -> &ToyBackbone {
        &self.backbone
    }

    pub fn tokenizer(&self, stream_idx: usize) -> &Tokenizer {
        &self.tokenizers[stream_idx]
    }

    pub fn num_streams(&self) -> usize {
        self.tokenizers.len()
    }

    /// Tokenize prompts for every stream, truncated to each stream's max_len.
    pub fn tokenize_all(&self, prompts: &[String]) -> Vec<Vec<TokenSequence>> {
        self.backbone
            .spec()
            .streams
            .iter()
            .zip(&self.tokenizers)
            .map(|(sc, tok)| {
                prompts
                    .iter()
                    .map(|p| tok.encode(p).truncated(sc.max_len))
                    .collect()
            })
            .collect()
    }

    /// Matches per stream for a prompt batch.
    pub fn match_all(&self, prompts: &[String]) -> Vec<MatchSet> {
        self.tokenize_all(prompts)
            .iter()
            .zip(&self.memory.streams)
            .map(|(tokens, mem)| match_spans(&mem.registry, tokens))
            .collect()
    }

    /// Encode, inject (unless `use_memory` is false), and assemble the
    /// topology's conditioning array.
    pub fn conditioning(&self, prompts: &[String], use_memory: bool) -> Result<ConditioningOutput> {
        let tokens_per_stream = self.tokenize_all(prompts);
        let mut streams = Vec::with_capacity(self.num_streams());
        for (tokens, mem) in tokens_per_stream.into_iter().zip(&self.memory.streams) {
            streams.push(self.stream_conditioning(tokens, mem, use_memory)?);
        }
        let c = match self.backbone.spec().topology {
            Topology::SingleStream => streams[0].h_injected.data.clone(),
            Topology::TriStreamLayout => {
                let laid = layout_tri_stream(
                    &streams[0].h_injected,
                    &streams[1].h_injected,
                    &streams[2].h_injected,
                )?;
                append_pooled_row(&laid, &streams[0].h_base, &streams[1].h_base)
            }
            Topology::ProjectedStream => project_context(&self.backbone, &streams[0].h_injected)?,
        };
        Ok(ConditioningOutput { c, streams })
    }

    fn stream_conditioning(
        &self,
        tokens: Vec<TokenSequence>,
        mem: &StreamMemory,
        use_memory: bool,
    ) -> Result<StreamConditioning> {
        let matches = match_spans(&mem.registry, &tokens);
        let h_base = encode_text(&self.backbone, mem.stream_id(), &tokens)?;
        let (h_injected, details) = if use_memory {
            inject_with_details(&h_base, &matches, &mem.table, &mem.scale, &self.injection)?
        } else {
            let cover = Array2::zeros((h_base.batch(), h_base.seq_len()));
            (
                h_base.clone(),
                InjectDetails {
                    rho: Vec::new(),
                    cover,
                },
            )
        };
        Ok(StreamConditioning {
            stream_id: mem.stream_id().to_string(),
            tokens,
            matches,
            h_base,
            h_injected,
            details,
        })
    }

    /// Deterministic sample for (prompts, seed).
    pub fn sample(&self, prompts: &[String], seed: u64, use_memory: bool) -> Result<LatentBatch> {
        let cond = self.conditioning(prompts, use_memory)?;
        sample_generate(
            &self.backbone,
            &self.schedule,
            &self.sampler,
            &cond.c,
            seed,
        )
    }
}

/// Pooled-projection analog for the tri-stream topology: per-stream mean
/// over positions of the unedited clip states, feature-concatenated and
/// zero-padded to the wide width, appended as one extra conditioning row.
fn append_pooled_row(
    laid: &Array3<f64>,
    h_a_base: &HiddenStates,
    h_b_base: &HiddenStates,
) -> Array3<f64> {
    let (b_sz, l, d_wide) = laid.dim();
    let (_, l_a, d_a) = h_a_base.data.dim();
    let (_, l_b, d_b) = h_b_base.data.dim();
    let mut out = Array3::<f64>::zeros((b_sz, l + 1, d_wide));
    for b in 0..b_sz {
        for row in 0..l {
            for ch in 0..d_wide {
                out[[b, row, ch]] = laid[[b, row, ch]];
            }
        }
        for ch in 0..d_a {
            let mut acc = 0.0;
            for pos in 0..l_a {
                acc += h_a_base.data[[b, pos, ch]];
            }
            out[[b, l, ch]] = acc / l_a as f64;
        }
        for ch in 0..d_b {
            let mut acc = 0.0;
            for pos in 0..l_b {
                acc += h_b_base.data[[b, pos, ch]];
            }
            out[[b, l, d_a + ch]] = acc / l_b as f64;
        }
    }
    out
}
