//! Trigger-indexed concept tables for frozen toy diffusion backbones.
//!
//! The library implements the full loop: build multi-scale n-gram registries
//! from a trigger phrase, match registered spans in tokenized prompts, inject
//! learned residuals into frozen text-conditioning states at exactly the
//! matched positions, train only the injected parameters against denoising
//! objectives, and audit that prompts without trigger spans are bit-identical
//! to the frozen baseline.

pub mod backbone;
pub mod config;
pub mod error;
pub mod eval;
pub mod memory;
pub mod pipeline;
pub mod plot;
pub mod registry;
pub mod sampler;
pub mod schedule;
pub mod tokenizer;
pub mod train;
pub mod util;

pub use backbone::{
    denoise_predict, encode_text, layout_tri_stream, project_context, BackboneSpec, LatentBatch,
    Site, StreamConfig, Topology, ToyBackbone,
};
pub use config::{RunConfig, ScheduleSection, StreamSection};
pub use error::{EngramError, Result};
pub use eval::{
    binding_score, compare_matched_seed, control_prompts, eval_threads, holdout_prompts,
    locality_audit, make_dataset, read_report_jsonl, write_report_csv, write_report_jsonl,
    ComparisonRecord, ComparisonReport, ComparisonSummary, LocalityReport, SyntheticConcept,
    THREADS_ENV,
};
pub use memory::{
    init_memory, inject, inject_with_details, ConceptTable, EngramMemory, HiddenStates,
    InjectDetails, InjectionConfig, InjectionRule, OverlapMode, ScaleVector, StreamMemory,
};
pub use pipeline::{ConditioningOutput, Pipeline, StreamConditioning};
pub use plot::{read_train_log, render_distance_histogram, render_loss_curve};
pub use sampler::{euler_integrate, sample_ddpm, sample_flow, sample_generate, SamplerConfig};
pub use schedule::{ddpm_add_noise, flow_interpolate, DdpmSchedule};
pub use registry::{
    build_registry, match_spans, registry_digest, MatchSet, RegistryKey, SpanMatch,
    TokenSequence, TriggerRegistry,
};
pub use tokenizer::{Tokenizer, TokenizerSpec, PAD_ID, UNK_ID};
pub use train::{
    grad_memory, load_adapter, loss_ddpm, loss_flow, run_training, save_adapter, train_step,
    AdamState, AdapterCheckpoint, BatchInputs, GradMode, MemoryGrads, Objective, TrainConfig,
    TrainRecord,
};
