//! Single-file TOML run configuration.
//!
//! One `RunConfig` describes a full run: frozen backbone shape, per-stream
//! tokenizers, trigger registry, adapter init, schedule, sampler, training
//! hyperparameters, and the planted concept. Every CLI subcommand takes the
//! same file, so a run is reproducible from the config plus its seeds alone.
//!
//! Tokenizer vocabularies are rebuilt from the trigger and context pool at
//! load time rather than serialized; the registry digest recorded in
//! checkpoints guards against drift.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, Site, StreamConfig, Topology, ToyBackbone};
use crate::error::{EngramError, Result};
use crate::eval::SyntheticConcept;
use crate::memory::{EngramMemory, StreamMemory};
use crate::pipeline::Pipeline;
use crate::registry::build_registry;
use crate::sampler::SamplerConfig;
use crate::schedule::DdpmSchedule;
use crate::tokenizer::{Tokenizer, TokenizerSpec};
use crate::train::{Objective, TrainConfig};
use crate::util::component_seed;

/// One conditioning stream: shape plus tokenizer normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSection {
    pub stream_id: String,
    pub max_len: usize,
    pub width: usize,
    pub site: Site,
    #[serde(default = "TokenizerSpec::default")]
    pub tokenizer: TokenizerSpec,
}

/// Linear DDPM beta schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSection {
    pub fn build(&self) -> Result<DdpmSchedule> {
        DdpmSchedule::linear(self.t_steps, self.beta_start, self.beta_end)
    }
}

/// Complete description of a run; the single source of truth for the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Trigger phrase registered across all streams.
    pub trigger: String,
    /// Largest n-gram length kept in the registry.
    pub max_n: usize,
    /// Seed for adapter initialization (per-stream sub-seeds are derived).
    pub memory_seed: u64,
    /// Stddev of the concept-table init; scales always start at zero.
    pub init_std: f64,
    pub topology: Topology,
    pub latent_dim: usize,
    pub hidden: usize,
    pub frozen_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proj_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proj_len: Option<usize>,
    pub streams: Vec<StreamSection>,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    /// Planted concept for dataset construction and binding evaluation.
    pub concept: SyntheticConcept,
    /// Supervised pairs generated for training.
    pub n_pairs: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| EngramError::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| EngramError::InvalidConfig(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.trigger.trim().is_empty() {
            return Err(EngramError::InvalidConfig("empty trigger".into()));
        }
        if self.max_n < 2 {
            return Err(EngramError::MaxNTooSmall(self.max_n));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(EngramError::InvalidConfig(format!(
                "init_std must be finite and non-negative, got {}",
                self.init_std
            )));
        }
        if self.streams.is_empty() {
            return Err(EngramError::InvalidConfig("no streams configured".into()));
        }
        let expected_streams = match self.topology {
            Topology::SingleStream | Topology::ProjectedStream => 1,
            Topology::TriStreamLayout => 3,
        };
        if self.streams.len() != expected_streams {
            return Err(EngramError::InvalidConfig(format!(
                "{:?} needs {expected_streams} stream(s), got {}",
                self.topology,
                self.streams.len()
            )));
        }
        for s in &self.streams {
            if s.stream_id.trim().is_empty() {
                return Err(EngramError::InvalidConfig("blank stream_id".into()));
            }
            if s.max_len < 1 || s.width < 1 {
                return Err(EngramError::InvalidConfig(format!(
                    "stream {}: max_len and width must be positive",
                    s.stream_id
                )));
            }
        }
        if self.n_pairs < 1 {
            return Err(EngramError::InvalidConfig("n_pairs must be positive".into()));
        }
        self.train.validate()?;
        self.concept.validate()?;
        if self.concept.trigger != self.trigger {
            return Err(EngramError::InvalidConfig(format!(
                "concept trigger {:?} differs from run trigger {:?}",
                self.concept.trigger, self.trigger
            )));
        }
        if self.concept.latent_dim() != self.latent_dim {
            return Err(EngramError::InvalidConfig(format!(
                "concept mu has {} dims, latent_dim is {}",
                self.concept.latent_dim(),
                self.latent_dim
            )));
        }
        // Remaining shape rules (positive dims, projection fields, schedule
        // betas) are enforced by the builders below.
        Ok(())
    }

    /// Corpus the per-stream vocabularies are built from.
    fn corpus(&self) -> Vec<String> {
        let mut lines = vec![self.trigger.clone()];
        lines.extend(self.concept.context_pool.iter().cloned());
        lines
    }

    /// Construct the frozen backbone, tokenizers, fresh adapter, and
    /// schedule described by this config.
    pub fn build_pipeline(&self) -> Result<Pipeline> {
        self.validate()?;
        let corpus = self.corpus();
        let refs: Vec<&str> = corpus.iter().map(String::as_str).collect();
        let mut stream_cfgs = Vec::with_capacity(self.streams.len());
        let mut tokenizers = Vec::with_capacity(self.streams.len());
        let mut memories = Vec::with_capacity(self.streams.len());
        for s in &self.streams {
            let tok = Tokenizer::from_corpus(refs.iter().copied(), s.tokenizer);
            let registry = build_registry(tok.encode(&self.trigger), self.max_n, &s.stream_id)?;
            let seed = component_seed(self.memory_seed, &format!("mem.{}", s.stream_id));
            memories.push(StreamMemory::init(registry, s.width, seed, self.init_std));
            stream_cfgs.push(StreamConfig {
                stream_id: s.stream_id.clone(),
                vocab_size: tok.vocab_size(),
                max_len: s.max_len,
                width: s.width,
                site: s.site,
            });
            tokenizers.push(tok);
        }
        let spec = BackboneSpec {
            topology: self.topology,
            streams: stream_cfgs,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            frozen_seed: self.frozen_seed,
            proj_width: self.proj_width,
            proj_len: self.proj_len,
        };
        let backbone = ToyBackbone::new(spec)?;
        Pipeline::new(
            backbone,
            tokenizers,
            EngramMemory { streams: memories },
            self.train.injection,
            self.schedule.build()?,
            self.sampler,
        )
    }

    /// Desk-scale defaults: small enough to train in seconds, large enough
    /// to exercise every layout rule of the chosen topology.
    pub fn desk_default(topology: Topology) -> Self {
        let streams = match topology {
            Topology::SingleStream | Topology::ProjectedStream => vec![StreamSection {
                stream_id: "enc".into(),
                max_len: 16,
                width: 24,
                site: Site::Final,
                tokenizer: TokenizerSpec::default(),
            }],
            Topology::TriStreamLayout => vec![
                StreamSection {
                    stream_id: "clip_a".into(),
                    max_len: 12,
                    width: 12,
                    site: Site::Penultimate,
                    tokenizer: TokenizerSpec::default(),
                },
                StreamSection {
                    stream_id: "clip_b".into(),
                    max_len: 12,
                    width: 20,
                    site: Site::Penultimate,
                    tokenizer: TokenizerSpec::default(),
                },
                StreamSection {
                    stream_id: "t5".into(),
                    max_len: 16,
                    width: 48,
                    site: Site::Final,
                    tokenizer: TokenizerSpec {
                        lowercase: false,
                        split_punct: false,
                    },
                },
            ],
        };
        let (proj_width, proj_len) = match topology {
            Topology::ProjectedStream => (Some(32), Some(20)),
            _ => (None, None),
        };
        // Objectives are tied to topologies: ancestral DDPM conditions the
        // single stream, the layout topologies train and sample under the
        // flow objective. Learning rates are tuned per objective; the flow
        // drift target is reachable at a higher rate than DDPM tolerates.
        let (objective, lr_embed, lr_scale) = match topology {
            Topology::SingleStream => (Objective::Ddpm, 3e-2, 3e-3),
            _ => (Objective::Flow, 1e-1, 1e-2),
        };
        let concept = SyntheticConcept {
            trigger: "Aldric Vortex-9 CyberNebula".into(),
            mu: vec![1.5; 8],
            sigma: 1.0,
            base_mu: vec![0.0; 8],
            min_separation: 4.0,
            context_pool: [
                "lantern", "orchard", "gravel", "monsoon", "thimble", "quartz", "willow",
                "harbor", "ember", "fjord", "saffron", "dune", "copper", "meadow", "anvil",
                "tundra",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        };
        Self {
            trigger: concept.trigger.clone(),
            max_n: 7,
            memory_seed: 1,
            init_std: 0.2,
            topology,
            latent_dim: 8,
            hidden: 64,
            frozen_seed: 7,
            proj_width,
            proj_len,
            streams,
            // Short schedule: over T steps the ancestral pass amplifies
            // denoiser drift by roughly exp(sum beta / 2), and the frozen
            // random backbone supplies no mean reversion of its own.
            schedule: ScheduleSection {
                t_steps: 50,
                beta_start: 1e-4,
                beta_end: 2e-2,
            },
            sampler: SamplerConfig::default(),
            train: TrainConfig {
                objective,
                lr_embed,
                lr_scale,
                steps: 5000,
                batch_size: 8,
                ..TrainConfig::default()
            },
            concept,
            n_pairs: 5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate_and_build_for_every_topology() {
        for topology in [
            Topology::SingleStream,
            Topology::TriStreamLayout,
            Topology::ProjectedStream,
        ] {
            let cfg = RunConfig::desk_default(topology);
            cfg.validate().unwrap();
            let p = cfg.build_pipeline().unwrap();
            assert_eq!(p.backbone().spec().topology, topology);
            assert_eq!(p.backbone().spec().latent_dim, 8);
            assert_eq!(p.num_streams(), cfg.streams.len());
            // Fresh adapters start silent: zero scales on every stream.
            for mem in &p.memory.streams {
                assert!(mem.scale.values().iter().all(|&v| v == 0.0));
            }
            // Trigger tokenizes to five tokens per lowercased stream, so
            // the registry holds 4+3+2+1 n-gram keys.
            let ms = p.match_all(&[cfg.trigger.clone()]);
            assert!(ms.iter().all(|m| !m.is_empty()));
        }
    }

    #[test]
    fn toml_round_trip_preserves_the_config() {
        for topology in [
            Topology::SingleStream,
            Topology::TriStreamLayout,
            Topology::ProjectedStream,
        ] {
            let cfg = RunConfig::desk_default(topology);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("run.toml");
            cfg.save(&path).unwrap();
            let loaded = RunConfig::load(&path).unwrap();
            assert_eq!(cfg, loaded);
        }
    }

    #[test]
    fn validation_rejects_inconsistent_configs() {
        let good = RunConfig::desk_default(Topology::SingleStream);

        let mut c = good.clone();
        c.max_n = 1;
        assert!(c.validate().is_err());

        let mut c = good.clone();
        c.trigger = "Blorptrix Quantum-Falcon".into();
        assert!(c.validate().is_err(), "concept trigger must match");

        let mut c = good.clone();
        c.streams.push(c.streams[0].clone());
        assert!(c.validate().is_err(), "single_stream takes one stream");

        let mut c = good.clone();
        c.concept.mu = vec![2.0; 4];
        c.concept.base_mu = vec![0.0; 4];
        assert!(c.validate().is_err(), "concept dim must match latent_dim");

        let mut c = good.clone();
        c.train.lr_embed = 0.0;
        assert!(c.validate().is_err());

        let mut c = good.clone();
        c.n_pairs = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn malformed_toml_is_reported_as_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "trigger = [not toml").unwrap();
        assert!(matches!(
            RunConfig::load(&path),
            Err(EngramError::InvalidConfig(_))
        ));
        // A syntactically valid file missing required sections also fails.
        std::fs::write(&path, "trigger = \"x y\"\n").unwrap();
        assert!(matches!(
            RunConfig::load(&path),
            Err(EngramError::InvalidConfig(_))
        ));
    }

    #[test]
    fn repo_configs_match_desk_defaults() {
        let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (name, topology) in [
            ("single_stream.toml", Topology::SingleStream),
            ("tri_stream_layout.toml", Topology::TriStreamLayout),
            ("projected_stream.toml", Topology::ProjectedStream),
        ] {
            let cfg = RunConfig::load(&root.join(name)).unwrap();
            assert_eq!(cfg, RunConfig::desk_default(topology), "{name} drifted");
        }
    }

    #[test]
    fn built_pipelines_are_deterministic_in_the_config() {
        let cfg = RunConfig::desk_default(Topology::TriStreamLayout);
        let a = cfg.build_pipeline().unwrap();
        let b = cfg.build_pipeline().unwrap();
        assert_eq!(
            a.backbone().frozen_digest(),
            b.backbone().frozen_digest()
        );
        for (ma, mb) in a.memory.streams.iter().zip(&b.memory.streams) {
            assert_eq!(ma.table.vectors(), mb.table.vectors());
        }
        let prompt = vec!["Aldric Vortex-9 CyberNebula over the meadow".to_string()];
        let sa = a.sample(&prompt, 5, true).unwrap();
        let sb = b.sample(&prompt, 5, true).unwrap();
        assert_eq!(sa, sb);
    }
}
