//! Adapter-only checkpoint I/O.
//!
//! File layout: 8-byte magic, u64 LE header length, a JSON manifest of
//! exactly that length, then one raw little-endian f32 block per stream
//! (concept table row-major, then the scale vector). The manifest records
//! per-stream byte offsets, so the payload is self-describing and trivially
//! diffable. No frozen-backbone parameter is ever stored. Because live
//! parameters are snapped to f32-representable values, the f32 payload
//! round-trips every float bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EngramError, Result};
use crate::memory::{EngramMemory, InjectionConfig};
use crate::registry::registry_digest;

use super::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ENGMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub stream_id: String,
    pub registry_digest: String,
    pub num_keys: usize,
    pub width: usize,
    /// Byte offset of the concept-vector block within the payload.
    pub vectors_offset: u64,
    /// Byte offset of the scale block within the payload.
    pub scale_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub injection: InjectionConfig,
    pub train: TrainConfig,
    pub streams: Vec<StreamManifest>,
}

/// An adapter checkpoint held in memory: manifest plus raw payload.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    pub manifest: CheckpointManifest,
    pub payload: Vec<u8>,
}

impl AdapterCheckpoint {
    /// Snapshot the adapter state of `memory` under `cfg` at `step`.
    pub fn from_memory(memory: &EngramMemory, cfg: &TrainConfig, step: usize) -> Self {
        let mut streams = Vec::with_capacity(memory.streams.len());
        let mut payload = Vec::new();
        for sm in &memory.streams {
            let vectors_offset = payload.len() as u64;
            for &v in sm.table.vectors().iter() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let scale_offset = payload.len() as u64;
            for &v in sm.scale.values().iter() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            streams.push(StreamManifest {
                stream_id: sm.stream_id().to_string(),
                registry_digest: registry_digest(&sm.registry),
                num_keys: sm.table.num_keys(),
                width: sm.table.width(),
                vectors_offset,
                scale_offset,
            });
        }
        Self {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_VERSION,
                step: step as u64,
                injection: cfg.injection,
                train: cfg.clone(),
                streams,
            },
            payload,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(EngramError::CheckpointFormat(format!(
                "file too short: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(EngramError::CheckpointFormat("bad magic".into()));
        }
        let header_len =
            u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() < 16 + header_len {
            return Err(EngramError::CheckpointFormat(format!(
                "truncated header: want {header_len} bytes, have {}",
                bytes.len() - 16
            )));
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..16 + header_len])
            .map_err(|e| EngramError::CheckpointFormat(format!("manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(EngramError::VersionMismatch(manifest.format_version));
        }
        let payload = bytes[16 + header_len..].to_vec();
        let mut expect = 0u64;
        for s in &manifest.streams {
            if s.vectors_offset != expect {
                return Err(EngramError::CheckpointFormat(format!(
                    "stream {} vectors offset {}, expected {expect}",
                    s.stream_id, s.vectors_offset
                )));
            }
            expect += (s.num_keys * s.width * 4) as u64;
            if s.scale_offset != expect {
                return Err(EngramError::CheckpointFormat(format!(
                    "stream {} scale offset {}, expected {expect}",
                    s.stream_id, s.scale_offset
                )));
            }
            expect += (s.width * 4) as u64;
        }
        if payload.len() as u64 != expect {
            return Err(EngramError::CheckpointFormat(format!(
                "payload length {}, expected {expect}",
                payload.len()
            )));
        }
        Ok(Self { manifest, payload })
    }

    /// Write the checkpoint back into `memory`, verifying stream identity,
    /// shapes, and registry digests first.
    pub fn apply(&self, memory: &mut EngramMemory) -> Result<()> {
        if self.manifest.streams.len() != memory.streams.len() {
            return Err(EngramError::CheckpointFormat(format!(
                "checkpoint has {} streams, memory has {}",
                self.manifest.streams.len(),
                memory.streams.len()
            )));
        }
        for (s, sm) in self.manifest.streams.iter().zip(&memory.streams) {
            if s.stream_id != sm.stream_id() {
                return Err(EngramError::CheckpointFormat(format!(
                    "stream {} in checkpoint, {} in memory",
                    s.stream_id,
                    sm.stream_id()
                )));
            }
            let found = registry_digest(&sm.registry);
            if s.registry_digest != found {
                return Err(EngramError::DigestMismatch {
                    stream: s.stream_id.clone(),
                    expected: s.registry_digest.clone(),
                    found,
                });
            }
            if s.num_keys != sm.table.num_keys() || s.width != sm.table.width() {
                return Err(EngramError::CheckpointFormat(format!(
                    "stream {} shape {}x{} in checkpoint, {}x{} in memory",
                    s.stream_id,
                    s.num_keys,
                    s.width,
                    sm.table.num_keys(),
                    sm.table.width()
                )));
            }
        }
        for (s, sm) in self.manifest.streams.iter().zip(&mut memory.streams) {
            let mut off = s.vectors_offset as usize;
            for v in sm.table.vectors_mut().iter_mut() {
                *v = read_f32(&self.payload, &mut off);
            }
            for v in sm.scale.values_mut().iter_mut() {
                *v = read_f32(&self.payload, &mut off);
            }
        }
        Ok(())
    }
}

fn read_f32(payload: &[u8], off: &mut usize) -> f64 {
    let v = f32::from_le_bytes(payload[*off..*off + 4].try_into().expect("4 bytes"));
    *off += 4;
    v as f64
}

/// Serialize the adapter to `path`; returns the written checkpoint.
pub fn save_adapter(
    memory: &EngramMemory,
    cfg: &TrainConfig,
    step: usize,
    path: &Path,
) -> Result<AdapterCheckpoint> {
    let ckpt = AdapterCheckpoint::from_memory(memory, cfg, step);
    fs::write(path, ckpt.to_bytes())?;
    Ok(ckpt)
}

pub fn load_adapter(path: &Path) -> Result<AdapterCheckpoint> {
    AdapterCheckpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::StreamMemory;
    use crate::registry::build_registry;
    use crate::tokenizer::{Tokenizer, TokenizerSpec};
    use crate::util::snap_f32;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn memory_for(trigger: &str, seed: u64) -> EngramMemory {
        let tok = Tokenizer::from_corpus(
            vec![trigger, "a quiet harbor at dusk"],
            TokenizerSpec::default(),
        );
        let mut streams = Vec::new();
        for (i, width) in [6usize, 9].iter().enumerate() {
            let registry =
                build_registry(tok.encode(trigger), 7, &format!("s{i}")).unwrap();
            let mut sm = StreamMemory::init(registry, *width, seed + i as u64, 0.05);
            // nonzero scales so the payload is not trivially zero
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1));
            for v in sm.scale.values_mut().iter_mut() {
                *v = snap_f32(rng.random_range(-0.5..0.5));
            }
            streams.push(sm);
        }
        EngramMemory { streams }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.ckpt");
        let src = memory_for("Aldric Vortex-9 CyberNebula", 3);
        let cfg = TrainConfig::default();
        save_adapter(&src, &cfg, 41, &path).unwrap();

        let ckpt = load_adapter(&path).unwrap();
        assert_eq!(ckpt.manifest.step, 41);
        assert_eq!(ckpt.manifest.train, cfg);
        // same registries, different parameter values
        let mut dst = memory_for("Aldric Vortex-9 CyberNebula", 999);
        ckpt.apply(&mut dst).unwrap();
        for (a, b) in src.streams.iter().zip(&dst.streams) {
            let pairs = a
                .table
                .vectors()
                .iter()
                .zip(b.table.vectors().iter())
                .chain(a.scale.values().iter().zip(b.scale.values().iter()));
            for (&x, &y) in pairs {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn mismatched_trigger_is_rejected_by_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.ckpt");
        let src = memory_for("Aldric Vortex-9 CyberNebula", 3);
        save_adapter(&src, &TrainConfig::default(), 0, &path).unwrap();
        let ckpt = load_adapter(&path).unwrap();
        let mut other = memory_for("Blorptrix Quantum-Falcon", 3);
        match ckpt.apply(&mut other) {
            Err(EngramError::DigestMismatch { stream, .. }) => assert_eq!(stream, "s0"),
            other => panic!("expected digest mismatch, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let src = memory_for("Aldric Vortex-9 CyberNebula", 3);
        let mut ckpt = AdapterCheckpoint::from_memory(&src, &TrainConfig::default(), 0);
        ckpt.manifest.format_version = CHECKPOINT_VERSION + 1;
        match AdapterCheckpoint::from_bytes(&ckpt.to_bytes()) {
            Err(EngramError::VersionMismatch(v)) => assert_eq!(v, CHECKPOINT_VERSION + 1),
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let src = memory_for("Aldric Vortex-9 CyberNebula", 3);
        let bytes = AdapterCheckpoint::from_memory(&src, &TrainConfig::default(), 0).to_bytes();
        // drop the last payload bytes
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            AdapterCheckpoint::from_bytes(cut),
            Err(EngramError::CheckpointFormat(_))
        ));
        // corrupt the magic
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(
            AdapterCheckpoint::from_bytes(&bad),
            Err(EngramError::CheckpointFormat(_))
        ));
        // cut into the header
        assert!(matches!(
            AdapterCheckpoint::from_bytes(&bytes[..20]),
            Err(EngramError::CheckpointFormat(_))
        ));
        assert!(matches!(
            AdapterCheckpoint::from_bytes(&bytes[..4]),
            Err(EngramError::CheckpointFormat(_))
        ));
    }

    #[test]
    fn file_size_follows_the_count_law() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.ckpt");
        let src = memory_for("Aldric Vortex-9 CyberNebula", 7);
        save_adapter(&src, &TrainConfig::default(), 0, &path).unwrap();
        let file_len = std::fs::metadata(&path).unwrap().len() as usize;
        let ckpt = load_adapter(&path).unwrap();
        let payload: usize = src
            .streams
            .iter()
            .map(|sm| (sm.table.num_keys() * sm.table.width() + sm.scale.width()) * 4)
            .sum();
        let header = serde_json::to_vec(&ckpt.manifest).unwrap().len();
        assert_eq!(file_len, 16 + header + payload);
        assert_eq!(ckpt.payload.len(), payload);
        // trigger tokenized to 5 ids under punctuation splitting: 10 keys
        assert_eq!(src.streams[0].table.num_keys(), 10);
    }
}
