//! Small shared helpers: seeding, f32 snapping, bitwise comparison.

use sha2::{Digest, Sha256};

/// Round an `f64` to the nearest `f32`-representable value.
///
/// Adapter parameters are kept at f32 resolution so the 32-bit checkpoint
/// payload round-trips without loss; optimizer state stays full f64.
pub fn snap_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Derive a stable sub-seed from a base seed and a component tag.
///
/// Uses SHA-256 so the mapping is identical across platforms and runs.
pub fn component_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Bit-level equality of two f64 slices (NaN-safe, distinguishes -0.0).
pub fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Relative error with a small floor so exact zero pairs compare equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Map `f` over `items` on up to `threads` OS threads, preserving order.
///
/// Results are written into per-index slots, so the output is identical for
/// any thread count.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<R>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (slot_chunk, item_chunk) in slots.chunks_mut(chunk).zip(items.chunks(chunk)) {
            let f = &f;
            scope.spawn(move || {
                for (slot, item) in slot_chunk.iter_mut().zip(item_chunk.iter()) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}
