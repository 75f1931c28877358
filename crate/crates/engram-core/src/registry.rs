//! Multi-scale n-gram trigger registries and exact token-id span matching.
//!
//! A registry is built once from a tokenized trigger phrase: it registers
//! every contiguous subspan of length `2..=min(T, max_n)`, plus the full
//! trigger when the trigger is longer than `max_n`. Matching scans tokenized
//! prompts for exact token-id occurrences of registered spans; there is no
//! semantic or approximate matching.

use std::collections::{BTreeSet, VecDeque};

use sha2::{Digest, Sha256};

use crate::error::{EngramError, Result};

/// An ordered sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.ids
    }

    /// Copy of the sequence truncated to at most `max_len` tokens.
    pub fn truncated(&self, max_len: usize) -> TokenSequence {
        TokenSequence::new(self.ids.iter().copied().take(max_len).collect())
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        Self::new(ids)
    }
}

/// A registered span of token ids; always at least a bigram.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegistryKey {
    span: Vec<u32>,
}

impl RegistryKey {
    pub fn new(span: Vec<u32>) -> Result<Self> {
        if span.len() < 2 {
            return Err(EngramError::TriggerTooShort { len: span.len() });
        }
        Ok(Self { span })
    }

    pub fn span(&self) -> &[u32] {
        &self.span
    }

    pub fn len(&self) -> usize {
        self.span.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One exact occurrence of a registered span inside a prompt batch.
///
/// `key` indexes the registry's canonical entry list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanMatch {
    pub batch: usize,
    pub key: usize,
    pub start: usize,
    pub len: usize,
}

/// All matches found in a prompt batch, ordered by (batch, start, len).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchSet {
    matches: Vec<SpanMatch>,
}

impl MatchSet {
    pub fn new(mut matches: Vec<SpanMatch>) -> Self {
        matches.sort_by_key(|m| (m.batch, m.start, m.len));
        Self { matches }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SpanMatch> {
        self.matches.iter()
    }

    pub fn as_slice(&self) -> &[SpanMatch] {
        &self.matches
    }

    pub fn for_batch(&self, batch: usize) -> impl Iterator<Item = &SpanMatch> {
        self.matches.iter().filter(move |m| m.batch == batch)
    }
}

/// Per-stream registry of trigger subspans with an O(L) multi-pattern matcher.
#[derive(Debug, Clone)]
pub struct TriggerRegistry {
    stream_id: String,
    max_n: usize,
    trigger_ids: TokenSequence,
    entries: Vec<RegistryKey>,
    automaton: AcAutomaton,
}

impl TriggerRegistry {
    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn max_n(&self) -> usize {
        self.max_n
    }

    pub fn trigger_ids(&self) -> &TokenSequence {
        &self.trigger_ids
    }

    /// Canonical (sorted) entry list; `SpanMatch::key` indexes into this.
    pub fn entries(&self) -> &[RegistryKey] {
        &self.entries
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, key: usize) -> Option<&RegistryKey> {
        self.entries.get(key)
    }

    pub fn key_index(&self, key: &RegistryKey) -> Option<usize> {
        self.entries.binary_search(key).ok()
    }
}

/// Build the multi-scale registry for one encoder stream.
///
/// Entries are the distinct contiguous subspans of length
/// `2..=min(T, max_n)`, plus the full trigger span when `T > max_n`.
/// Duplicate-content subspans collapse to a single key.
pub fn build_registry(
    trigger_ids: TokenSequence,
    max_n: usize,
    stream_id: &str,
) -> Result<TriggerRegistry> {
    let t = trigger_ids.len();
    if t < 2 {
        return Err(EngramError::TriggerTooShort { len: t });
    }
    if max_n < 2 {
        return Err(EngramError::MaxNTooSmall(max_n));
    }

    let ids = trigger_ids.as_slice();
    let mut spans: BTreeSet<Vec<u32>> = BTreeSet::new();
    for n in 2..=t.min(max_n) {
        for window in ids.windows(n) {
            spans.insert(window.to_vec());
        }
    }
    if t > max_n {
        spans.insert(ids.to_vec());
    }

    let entries: Vec<RegistryKey> = spans
        .into_iter()
        .map(|span| RegistryKey::new(span).expect("spans have length >= 2"))
        .collect();
    let automaton = AcAutomaton::build(&entries);

    Ok(TriggerRegistry {
        stream_id: stream_id.to_string(),
        max_n,
        trigger_ids,
        entries,
        automaton,
    })
}

/// Find every exact occurrence of every registered span in a prompt batch.
///
/// Overlapping and nested occurrences are all reported. The result is
/// deterministically ordered by (batch, start, len).
pub fn match_spans(registry: &TriggerRegistry, batch: &[TokenSequence]) -> MatchSet {
    let mut matches = Vec::new();
    for (b, seq) in batch.iter().enumerate() {
        for (start, key) in registry.automaton.find_all(seq.as_slice()) {
            matches.push(SpanMatch {
                batch: b,
                key,
                start,
                len: registry.entries[key].len(),
            });
        }
    }
    MatchSet::new(matches)
}

/// Stable content digest over (stream_id, max_n, trigger_ids, sorted entries).
///
/// Recorded in adapter checkpoints so a checkpoint can be rejected when the
/// registry it was trained against has changed.
pub fn registry_digest(registry: &TriggerRegistry) -> String {
    digest_of_parts(
        &registry.stream_id,
        registry.max_n,
        registry.trigger_ids.as_slice(),
        registry.entries.iter().map(|e| e.span()),
    )
}

/// Canonical digest helper; entries are sorted internally, so the result is
/// invariant under supply order.
pub(crate) fn digest_of_parts<'a>(
    stream_id: &str,
    max_n: usize,
    trigger_ids: &[u32],
    entries: impl Iterator<Item = &'a [u32]>,
) -> String {
    let mut sorted: Vec<&[u32]> = entries.collect();
    sorted.sort();
    sorted.dedup();

    let mut hasher = Sha256::new();
    hasher.update(b"engram-registry-v1");
    hasher.update((stream_id.len() as u64).to_le_bytes());
    hasher.update(stream_id.as_bytes());
    hasher.update((max_n as u64).to_le_bytes());
    hasher.update((trigger_ids.len() as u64).to_le_bytes());
    for &id in trigger_ids {
        hasher.update(id.to_le_bytes());
    }
    hasher.update((sorted.len() as u64).to_le_bytes());
    for span in sorted {
        hasher.update((span.len() as u64).to_le_bytes());
        for &id in span {
            hasher.update(id.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Aho-Corasick automaton over token ids.
///
/// Transitions use `BTreeMap` so construction and scanning are fully
/// deterministic.
#[derive(Debug, Clone)]
struct AcAutomaton {
    nodes: Vec<AcNode>,
    pattern_lens: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
struct AcNode {
    next: std::collections::BTreeMap<u32, usize>,
    fail: usize,
    out: Vec<usize>,
}

impl AcAutomaton {
    fn build(patterns: &[RegistryKey]) -> Self {
        let mut nodes = vec![AcNode::default()];
        let mut pattern_lens = Vec::with_capacity(patterns.len());

        for (p, key) in patterns.iter().enumerate() {
            pattern_lens.push(key.len());
            let mut state = 0usize;
            for &id in key.span() {
                state = match nodes[state].next.get(&id) {
                    Some(&s) => s,
                    None => {
                        nodes.push(AcNode::default());
                        let s = nodes.len() - 1;
                        nodes[state].next.insert(id, s);
                        s
                    }
                };
            }
            nodes[state].out.push(p);
        }

        // BFS failure links; output lists inherit from the failure target.
        let mut queue = VecDeque::new();
        let roots: Vec<usize> = nodes[0].next.values().copied().collect();
        for s in roots {
            nodes[s].fail = 0;
            queue.push_back(s);
        }
        while let Some(state) = queue.pop_front() {
            let edges: Vec<(u32, usize)> =
                nodes[state].next.iter().map(|(&id, &s)| (id, s)).collect();
            for (id, next_state) in edges {
                let mut fail = nodes[state].fail;
                while fail != 0 && !nodes[fail].next.contains_key(&id) {
                    fail = nodes[fail].fail;
                }
                let fail_target = nodes[fail].next.get(&id).copied().unwrap_or(0);
                // a node must not fail to itself
                let fail_target = if fail_target == next_state {
                    0
                } else {
                    fail_target
                };
                nodes[next_state].fail = fail_target;
                let inherited = nodes[fail_target].out.clone();
                nodes[next_state].out.extend(inherited);
                queue.push_back(next_state);
            }
        }

        Self {
            nodes,
            pattern_lens,
        }
    }

    /// All (start, pattern_index) occurrences in `haystack`.
    fn find_all(&self, haystack: &[u32]) -> Vec<(usize, usize)> {
        let mut hits = Vec::new();
        let mut state = 0usize;
        for (pos, &id) in haystack.iter().enumerate() {
            while state != 0 && !self.nodes[state].next.contains_key(&id) {
                state = self.nodes[state].fail;
            }
            state = self.nodes[state].next.get(&id).copied().unwrap_or(0);
            for &p in &self.nodes[state].out {
                hits.push((pos + 1 - self.pattern_lens[p], p));
            }
        }
        hits
    }
}
