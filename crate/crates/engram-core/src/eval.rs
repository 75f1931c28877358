//! Synthetic binding datasets and the matched-seed evaluation harness.
//!
//! A [`SyntheticConcept`] pairs a multi-token trigger with a target latent
//! distribution N(mu, sigma^2 I) that is well separated from the backbone's
//! base behaviour. Datasets embed the trigger inside random context drawn
//! from a pool split into disjoint train / held-out halves, so held-out
//! prompts exercise unseen context tokens and trigger positions.
//!
//! The harness has three jobs:
//!   * `compare_matched_seed` samples base vs. memory-enabled latents under
//!     identical seeds and records bitwise equality per prompt,
//!   * `binding_score` reduces generations against the concept target,
//!   * `locality_audit` hard-fails if any hidden state outside a matched
//!     span moved at all.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EngramError, Result};
use crate::memory::HiddenStates;
use crate::pipeline::Pipeline;
use crate::registry::MatchSet;
use crate::util::{component_seed, parallel_map};

/// Environment variable controlling harness parallelism (default 1).
pub const THREADS_ENV: &str = "ENGRAM_THREADS";

/// Number of worker threads for prompt-parallel evaluation.
///
/// Unset, empty, or unparseable values fall back to 1 so the harness stays
/// deterministic-by-default; results are order-fixed either way.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// A planted concept: trigger phrase plus target latent distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConcept {
    /// Multi-token trigger phrase registered with the memory adapter.
    pub trigger: String,
    /// Target latent mean, length d_z.
    pub mu: Vec<f64>,
    /// Isotropic target standard deviation.
    pub sigma: f64,
    /// Latent mean of the frozen backbone's base behaviour.
    pub base_mu: Vec<f64>,
    /// Required separation between mu and base_mu, in units of sigma.
    pub min_separation: f64,
    /// Context vocabulary; first half trains, second half is held out.
    pub context_pool: Vec<String>,
}

impl SyntheticConcept {
    pub fn validate(&self) -> Result<()> {
        if self.trigger.trim().is_empty() {
            return Err(EngramError::InvalidConfig("empty trigger".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(EngramError::InvalidConfig(format!(
                "sigma must be finite and positive, got {}",
                self.sigma
            )));
        }
        if self.mu.is_empty() || self.mu.len() != self.base_mu.len() {
            return Err(EngramError::InvalidConfig(format!(
                "mu has {} dims, base_mu has {}",
                self.mu.len(),
                self.base_mu.len()
            )));
        }
        if self.mu.iter().chain(&self.base_mu).any(|v| !v.is_finite()) {
            return Err(EngramError::InvalidConfig(
                "non-finite concept mean".into(),
            ));
        }
        if !(self.min_separation.is_finite() && self.min_separation > 0.0) {
            return Err(EngramError::InvalidConfig(format!(
                "min_separation must be finite and positive, got {}",
                self.min_separation
            )));
        }
        let sep = l2_distance(&self.mu, &self.base_mu);
        if sep < self.min_separation * self.sigma {
            return Err(EngramError::InvalidConfig(format!(
                "concept separation {sep:.4} below {} sigma ({})",
                self.min_separation,
                self.min_separation * self.sigma
            )));
        }
        if self.context_pool.len() < 8 {
            return Err(EngramError::InvalidConfig(format!(
                "context pool needs at least 8 entries, got {}",
                self.context_pool.len()
            )));
        }
        // Control prompts are built from the pool alone; any pool word that
        // reappears inside the trigger could form a matching n-gram key.
        let trig = self.trigger.to_lowercase();
        for word in &self.context_pool {
            let w = word.trim();
            if w.is_empty() {
                return Err(EngramError::InvalidConfig(
                    "blank context pool entry".into(),
                ));
            }
            if trig.contains(&w.to_lowercase()) {
                return Err(EngramError::InvalidConfig(format!(
                    "context pool word {w:?} overlaps the trigger"
                )));
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.len()
    }

    /// Context words used when building training prompts.
    pub fn train_pool(&self) -> &[String] {
        &self.context_pool[..self.context_pool.len() / 2]
    }

    /// Context words reserved for held-out prompts.
    pub fn holdout_pool(&self) -> &[String] {
        &self.context_pool[self.context_pool.len() / 2..]
    }
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One prompt with the trigger planted at a random position among 3..=6
/// context words drawn (with replacement) from `pool`.
fn prompt_with_trigger(concept: &SyntheticConcept, pool: &[String], rng: &mut ChaCha8Rng) -> String {
    let n_ctx = rng.random_range(3..=6usize);
    let slot = rng.random_range(0..=n_ctx);
    let mut words = Vec::with_capacity(n_ctx + 1);
    for i in 0..=n_ctx {
        if i == slot {
            words.push(concept.trigger.clone());
        }
        if i < n_ctx {
            words.push(pool[rng.random_range(0..pool.len())].clone());
        }
    }
    words.join(" ")
}

fn prompt_without_trigger(pool: &[String], rng: &mut ChaCha8Rng) -> String {
    let n_ctx = rng.random_range(3..=6usize);
    let words: Vec<String> = (0..n_ctx)
        .map(|_| pool[rng.random_range(0..pool.len())].clone())
        .collect();
    words.join(" ")
}

/// Build `n_pairs` supervised (prompt, z0) pairs from the training half of
/// the context pool, z0 ~ N(mu, sigma^2 I).
///
/// Draw order per pair is fixed (context count, slot, words, then latent
/// row), so the dataset is a pure function of (concept, n_pairs, seed).
pub fn make_dataset(
    concept: &SyntheticConcept,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<(String, Vec<f64>)>> {
    concept.validate()?;
    if n_pairs == 0 {
        return Err(EngramError::InvalidConfig("n_pairs must be positive".into()));
    }
    let pool = concept.train_pool();
    let d_z = concept.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let prompt = prompt_with_trigger(concept, pool, &mut rng);
        let mut z0 = Vec::with_capacity(d_z);
        for c in 0..d_z {
            let eps: f64 = StandardNormal.sample(&mut rng);
            z0.push(concept.mu[c] + concept.sigma * eps);
        }
        out.push((prompt, z0));
    }
    Ok(out)
}

/// Trigger-bearing prompts over the held-out half of the context pool.
pub fn holdout_prompts(concept: &SyntheticConcept, n: usize, seed: u64) -> Result<Vec<String>> {
    concept.validate()?;
    let pool = concept.holdout_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| prompt_with_trigger(concept, pool, &mut rng))
        .collect())
}

/// Trigger-free control prompts over the full context pool.
pub fn control_prompts(concept: &SyntheticConcept, n: usize, seed: u64) -> Result<Vec<String>> {
    concept.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| prompt_without_trigger(&concept.context_pool, &mut rng))
        .collect())
}

/// One matched-seed comparison: the same (prompt, seed) sampled with the
/// memory path disabled and enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub prompt: String,
    pub seed: u64,
    /// True if any stream matched a registry key for this prompt.
    pub has_trigger: bool,
    /// True if base and memory-enabled latents are bitwise identical.
    pub bitwise_equal: bool,
    /// Euclidean distance between the two latents.
    pub distance: f64,
    pub base: Vec<f64>,
    pub engram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub num_records: usize,
    pub num_trigger: usize,
    pub num_control: usize,
    /// Every trigger-free record was bitwise identical.
    pub controls_all_bitwise: bool,
    pub max_control_distance: f64,
    pub mean_trigger_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub records: Vec<ComparisonRecord>,
    pub summary: ComparisonSummary,
}

impl ComparisonReport {
    pub fn from_records(records: Vec<ComparisonRecord>) -> Self {
        let mut num_trigger = 0;
        let mut num_control = 0;
        let mut controls_all_bitwise = true;
        let mut max_control_distance = 0.0f64;
        let mut trigger_distance_sum = 0.0;
        for r in &records {
            if r.has_trigger {
                num_trigger += 1;
                trigger_distance_sum += r.distance;
            } else {
                num_control += 1;
                controls_all_bitwise &= r.bitwise_equal;
                max_control_distance = max_control_distance.max(r.distance);
            }
        }
        let mean_trigger_distance = if num_trigger > 0 {
            trigger_distance_sum / num_trigger as f64
        } else {
            0.0
        };
        let summary = ComparisonSummary {
            num_records: records.len(),
            num_trigger,
            num_control,
            controls_all_bitwise,
            max_control_distance,
            mean_trigger_distance,
        };
        Self { records, summary }
    }

    /// Activation-boundary verdict: no trigger-free prompt may move.
    pub fn boundary_holds(&self) -> bool {
        self.summary.controls_all_bitwise
    }
}

/// Run every (prompt, seed) pair with the memory path off and on.
///
/// Work is distributed over `eval_threads()` workers; records are assembled
/// in (prompt, seed) input order regardless of thread count.
pub fn compare_matched_seed(
    pipeline: &Pipeline,
    prompts: &[String],
    seeds: &[u64],
) -> Result<ComparisonReport> {
    if prompts.is_empty() || seeds.is_empty() {
        return Err(EngramError::InvalidConfig(
            "compare needs at least one prompt and one seed".into(),
        ));
    }
    let match_sets = pipeline.match_all(prompts);
    let mut jobs = Vec::with_capacity(prompts.len() * seeds.len());
    for (idx, prompt) in prompts.iter().enumerate() {
        let has_trigger = match_sets
            .iter()
            .any(|ms| ms.iter().any(|m| m.batch == idx));
        for &seed in seeds {
            jobs.push((prompt.clone(), seed, has_trigger));
        }
    }
    let results = parallel_map(&jobs, eval_threads(), |(prompt, seed, has_trigger)| {
        let batch = std::slice::from_ref(prompt);
        let base = pipeline.sample(batch, *seed, false)?;
        let engram = pipeline.sample(batch, *seed, true)?;
        let base_row: Vec<f64> = base.row(0).to_vec();
        let engram_row: Vec<f64> = engram.row(0).to_vec();
        let bitwise_equal = base_row
            .iter()
            .zip(&engram_row)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let distance = l2_distance(&base_row, &engram_row);
        Ok(ComparisonRecord {
            prompt: prompt.clone(),
            seed: *seed,
            has_trigger: *has_trigger,
            bitwise_equal,
            distance,
            base: base_row,
            engram: engram_row,
        })
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport::from_records(records))
}

/// Binding quality on held-out trigger prompts plus a control leak check.
///
/// `trigger_score` is mean ||sample - mu|| / sigma over memory-enabled
/// generations. Note the floor: a sampler that reproduces N(mu, sigma^2 I)
/// exactly still scores E[chi_{d_z}] (about 2.74 at d_z = 8), so scores
/// are comparable against the frozen-base score rather than against 0.
/// `control_score` is the mean base-vs-engram distance on trigger-free
/// prompts and must be exactly 0 for a correct adapter.
pub fn binding_score(
    pipeline: &Pipeline,
    concept: &SyntheticConcept,
    n_eval: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    concept.validate()?;
    if n_eval == 0 {
        return Err(EngramError::InvalidConfig("n_eval must be positive".into()));
    }
    let d_z = pipeline.backbone().spec().latent_dim;
    if concept.latent_dim() != d_z {
        return Err(EngramError::ShapeMismatch(format!(
            "concept mu has {} dims, backbone latent_dim is {d_z}",
            concept.latent_dim()
        )));
    }
    let trigger = holdout_prompts(concept, n_eval, component_seed(seed, "eval.trigger"))?;
    let control = control_prompts(concept, n_eval, component_seed(seed, "eval.control"))?;
    let norm = concept.sigma;

    let trig_jobs: Vec<(usize, String)> = trigger.into_iter().enumerate().collect();
    let trig_scores = parallel_map(&trig_jobs, eval_threads(), |(i, prompt)| {
        let gen_seed = component_seed(seed, &format!("gen.{i}"));
        let sample = pipeline.sample(std::slice::from_ref(prompt), gen_seed, true)?;
        Ok(l2_distance(&sample.row(0).to_vec(), &concept.mu) / norm)
    });
    let trig_scores = trig_scores.into_iter().collect::<Result<Vec<f64>>>()?;

    let ctrl_jobs: Vec<(usize, String)> = control.into_iter().enumerate().collect();
    let ctrl_scores = parallel_map(&ctrl_jobs, eval_threads(), |(i, prompt)| {
        let gen_seed = component_seed(seed, &format!("gen.{i}"));
        let batch = std::slice::from_ref(prompt);
        let base = pipeline.sample(batch, gen_seed, false)?;
        let engram = pipeline.sample(batch, gen_seed, true)?;
        Ok(l2_distance(&base.row(0).to_vec(), &engram.row(0).to_vec()))
    });
    let ctrl_scores = ctrl_scores.into_iter().collect::<Result<Vec<f64>>>()?;

    let trigger_score = trig_scores.iter().sum::<f64>() / n_eval as f64;
    let control_score = ctrl_scores.iter().sum::<f64>() / n_eval as f64;
    Ok((trigger_score, control_score))
}

/// Result of a passing locality audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    /// (batch, pos) cells checked.
    pub positions_checked: usize,
    /// Cells covered by at least one matched span.
    pub covered_positions: usize,
    /// Largest |engram - base| seen inside covered cells.
    pub max_in_span_delta: f64,
}

/// Bitwise audit of an edited hidden-state block against its base.
///
/// Positions outside every matched span must be bit-identical; the first
/// violating (batch, pos, channel) is returned as a hard error. Edits
/// inside spans are legal and only reported by magnitude.
pub fn locality_audit(
    base: &HiddenStates,
    engram: &HiddenStates,
    matches: &MatchSet,
) -> Result<LocalityReport> {
    let (b_sz, seq_len, width) = base.data.dim();
    if engram.data.dim() != base.data.dim() {
        return Err(EngramError::ShapeMismatch(format!(
            "locality audit shapes {:?} vs {:?}",
            base.data.dim(),
            engram.data.dim()
        )));
    }
    let mut covered = vec![false; b_sz * seq_len];
    for m in matches.iter() {
        let end = m.start + m.len;
        if m.batch >= b_sz || end > seq_len {
            return Err(EngramError::MatchOutOfBounds {
                batch: m.batch,
                start: m.start,
                end,
                batch_size: b_sz,
                seq_len,
            });
        }
        for pos in m.start..end {
            covered[m.batch * seq_len + pos] = true;
        }
    }
    let mut covered_positions = 0;
    let mut max_in_span_delta = 0.0f64;
    for b in 0..b_sz {
        for pos in 0..seq_len {
            let inside = covered[b * seq_len + pos];
            covered_positions += inside as usize;
            for ch in 0..width {
                let x = base.data[[b, pos, ch]];
                let y = engram.data[[b, pos, ch]];
                if inside {
                    max_in_span_delta = max_in_span_delta.max((y - x).abs());
                } else if x.to_bits() != y.to_bits() {
                    return Err(EngramError::LocalityViolation {
                        batch: b,
                        pos,
                        channel: ch,
                    });
                }
            }
        }
    }
    Ok(LocalityReport {
        positions_checked: b_sz * seq_len,
        covered_positions,
        max_in_span_delta,
    })
}

/// Write one JSON object per record, then a final summary object tagged
/// with `"summary": true`.
pub fn write_report_jsonl(report: &ComparisonReport, path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    for r in &report.records {
        let line = serde_json::to_string(r)
            .map_err(|e| EngramError::MalformedReport(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    let summary = serde_json::json!({ "summary": true, "data": report.summary });
    writeln!(f, "{summary}")?;
    Ok(())
}

/// Read a report written by [`write_report_jsonl`]. The summary line is
/// recomputed from the records and must agree with the stored one.
pub fn read_report_jsonl(path: &Path) -> Result<ComparisonReport> {
    let f = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut stored: Option<ComparisonSummary> = None;
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| EngramError::MalformedReport(format!("line {}: {e}", lineno + 1)))?;
        if value.get("summary").and_then(|v| v.as_bool()) == Some(true) {
            let data = value
                .get("data")
                .cloned()
                .ok_or_else(|| EngramError::MalformedReport("summary line without data".into()))?;
            stored = Some(
                serde_json::from_value(data)
                    .map_err(|e| EngramError::MalformedReport(e.to_string()))?,
            );
        } else {
            records.push(
                serde_json::from_value(value)
                    .map_err(|e| EngramError::MalformedReport(format!("line {}: {e}", lineno + 1)))?,
            );
        }
    }
    let report = ComparisonReport::from_records(records);
    if let Some(s) = stored {
        if s != report.summary {
            return Err(EngramError::MalformedReport(
                "stored summary disagrees with records".into(),
            ));
        }
    }
    Ok(report)
}

/// Flat per-record metrics table; prompts are indexed, not quoted.
pub fn write_report_csv(report: &ComparisonReport, path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "record,seed,has_trigger,bitwise_equal,distance")?;
    for (i, r) in report.records.iter().enumerate() {
        writeln!(
            f,
            "{i},{},{},{},{:.17e}",
            r.seed, r.has_trigger, r.bitwise_equal, r.distance
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Topology;
    use crate::memory::{InjectionRule, OverlapMode};
    use crate::registry::SpanMatch;
    use crate::train::grad::tests::build_pipeline;
    use ndarray::Array3;

    fn concept(d_z: usize) -> SyntheticConcept {
        SyntheticConcept {
            trigger: "Aldric Vortex-9 CyberNebula".into(),
            mu: vec![3.0; d_z],
            sigma: 0.25,
            base_mu: vec![0.0; d_z],
            min_separation: 4.0,
            context_pool: [
                "lantern", "orchard", "gravel", "monsoon", "thimble", "quartz", "willow",
                "harbor", "ember", "fjord", "saffron", "dune",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    #[test]
    fn concept_validation_rejects_bad_configs() {
        let good = concept(5);
        good.validate().unwrap();

        let mut c = good.clone();
        c.sigma = 0.0;
        assert!(c.validate().is_err());

        let mut c = good.clone();
        c.base_mu = vec![0.0; 4];
        assert!(c.validate().is_err());

        // Separation 4 sigma = 1.0 > ||mu - base_mu||.
        let mut c = good.clone();
        c.mu = vec![0.1, 0.0, 0.0, 0.0, 0.0];
        c.base_mu = vec![0.0; 5];
        assert!(c.validate().is_err());

        let mut c = good.clone();
        c.context_pool.truncate(7);
        assert!(c.validate().is_err());

        // "vortex-9" is a substring of the lowercased trigger.
        let mut c = good.clone();
        c.context_pool[3] = "Vortex-9".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn dataset_prompts_contain_the_trigger_and_controls_do_not() {
        let p = build_pipeline(Topology::SingleStream, 9, InjectionRule::Absolute, OverlapMode::Sum);
        let c = concept(5);
        let data = make_dataset(&c, 40, 7).unwrap();
        assert_eq!(data.len(), 40);
        let prompts: Vec<String> = data.iter().map(|(p, _)| p.clone()).collect();
        for ms in p.match_all(&prompts) {
            for b in 0..prompts.len() {
                assert!(
                    ms.iter().any(|m| m.batch == b),
                    "no trigger match in {:?}",
                    prompts[b]
                );
            }
        }
        let controls = control_prompts(&c, 40, 7).unwrap();
        for ms in p.match_all(&controls) {
            assert!(ms.is_empty(), "control prompt matched the registry");
        }
        // Same (concept, n, seed) must reproduce the dataset exactly.
        let again = make_dataset(&c, 40, 7).unwrap();
        assert_eq!(data, again);
    }

    #[test]
    fn holdout_prompts_use_only_the_reserved_pool_half() {
        let c = concept(5);
        let train_words: Vec<String> =
            c.train_pool().iter().map(|w| w.to_lowercase()).collect();
        let holdout = holdout_prompts(&c, 50, 3).unwrap();
        for prompt in &holdout {
            let lower = prompt.to_lowercase();
            for w in &train_words {
                assert!(
                    !lower.split_whitespace().any(|tok| tok == w),
                    "train word {w:?} leaked into held-out prompt {prompt:?}"
                );
            }
            assert!(lower.contains("aldric"));
        }
        // And the training set never uses held-out context words.
        let holdout_words: Vec<String> =
            c.holdout_pool().iter().map(|w| w.to_lowercase()).collect();
        for (prompt, _) in make_dataset(&c, 50, 3).unwrap() {
            let lower = prompt.to_lowercase();
            for w in &holdout_words {
                assert!(!lower.split_whitespace().any(|tok| tok == w));
            }
        }
    }

    #[test]
    fn dataset_latents_follow_the_target_distribution() {
        let c = concept(5);
        let n = 10_000;
        let data = make_dataset(&c, n, 11).unwrap();
        let d_z = c.latent_dim();
        let mut mean = vec![0.0f64; d_z];
        for (_, z0) in &data {
            for (acc, v) in mean.iter_mut().zip(z0) {
                *acc += v;
            }
        }
        for acc in &mut mean {
            *acc /= n as f64;
        }
        // Standard error is sigma / 100; allow three of them.
        let tol = 3.0 * c.sigma / (n as f64).sqrt();
        let err = l2_distance(&mean, &c.mu);
        assert!(
            err <= tol * (d_z as f64).sqrt(),
            "sample mean off target: {err} vs {tol}"
        );
        let mut var = 0.0;
        for (_, z0) in &data {
            for (v, m) in z0.iter().zip(&mean) {
                var += (v - m) * (v - m);
            }
        }
        var /= (n * d_z) as f64;
        assert!((var.sqrt() - c.sigma).abs() < 0.01 * c.sigma);
    }

    #[test]
    fn matched_seed_comparison_separates_trigger_and_control() {
        let p = build_pipeline(
            Topology::SingleStream,
            5,
            InjectionRule::Absolute,
            OverlapMode::Sum,
        );
        let prompts = vec![
            "a quiet lantern by the harbor".to_string(),
            "portrait of Aldric Vortex-9 CyberNebula at dawn".to_string(),
        ];
        let seeds = vec![1u64, 2, 3];
        let report = compare_matched_seed(&p, &prompts, &seeds).unwrap();
        assert_eq!(report.records.len(), 6);
        assert_eq!(report.summary.num_control, 3);
        assert_eq!(report.summary.num_trigger, 3);
        assert!(report.boundary_holds());
        assert_eq!(report.summary.max_control_distance, 0.0);
        for r in &report.records {
            assert_eq!(r.has_trigger, r.prompt.contains("Aldric"));
            if r.has_trigger {
                // Nonzero random scales in the fixture move matched prompts.
                assert!(!r.bitwise_equal);
                assert!(r.distance > 0.0);
            } else {
                assert!(r.bitwise_equal);
            }
        }
        // Records appear in (prompt, seed) order independent of threads.
        let order: Vec<(String, u64)> = report
            .records
            .iter()
            .map(|r| (r.prompt.clone(), r.seed))
            .collect();
        let mut expected = Vec::new();
        for prompt in &prompts {
            for &s in &seeds {
                expected.push((prompt.clone(), s));
            }
        }
        assert_eq!(order, expected);
    }

    #[test]
    fn identity_adapter_is_bitwise_silent_everywhere() {
        let mut p = build_pipeline(
            Topology::TriStreamLayout,
            6,
            InjectionRule::RelativeNorm,
            OverlapMode::Mean,
        );
        for stream in &mut p.memory.streams {
            stream.scale.values_mut().fill(0.0);
        }
        let prompts = vec![
            "gravel monsoon thimble".to_string(),
            "Aldric Vortex-9 CyberNebula under saffron skies".to_string(),
        ];
        let report = compare_matched_seed(&p, &prompts, &[4, 9]).unwrap();
        for r in &report.records {
            assert!(r.bitwise_equal, "s=0 moved {:?}", r.prompt);
            assert_eq!(r.distance, 0.0);
        }
    }

    #[test]
    fn binding_score_control_is_zero_and_identity_matches_base() {
        let mut p = build_pipeline(
            Topology::SingleStream,
            8,
            InjectionRule::RelativeNorm,
            OverlapMode::Mean,
        );
        for stream in &mut p.memory.streams {
            stream.scale.values_mut().fill(0.0);
        }
        let c = concept(p.backbone().spec().latent_dim);
        let (trigger_score, control_score) = binding_score(&p, &c, 6, 13).unwrap();
        assert_eq!(control_score, 0.0);
        // With s=0 the engram sample equals the frozen-base sample, so the
        // score is just the base distance to mu in units of sigma.
        let trigger = holdout_prompts(&c, 6, component_seed(13, "eval.trigger")).unwrap();
        let mut expect = 0.0;
        for (i, prompt) in trigger.iter().enumerate() {
            let s = p
                .sample(
                    std::slice::from_ref(prompt),
                    component_seed(13, &format!("gen.{i}")),
                    false,
                )
                .unwrap();
            expect += l2_distance(&s.row(0).to_vec(), &c.mu) / c.sigma;
        }
        expect /= 6.0;
        assert_eq!(trigger_score, expect);
        // Unbound generations sit far outside the concept's own scatter.
        assert!(trigger_score > 4.0);
    }

    #[test]
    fn locality_audit_passes_edits_inside_spans_only() {
        let base = HiddenStates::new(Array3::from_shape_fn((2, 6, 3), |(b, p, c)| {
            (b * 100 + p * 10 + c) as f64 * 0.1
        }), "enc");
        let mut edited = base.clone();
        let matches = MatchSet::new(vec![SpanMatch {
            batch: 1,
            key: 0,
            start: 2,
            len: 3,
        }]);
        for pos in 2..5 {
            for ch in 0..3 {
                edited.data[[1, pos, ch]] += 0.5;
            }
        }
        let report = locality_audit(&base, &edited, &matches).unwrap();
        assert_eq!(report.positions_checked, 12);
        assert_eq!(report.covered_positions, 3);
        assert!((report.max_in_span_delta - 0.5).abs() < 1e-12);
    }

    #[test]
    fn locality_audit_catches_an_off_by_one_span() {
        let base = HiddenStates::new(Array3::zeros((1, 6, 2)), "enc");
        let mut edited = base.clone();
        for pos in 2..5 {
            edited.data[[0, pos, 0]] = 1e-9;
        }
        // Claimed span shifted one position left of the actual edit.
        let shifted = MatchSet::new(vec![SpanMatch {
            batch: 0,
            key: 0,
            start: 1,
            len: 3,
        }]);
        match locality_audit(&base, &edited, &shifted) {
            Err(EngramError::LocalityViolation { batch, pos, channel }) => {
                assert_eq!((batch, pos, channel), (0, 4, 0));
            }
            other => panic!("expected locality violation, got {other:?}"),
        }
        // The true span passes.
        let correct = MatchSet::new(vec![SpanMatch {
            batch: 0,
            key: 0,
            start: 2,
            len: 3,
        }]);
        locality_audit(&base, &edited, &correct).unwrap();
    }

    #[test]
    fn locality_audit_rejects_out_of_range_spans_and_shapes() {
        let base = HiddenStates::new(Array3::zeros((1, 4, 2)), "enc");
        let other = HiddenStates::new(Array3::zeros((1, 5, 2)), "enc");
        assert!(matches!(
            locality_audit(&base, &other, &MatchSet::empty()),
            Err(EngramError::ShapeMismatch(_))
        ));
        let oob = MatchSet::new(vec![SpanMatch {
            batch: 0,
            key: 0,
            start: 3,
            len: 2,
        }]);
        assert!(matches!(
            locality_audit(&base, &base, &oob),
            Err(EngramError::MatchOutOfBounds { .. })
        ));
    }

    #[test]
    fn report_round_trips_through_jsonl_and_csv() {
        let p = build_pipeline(
            Topology::ProjectedStream,
            3,
            InjectionRule::Absolute,
            OverlapMode::Sum,
        );
        let prompts = vec![
            "ember fjord dune".to_string(),
            "the Aldric Vortex-9 CyberNebula signal".to_string(),
        ];
        let report = compare_matched_seed(&p, &prompts, &[7]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let jsonl = dir.path().join("report.jsonl");
        write_report_jsonl(&report, &jsonl).unwrap();
        let loaded = read_report_jsonl(&jsonl).unwrap();
        assert_eq!(report, loaded);

        let csv = dir.path().join("report.csv");
        write_report_csv(&report, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), report.records.len() + 1);
        assert_eq!(lines[0], "record,seed,has_trigger,bitwise_equal,distance");

        // A doctored summary line is rejected.
        let mut bad = std::fs::read_to_string(&jsonl).unwrap();
        bad = bad.replace("\"num_records\":2", "\"num_records\":3");
        std::fs::write(&jsonl, bad).unwrap();
        assert!(matches!(
            read_report_jsonl(&jsonl),
            Err(EngramError::MalformedReport(_))
        ));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let p = build_pipeline(
            Topology::SingleStream,
            2,
            InjectionRule::Absolute,
            OverlapMode::Sum,
        );
        let c = concept(p.backbone().spec().latent_dim);
        let mut prompts = control_prompts(&c, 5, 0).unwrap();
        prompts.push("Aldric Vortex-9 CyberNebula in an orchard".to_string());
        let seeds = vec![1u64, 2];
        let one = compare_matched_seed(&p, &prompts, &seeds).unwrap();
        std::env::set_var(THREADS_ENV, "4");
        let four = compare_matched_seed(&p, &prompts, &seeds).unwrap();
        std::env::remove_var(THREADS_ENV);
        assert_eq!(one, four);
    }
}
