//! Evaluation: corpus BLEU, the overcorrection probe, and throughput
//! measurement.
//!
//! BLEU is the classic corpus score: geometric mean of clipped n-gram
//! precisions times the brevity penalty, no smoothing (a zero precision
//! zeroes the score), single reference.
//!
//! The overcorrection probe quantifies how much probability a model keeps on
//! next tokens that are valid for a context but are not the reference, using
//! the synthetic task's oracle sidecar. A model collapsed onto the references
//! scores 0; a model that spreads mass over the valid alternatives scores
//! higher.
//!
//! Throughput reports carry a session fingerprint (host, build profile,
//! thread count); ratios are only computed between reports from the same
//! session.

use crate::corpus::{OracleRecord, ParallelCorpus};
use crate::model::{softmax, ModelState};
use crate::{Error, Result};
use std::collections::HashMap;
use std::hash::Hash;
use std::time::Instant;

/// Corpus BLEU with per-order precisions and the brevity penalty.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BleuReport {
    /// Percentage in [0, 100].
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU of `hyps` against single references `refs`.
pub fn bleu<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "hypothesis/reference counts differ: {} vs {}",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if max_n < 1 {
        return Err(Error::InvalidArgument("max_n must be >= 1".into()));
    }

    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let h_counts = ngram_counts(h, n);
            let r_counts = ngram_counts(r, n);
            for (gram, &c) in &h_counts {
                totals[n - 1] += c;
                if let Some(&rc) = r_counts.get(gram) {
                    matches[n - 1] += c.min(rc);
                }
            }
        }
    }

    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            }
        })
        .collect();

    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };

    // Orders the corpus is too short to populate at all (zero candidate
    // n-grams) drop out of the geometric mean; a populated order with zero
    // matches still zeroes the score (no smoothing).
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    let mut zero = false;
    for i in 0..max_n {
        if totals[i] == 0 {
            continue;
        }
        orders += 1;
        if precisions[i] == 0.0 {
            zero = true;
        } else {
            log_sum += precisions[i].ln();
        }
    }
    let bleu = if zero || orders == 0 || hyp_len == 0 {
        0.0
    } else {
        100.0 * brevity_penalty * (log_sum / orders as f64).exp()
    };

    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Probe result: average probability mass on valid-but-not-reference next
/// tokens over the probed contexts.
#[derive(Debug, Clone, serde::Serialize)]
pub struct OvercorrectionReport {
    pub mean_mass: f64,
    pub contexts: usize,
    /// Contexts whose oracle set has more than one token.
    pub contested_contexts: usize,
    pub min_mass: f64,
    pub max_mass: f64,
}

/// For every sidecar context, sum the model's probability over the oracle
/// tokens excluding the reference token at that position, then average.
pub fn overcorrection_probe(
    model: &ModelState,
    test: &ParallelCorpus,
    oracle: &[OracleRecord],
) -> Result<OvercorrectionReport> {
    if oracle.is_empty() {
        return Err(Error::InvalidArgument("empty oracle sidecar".into()));
    }
    // Probability rows per sentence, teacher-forced on the references.
    let mut rows: Vec<Option<Vec<Vec<f64>>>> = vec![None; test.pairs.len()];
    let mut total = 0.0;
    let mut min_mass = f64::INFINITY;
    let mut max_mass = f64::NEG_INFINITY;
    let mut contested = 0usize;
    for rec in oracle {
        let (src, tgt) = test.pairs.get(rec.sentence_idx).ok_or_else(|| {
            Error::ArtifactMismatch(format!(
                "oracle sentence {} out of range ({} test sentences)",
                rec.sentence_idx,
                test.pairs.len()
            ))
        })?;
        if rec.position >= tgt.len() {
            return Err(Error::ArtifactMismatch(format!(
                "oracle position {} out of range for sentence {} of length {}",
                rec.position,
                rec.sentence_idx,
                tgt.len()
            )));
        }
        if rows[rec.sentence_idx].is_none() {
            let cache = model.forward_teacher_forced(src, tgt)?;
            let probs: Result<Vec<Vec<f64>>> =
                cache.logits.iter().map(|z| softmax(z)).collect();
            rows[rec.sentence_idx] = Some(probs?);
        }
        let row = &rows[rec.sentence_idx].as_ref().unwrap()[rec.position];
        let reference = tgt[rec.position];
        let mut mass = 0.0;
        for &tok in &rec.tokens {
            if tok != reference {
                let p = *row.get(tok as usize).ok_or_else(|| {
                    Error::ArtifactMismatch(format!("oracle token {tok} out of vocabulary"))
                })?;
                mass += p;
            }
        }
        if rec.tokens.len() > 1 {
            contested += 1;
        }
        total += mass;
        min_mass = min_mass.min(mass);
        max_mass = max_mass.max(mass);
    }
    Ok(OvercorrectionReport {
        mean_mass: total / oracle.len() as f64,
        contexts: oracle.len(),
        contested_contexts: contested,
        min_mass,
        max_mass,
    })
}

/// Host/build/thread tag; throughput ratios only make sense within one tag.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct SessionFingerprint {
    pub host: String,
    pub profile: String,
    pub threads: usize,
}

impl SessionFingerprint {
    pub fn current(threads: usize) -> Self {
        let host = std::env::var("HOSTNAME")
            .ok()
            .or_else(|| {
                std::fs::read_to_string("/proc/sys/kernel/hostname")
                    .ok()
                    .map(|s| s.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
        SessionFingerprint {
            host,
            profile: profile.into(),
            threads,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ThroughputReport {
    pub name: String,
    /// Median tokens generated per second (deccode benches).
    pub tokens_per_second: Option<f64>,
    /// Median optimizer updates per second (training benches).
    pub updates_per_second: Option<f64>,
    /// Median wall-clock seconds per repetition.
    pub seconds: f64,
    pub repetitions: usize,
    pub session: SessionFingerprint,
}

impl ThroughputReport {
    /// This run's throughput relative to `baseline` (same session required).
    pub fn ratio_vs(&self, baseline: &ThroughputReport) -> Result<f64> {
        if self.session != baseline.session {
            return Err(Error::ArtifactMismatch(
                "throughput reports come from different sessions".into(),
            ));
        }
        let pick = |r: &ThroughputReport| r.tokens_per_second.or(r.updates_per_second);
        match (pick(self), pick(baseline)) {
            (Some(a), Some(b)) if b > 0.0 => Ok(a / b),
            _ => Err(Error::InvalidArgument(
                "reports carry no comparable rates".into(),
            )),
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Benchmark a decoding pass. `work` runs one full pass over the test set and
/// returns the number of tokens it generated. One warmup pass is excluded;
/// the report carries the median rate over `repetitions`.
pub fn bench_decode<F: FnMut() -> Result<usize>>(
    name: &str,
    mut work: F,
    repetitions: usize,
    session: SessionFingerprint,
) -> Result<ThroughputReport> {
    if repetitions < 1 {
        return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
    }
    let warm = work()?;
    if warm == 0 {
        return Err(Error::InvalidArgument(
            "decode benchmark produced no tokens".into(),
        ));
    }
    let mut rates = Vec::with_capacity(repetitions);
    let mut secs = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        let tokens = work()?;
        let dt = t0.elapsed().as_secs_f64();
        rates.push(tokens as f64 / dt);
        secs.push(dt);
    }
    Ok(ThroughputReport {
        name: name.into(),
        tokens_per_second: Some(median(rates)),
        updates_per_second: None,
        seconds: median(secs),
        repetitions,
        session,
    })
}

/// Benchmark training updates. `work` runs one repetition and returns how
/// many optimizer updates it performed.
pub fn bench_train<F: FnMut() -> Result<usize>>(
    name: &str,
    mut work: F,
    repetitions: usize,
    session: SessionFingerprint,
) -> Result<ThroughputReport> {
    if repetitions < 1 {
        return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
    }
    work()?; // warmup
    let mut rates = Vec::with_capacity(repetitions);
    let mut secs = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        let updates = work()?;
        let dt = t0.elapsed().as_secs_f64();
        rates.push(updates as f64 / dt);
        secs.push(dt);
    }
    Ok(ThroughputReport {
        name: name.into(),
        tokens_per_second: None,
        updates_per_second: Some(median(rates)),
        seconds: median(secs),
        repetitions,
        session,
    })
}
