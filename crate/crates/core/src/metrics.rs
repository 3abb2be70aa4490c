//! Evaluation metrics and their dispersion statistics: corpus BLEU with
//! bootstrap standard deviation, arousal-valence cosine similarity with
//! standard error, opinion-score aggregation, pairwise preference rates and
//! non-verbal match accuracy with per-evaluator standard error.
//!
//! The BLEU variant is pinned: case-sensitive token BLEU, n-grams up to 4,
//! corpus-level counts, brevity penalty, and add-one smoothing applied only
//! to zero-count higher-order precisions. Whitespace-free text tokenizes per
//! character.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use rand::Rng;

/// Two-dimensional affect representation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AroValPoint {
    pub arousal: f64,
    pub valence: f64,
}

/// Cosine similarity between two arousal-valence points.
pub fn aro_val_sim(src: AroValPoint, gen: AroValPoint) -> Result<f64> {
    let ns = (src.arousal * src.arousal + src.valence * src.valence).sqrt();
    let ng = (gen.arousal * gen.arousal + gen.valence * gen.valence).sqrt();
    if !ns.is_finite() || !ng.is_finite() {
        return Err(Error::Numeric("non-finite arousal-valence point".into()));
    }
    if ns == 0.0 || ng == 0.0 {
        return Err(Error::InvalidData("cosine similarity undefined for zero vector".into()));
    }
    Ok((src.arousal * gen.arousal + src.valence * gen.valence) / (ns * ng))
}

/// Whitespace tokens, or characters when the string has no whitespace
/// (character-based scripts score per character).
pub fn bleu_tokenize(s: &str) -> Vec<String> {
    let trimmed = s.trim();
    if trimmed.is_empty() {
        return Vec::new();
    }
    if trimmed.split_whitespace().nth(1).is_some() {
        trimmed.split_whitespace().map(str::to_string).collect()
    } else if trimmed.contains(char::is_whitespace) {
        vec![trimmed.split_whitespace().next().unwrap().to_string()]
    } else {
        trimmed.chars().map(String::from).collect()
    }
}

pub const BLEU_MAX_N: usize = 4;

/// Corpus-level BLEU in [0, 100].
pub fn corpus_bleu<T: Eq + Hash>(refs: &[Vec<T>], hyps: &[Vec<T>], max_n: usize) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::InvalidData(format!(
            "corpus length mismatch: {} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::InvalidData("empty corpus".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidData("max_n must be at least 1".into()));
    }
    let mut matched = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let mut ref_len = 0u64;
    let mut hyp_len = 0u64;
    for (r, h) in refs.iter().zip(hyps) {
        if r.is_empty() {
            return Err(Error::InvalidData("empty reference sequence".into()));
        }
        ref_len += r.len() as u64;
        hyp_len += h.len() as u64;
        for n in 1..=max_n {
            if h.len() < n {
                break;
            }
            let mut ref_counts: HashMap<&[T], u64> = HashMap::new();
            for w in r.windows(n) {
                *ref_counts.entry(w).or_default() += 1;
            }
            let mut hyp_counts: HashMap<&[T], u64> = HashMap::new();
            for w in h.windows(n) {
                *hyp_counts.entry(w).or_default() += 1;
            }
            for (gram, count) in hyp_counts {
                total[n - 1] += count;
                matched[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if matched[n] == 0 {
            if n == 0 {
                return Ok(0.0); // no unigram overlap at all
            }
            // add-one smoothing on zero-count higher-order precisions
            1.0 / (total[n] + 1) as f64
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_sum += p.ln() / max_n as f64;
    }
    let bp = if hyp_len < ref_len { (1.0 - ref_len as f64 / hyp_len as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * log_sum.exp())
}

/// Sample standard deviation (n−1 denominator).
fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

/// Standard error of the mean: sample SD / √n.
pub fn standard_error(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidData(format!(
            "standard error needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    Ok(sample_sd(samples) / (samples.len() as f64).sqrt())
}

/// Standard deviation of `statistic` over `b` bootstrap resamples (with
/// replacement, original size), deterministic from `seed`.
pub fn bootstrap_sd<T>(
    sample: &[T],
    b: usize,
    seed: u64,
    statistic: impl Fn(&[&T]) -> f64,
) -> Result<f64> {
    if sample.len() < 2 {
        return Err(Error::InvalidData(format!(
            "bootstrap needs at least 2 items, got {}",
            sample.len()
        )));
    }
    if b < 100 {
        return Err(Error::InvalidData(format!("bootstrap needs B >= 100, got {b}")));
    }
    let mut rng = rng_from(seed);
    let n = sample.len();
    let mut stats = Vec::with_capacity(b);
    let mut resample: Vec<&T> = Vec::with_capacity(n);
    for _ in 0..b {
        resample.clear();
        for _ in 0..n {
            resample.push(&sample[rng.random_range(0..n)]);
        }
        let s = statistic(&resample);
        if !s.is_finite() {
            return Err(Error::Numeric("bootstrap statistic is non-finite".into()));
        }
        stats.push(s);
    }
    Ok(sample_sd(&stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NvLabel {
    Laughing,
    Crying,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NvAnnotation {
    pub utterance: String,
    pub evaluator: String,
    pub system: String,
    pub source_nv: NvLabel,
    pub perceived_nv: NvLabel,
}

/// Per-system non-verbal match accuracy.
///
/// A hit requires the perceived label to exactly equal the source label.
/// Accuracy is computed per evaluator within the laughing and crying
/// subsets, those two subset accuracies are averaged, and the system's point
/// estimate (×100) and standard error are taken over the evaluator means.
pub fn nv_match_accuracy(annotations: &[NvAnnotation]) -> Result<BTreeMap<String, (f64, f64)>> {
    if annotations.is_empty() {
        return Err(Error::InvalidData("no annotations".into()));
    }
    for a in annotations {
        if a.utterance.is_empty() || a.evaluator.is_empty() || a.system.is_empty() {
            return Err(Error::InvalidData("annotation with empty id".into()));
        }
        if a.source_nv == NvLabel::None {
            return Err(Error::InvalidData(format!(
                "utterance {}: source must be laughing or crying",
                a.utterance
            )));
        }
    }
    // system → evaluator → (laugh hits, laugh total, cry hits, cry total)
    let mut table: BTreeMap<&str, BTreeMap<&str, [u64; 4]>> = BTreeMap::new();
    for a in annotations {
        let cell = table
            .entry(a.system.as_str())
            .or_default()
            .entry(a.evaluator.as_str())
            .or_insert([0; 4]);
        let hit = u64::from(a.perceived_nv == a.source_nv);
        match a.source_nv {
            NvLabel::Laughing => {
                cell[0] += hit;
                cell[1] += 1;
            }
            NvLabel::Crying => {
                cell[2] += hit;
                cell[3] += 1;
            }
            NvLabel::None => unreachable!(),
        }
    }
    let mut out = BTreeMap::new();
    for (system, evaluators) in table {
        let mut means = Vec::with_capacity(evaluators.len());
        for (evaluator, [lh, lt, ch, ct]) in evaluators {
            if lt == 0 || ct == 0 {
                return Err(Error::InvalidData(format!(
                    "system {system}, evaluator {evaluator}: missing {} subset",
                    if lt == 0 { "laughing" } else { "crying" }
                )));
            }
            means.push((lh as f64 / lt as f64 + ch as f64 / ct as f64) / 2.0);
        }
        let point = 100.0 * means.iter().sum::<f64>() / means.len() as f64;
        let se = 100.0 * standard_error(&means)?;
        out.insert(system.to_string(), (point, se));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Vote {
    A,
    B,
    Tie,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbPreference {
    pub a_pct: f64,
    pub tie_pct: f64,
    pub b_pct: f64,
}

/// Win/tie/loss percentages over a vote list; the three values sum to 100.
pub fn ab_preference(votes: &[Vote]) -> Result<AbPreference> {
    if votes.is_empty() {
        return Err(Error::InvalidData("no votes".into()));
    }
    let n = votes.len() as f64;
    let a = votes.iter().filter(|v| **v == Vote::A).count() as f64;
    let b = votes.iter().filter(|v| **v == Vote::B).count() as f64;
    let tie = n - a - b;
    Ok(AbPreference { a_pct: 100.0 * a / n, tie_pct: 100.0 * tie / n, b_pct: 100.0 * b / n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosRating {
    pub utterance: String,
    pub evaluator: String,
    pub score: f64,
}

/// Mean opinion score over all ratings plus standard error over the
/// per-evaluator mean scores.
pub fn mos_aggregate(ratings: &[MosRating]) -> Result<(f64, f64)> {
    if ratings.is_empty() {
        return Err(Error::InvalidData("no ratings".into()));
    }
    for r in ratings {
        if !(1.0..=5.0).contains(&r.score) {
            return Err(Error::InvalidData(format!(
                "rating {} for {} outside the 1-5 scale",
                r.score, r.utterance
            )));
        }
    }
    let mean = ratings.iter().map(|r| r.score).sum::<f64>() / ratings.len() as f64;
    let mut per_eval: BTreeMap<&str, (f64, u64)> = BTreeMap::new();
    for r in ratings {
        let e = per_eval.entry(r.evaluator.as_str()).or_insert((0.0, 0));
        e.0 += r.score;
        e.1 += 1;
    }
    let means: Vec<f64> = per_eval.values().map(|(s, c)| s / *c as f64).collect();
    Ok((mean, standard_error(&means)?))
}

/// One row of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub metric: String,
    pub system: String,
    pub estimate: f64,
    pub dispersion: f64,
    pub n: usize,
}

/// Writes rows as CSV with a `#`-prefixed metadata line.
pub fn write_metrics_csv(
    path: &Path,
    rows: &[MetricsRow],
    meta: Option<&serde_json::Value>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(meta) = meta {
        writeln!(w, "# meta: {meta}")?;
    }
    writeln!(w, "metric,system,estimate,dispersion,n")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.metric, r.system, r.estimate, r.dispersion, r.n)?;
    }
    Ok(())
}
