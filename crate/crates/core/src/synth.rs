//! Deterministic five-manifold translation corpus.
//!
//! Each record pairs a random source token sequence with a target produced
//! by a published rule: a fixed "translation" permutation of the content
//! vocabulary, followed by a manifold-specific remap permutation, with the
//! manifold's reserved marker token prepended (the stand-in for a non-verbal
//! cue). The remap tables are constructed so that Happy/Laugh and Sad/Cry
//! agree on a fixed fraction of tokens, giving those pairs a real overlap
//! while all transforms stay mutually distinguishable.
//!
//! Token layout: `BOS SEP EOS NEU M0..M4` are reserved, content ids follow.
//! The neutral marker `NEU` is only used by the pretraining corpus, which
//! applies the translation permutation without any manifold remap.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::moe::{Manifold, N_MANIFOLDS};
use crate::rng::{derive_seed, derive_seed_n, rng_from};

pub const TOKEN_BOS: u32 = 0;
pub const TOKEN_SEP: u32 = 1;
pub const TOKEN_EOS: u32 = 2;
pub const TOKEN_NEU: u32 = 3;
pub const MARKER_BASE: u32 = 4;
/// BOS, SEP, EOS, NEU and the five manifold markers.
pub const RESERVED_TOKENS: usize = 9;

/// Bookkeeping scale: one nominal "hour" of data is this many records.
pub const RECORDS_PER_NOMINAL_HOUR: f64 = 600.0;

/// Fraction of content tokens on which the Happy/Laugh and Sad/Cry remaps
/// agree by construction.
pub const REMAP_OVERLAP: f64 = 0.4;

/// Seed of the published transform tables; fixed so the task definition is
/// independent of any particular corpus seed.
const TASK_SEED: u64 = 0x5eed_7ab1e;

pub fn marker_token(m: Manifold) -> u32 {
    MARKER_BASE + m.index() as u32
}

/// One parallel training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub manifold: Manifold,
    pub duration_s: f64,
    pub ref_text: String,
    pub hyp_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub records: Vec<CorpusRecord>,
    pub seed: u64,
    pub hours_nominal: f64,
}

/// The published translation/remap tables for a given vocabulary size.
#[derive(Clone, Debug)]
pub struct TaskTransforms {
    pub content: usize,
    /// Neutral translation permutation over content indices.
    pub translate: Vec<usize>,
    /// Per-manifold remap permutation applied after translation.
    pub remap: [Vec<usize>; N_MANIFOLDS],
}

fn random_perm(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng_from(seed));
    p
}

/// Builds a permutation agreeing with `base` exactly on `keep` positions
/// (chosen by seed) and differing everywhere else.
fn overlapping_perm(base: &[usize], keep: usize, seed: u64) -> Vec<usize> {
    let n = base.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed));
    let moved: Vec<usize> = idx[keep..].to_vec();
    let mut out = base.to_vec();
    // cycle the images of the non-kept positions; a cyclic shift has no
    // fixed point, so the result differs from `base` on every moved slot
    let k = moved.len();
    for j in 0..k {
        out[moved[j]] = base[moved[(j + 1) % k]];
    }
    out
}

impl TaskTransforms {
    pub fn for_vocab(vocab_size: usize) -> Result<TaskTransforms> {
        if vocab_size < RESERVED_TOKENS + 8 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {vocab_size} too small: need {} reserved tokens plus at least 8 content tokens",
                RESERVED_TOKENS
            )));
        }
        let content = vocab_size - RESERVED_TOKENS;
        let translate = random_perm(content, derive_seed(TASK_SEED, "translate"));
        let keep = (REMAP_OVERLAP * content as f64).round() as usize;
        // guarantee at least two moved slots so the cyclic shift works
        let keep = keep.min(content - 2);
        let angry = random_perm(content, derive_seed(TASK_SEED, "remap-angry"));
        let happy = random_perm(content, derive_seed(TASK_SEED, "remap-happy"));
        let laugh = overlapping_perm(&happy, keep, derive_seed(TASK_SEED, "remap-laugh"));
        let sad = random_perm(content, derive_seed(TASK_SEED, "remap-sad"));
        let cry = overlapping_perm(&sad, keep, derive_seed(TASK_SEED, "remap-cry"));
        Ok(TaskTransforms { content, translate, remap: [angry, happy, sad, laugh, cry] })
    }

    pub fn content_token(&self, idx: usize) -> u32 {
        (RESERVED_TOKENS + idx) as u32
    }

    fn content_index(&self, token: u32) -> Result<usize> {
        let t = token as usize;
        if t < RESERVED_TOKENS || t >= RESERVED_TOKENS + self.content {
            return Err(Error::InvalidData(format!("token {token} is not a content token")));
        }
        Ok(t - RESERVED_TOKENS)
    }

    /// The published generator rule: marker token, then the remapped
    /// translation of every source token.
    pub fn apply(&self, source: &[u32], manifold: Manifold) -> Result<Vec<u32>> {
        let remap = &self.remap[manifold.index()];
        let mut target = Vec::with_capacity(source.len() + 1);
        target.push(marker_token(manifold));
        for &s in source {
            let idx = self.content_index(s)?;
            target.push(self.content_token(remap[self.translate[idx]]));
        }
        Ok(target)
    }

    /// Neutral variant used for the pretraining corpus: NEU token, then the
    /// plain translation.
    pub fn apply_neutral(&self, source: &[u32]) -> Result<Vec<u32>> {
        let mut target = Vec::with_capacity(source.len() + 1);
        target.push(TOKEN_NEU);
        for &s in source {
            let idx = self.content_index(s)?;
            target.push(self.content_token(self.translate[idx]));
        }
        Ok(target)
    }
}

const SYLLABLES: [&str; 12] =
    ["ba", "de", "ki", "lo", "mu", "na", "po", "ra", "su", "ta", "vi", "zo"];

/// Synthetic transcript word for a content index.
pub fn content_word(idx: usize) -> String {
    format!("{}{}", SYLLABLES[(idx / SYLLABLES.len()) % SYLLABLES.len()], SYLLABLES[idx % SYLLABLES.len()])
}

fn balanced_manifolds(n: usize, seed: u64) -> Vec<Manifold> {
    let base = n / N_MANIFOLDS;
    let extra = n % N_MANIFOLDS;
    let mut labels = Vec::with_capacity(n);
    for (i, m) in Manifold::ALL.iter().enumerate() {
        let count = base + usize::from(i < extra);
        labels.extend(std::iter::repeat(*m).take(count));
    }
    labels.shuffle(&mut rng_from(derive_seed(seed, "manifold-assign")));
    labels
}

/// Generates a balanced manifest of `n_records` pairs, deterministically
/// from `seed`.
pub fn generate_corpus(
    seed: u64,
    n_records: usize,
    vocab_size: usize,
    len_range: (usize, usize),
) -> Result<CorpusManifest> {
    if n_records < N_MANIFOLDS {
        return Err(Error::InvalidData(format!(
            "need at least {N_MANIFOLDS} records, got {n_records}"
        )));
    }
    let (lo, hi) = len_range;
    if lo < 1 || lo > hi {
        return Err(Error::InvalidData(format!("invalid length range {lo}..={hi}")));
    }
    let transforms = TaskTransforms::for_vocab(vocab_size)?;
    let labels = balanced_manifolds(n_records, seed);
    let mut records = Vec::with_capacity(n_records);
    for (i, manifold) in labels.into_iter().enumerate() {
        let mut rng = rng_from(derive_seed_n(seed, "record", i as u64));
        let len = rng.random_range(lo..=hi);
        let source: Vec<u32> = (0..len)
            .map(|_| transforms.content_token(rng.random_range(0..transforms.content)))
            .collect();
        let target = transforms.apply(&source, manifold)?;
        let duration_s = rng.random_range(0.2..12.0);
        let ref_words: Vec<String> = source
            .iter()
            .map(|&t| content_word(t as usize - RESERVED_TOKENS))
            .collect();
        let hyp_words = perturb_words(&ref_words, &mut rng, transforms.content);
        records.push(CorpusRecord {
            id: format!("r{i:06}"),
            source,
            target,
            manifold,
            duration_s,
            ref_text: ref_words.join(" "),
            hyp_text: hyp_words.join(" "),
        });
    }
    Ok(CorpusManifest {
        records,
        seed,
        hours_nominal: n_records as f64 / RECORDS_PER_NOMINAL_HOUR,
    })
}

fn perturb_words(words: &[String], rng: &mut impl Rng, content: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(words.len() + 2);
    for w in words {
        let roll: f64 = rng.random();
        if roll < 0.03 {
            continue; // deletion
        } else if roll < 0.09 {
            out.push(content_word(rng.random_range(0..content))); // substitution
        } else {
            out.push(w.clone());
        }
        if rng.random::<f64>() < 0.03 {
            out.push(content_word(rng.random_range(0..content))); // insertion
        }
    }
    if out.is_empty() {
        out.push(words[0].clone());
    }
    out
}

/// Stratified subsample: `round(fraction * n)` records per manifold.
/// Sampling is nested: for the same seed, a smaller fraction selects a
/// subset of any larger fraction. Record order is preserved.
pub fn subset_by_scale(
    manifest: &CorpusManifest,
    fraction: f64,
    seed: u64,
) -> Result<CorpusManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidData(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut selected: Vec<usize> = Vec::new();
    for m in Manifold::ALL {
        let stratum: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.manifold == m)
            .map(|(i, _)| i)
            .collect();
        if stratum.is_empty() {
            continue;
        }
        let mut order = stratum.clone();
        order.shuffle(&mut rng_from(derive_seed_n(seed, "subset", m.index() as u64)));
        let k = (fraction * stratum.len() as f64).round() as usize;
        selected.extend(order.into_iter().take(k.min(stratum.len())));
    }
    if selected.is_empty() {
        return Err(Error::InvalidData(format!(
            "fraction {fraction} selects zero records in every stratum"
        )));
    }
    selected.sort_unstable();
    Ok(CorpusManifest {
        records: selected.iter().map(|&i| manifest.records[i].clone()).collect(),
        seed: manifest.seed,
        hours_nominal: manifest.hours_nominal * fraction,
    })
}

/// Disjoint, stratified, exhaustive train/dev/test partition.
pub fn split(
    manifest: &CorpusManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(CorpusManifest, CorpusManifest, CorpusManifest)> {
    let (rt, rd, re) = ratios;
    if rt <= 0.0 || rd <= 0.0 || re <= 0.0 {
        return Err(Error::InvalidData("split ratios must be positive".into()));
    }
    if ((rt + rd + re) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidData(format!(
            "split ratios sum to {}, expected 1",
            rt + rd + re
        )));
    }
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for m in Manifold::ALL {
        let stratum: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.manifold == m)
            .map(|(i, _)| i)
            .collect();
        if stratum.is_empty() {
            continue;
        }
        let mut order = stratum.clone();
        order.shuffle(&mut rng_from(derive_seed_n(seed, "split", m.index() as u64)));
        let n = order.len();
        let raw = [rt * n as f64, rd * n as f64, re * n as f64];
        let mut counts = [raw[0].floor() as usize, raw[1].floor() as usize, raw[2].floor() as usize];
        let mut rem: Vec<(f64, usize)> =
            raw.iter().enumerate().map(|(i, r)| (r - r.floor(), i)).collect();
        // fill the shortfall by largest fractional remainder; ties keep
        // train > dev > test priority
        rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut shortfall = n - counts.iter().sum::<usize>();
        for (_, i) in rem {
            if shortfall == 0 {
                break;
            }
            counts[i] += 1;
            shortfall -= 1;
        }
        let mut cursor = 0;
        for (p, &c) in counts.iter().enumerate() {
            parts[p].extend(order[cursor..cursor + c].iter().copied());
            cursor += c;
        }
    }
    let build = |indices: &mut Vec<usize>| {
        indices.sort_unstable();
        CorpusManifest {
            records: indices.iter().map(|&i| manifest.records[i].clone()).collect(),
            seed: manifest.seed,
            hours_nominal: indices.len() as f64 / RECORDS_PER_NOMINAL_HOUR,
        }
    };
    let [mut a, mut b, mut c] = parts;
    Ok((build(&mut a), build(&mut b), build(&mut c)))
}

/// One encoded autoregressive training sequence:
/// `BOS source SEP target EOS`, with the prediction mask covering the
/// target tokens and EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub tokens: Vec<u32>,
    /// Prediction mask, aligned with positions 0..len-1 predicting the next
    /// token.
    pub mask: Vec<bool>,
    pub manifold: Option<Manifold>,
    /// Index in `tokens` of the first target token (marker / NEU).
    pub target_start: usize,
}

impl TrainExample {
    /// Positions predicting pure content tokens (marker and EOS excluded).
    pub fn content_positions(&self) -> std::ops::Range<usize> {
        self.target_start..self.tokens.len() - 2
    }

    /// Positions whose input token lies in the target region; the router is
    /// observed here when tracing.
    pub fn trace_positions(&self) -> std::ops::Range<usize> {
        self.target_start..self.tokens.len() - 1
    }

    /// The decode prompt: everything before the first target token.
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.target_start]
    }

    /// The reference target region (marker through EOS).
    pub fn target_region(&self) -> &[u32] {
        &self.tokens[self.target_start..]
    }
}

fn encode(id: &str, source: &[u32], target: &[u32], manifold: Option<Manifold>) -> TrainExample {
    let mut tokens = Vec::with_capacity(source.len() + target.len() + 3);
    tokens.push(TOKEN_BOS);
    tokens.extend_from_slice(source);
    tokens.push(TOKEN_SEP);
    let target_start = tokens.len();
    tokens.extend_from_slice(target);
    tokens.push(TOKEN_EOS);
    let mask: Vec<bool> = (0..tokens.len() - 1).map(|t| t + 1 >= target_start).collect();
    TrainExample { id: id.to_string(), tokens, mask, manifold, target_start }
}

pub fn encode_record(rec: &CorpusRecord) -> TrainExample {
    encode(&rec.id, &rec.source, &rec.target, Some(rec.manifold))
}

pub fn encode_manifest(manifest: &CorpusManifest) -> Vec<TrainExample> {
    manifest.records.iter().map(encode_record).collect()
}

/// Neutral copy/translation examples for fitting the base model before it
/// is frozen.
pub fn neutral_examples(
    seed: u64,
    n_records: usize,
    vocab_size: usize,
    len_range: (usize, usize),
) -> Result<Vec<TrainExample>> {
    let (lo, hi) = len_range;
    if lo < 1 || lo > hi {
        return Err(Error::InvalidData(format!("invalid length range {lo}..={hi}")));
    }
    let transforms = TaskTransforms::for_vocab(vocab_size)?;
    let mut out = Vec::with_capacity(n_records);
    for i in 0..n_records {
        let mut rng = rng_from(derive_seed_n(seed, "neutral", i as u64));
        let len = rng.random_range(lo..=hi);
        let source: Vec<u32> = (0..len)
            .map(|_| transforms.content_token(rng.random_range(0..transforms.content)))
            .collect();
        let target = transforms.apply_neutral(&source)?;
        out.push(encode(&format!("n{i:06}"), &source, &target, None));
    }
    Ok(out)
}

/// Longest encoded sequence length for a source length bound.
pub fn max_encoded_len(max_source_len: usize) -> usize {
    // BOS + src + SEP + marker + src + EOS
    2 * max_source_len + 4
}

// ---------------------------------------------------------------------------
// JSON-lines persistence: one metadata header line, then one record per line.

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    kind: String,
    seed: u64,
    hours_nominal: f64,
    n_records: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

pub fn write_manifest(
    path: &Path,
    manifest: &CorpusManifest,
    meta: Option<serde_json::Value>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = ManifestHeader {
        kind: "corpus-manifest".into(),
        seed: manifest.seed,
        hours_nominal: manifest.hours_nominal,
        n_records: manifest.records.len(),
        meta,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for rec in &manifest.records {
        writeln!(w, "{}", serde_json::to_string(rec)?)?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::InvalidData(format!("{}: empty manifest", path.display())))??;
    let header: ManifestHeader = serde_json::from_str(&header_line)?;
    if header.kind != "corpus-manifest" {
        return Err(Error::InvalidData(format!(
            "{}: unexpected header kind {:?}",
            path.display(),
            header.kind
        )));
    }
    let mut records = Vec::with_capacity(header.n_records);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<CorpusRecord>(&line)?);
    }
    if records.len() != header.n_records {
        return Err(Error::InvalidData(format!(
            "{}: header claims {} records, found {}",
            path.display(),
            header.n_records,
            records.len()
        )));
    }
    Ok(CorpusManifest { records, seed: header.seed, hours_nominal: header.hours_nominal })
}
