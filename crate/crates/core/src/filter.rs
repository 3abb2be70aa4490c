//! Selection stages for the corpus: prompt-pool confidence filtering and the
//! sequential quality-assurance filters (duration, transcript WER, pair
//! conjunction).
//!
//! Boundary readings are pinned: durations strictly under 0.5 s fail, a WER
//! of exactly 0.5 passes. Text normalization is lowercase, punctuation
//! stripped, whitespace collapsed; normalized strings without whitespace are
//! scored per character, so character-based scripts fall back to character
//! error rate.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::CorpusRecord;

/// Durations under this many seconds are discarded.
pub const MIN_DURATION_S: f64 = 0.5;
/// Records with word error rate above this are discarded (equality passes).
pub const MAX_WER: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    Laughter,
    Crying,
    Affective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub id: String,
    pub kind: PromptKind,
    pub detector_confidence: f64,
    pub human_verified: bool,
}

/// Prompt-pool curation rule: laughter needs detector confidence strictly
/// above the threshold and human verification; crying needs human
/// verification only; affective prompts pass unconditionally.
pub fn filter_prompts(
    candidates: &[PromptCandidate],
    threshold: f64,
) -> Result<Vec<PromptCandidate>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidData(format!("threshold {threshold} outside [0, 1]")));
    }
    for c in candidates {
        if !(0.0..=1.0).contains(&c.detector_confidence) {
            return Err(Error::InvalidData(format!(
                "candidate {}: confidence {} outside [0, 1]",
                c.id, c.detector_confidence
            )));
        }
    }
    Ok(candidates
        .iter()
        .filter(|c| match c.kind {
            PromptKind::Laughter => c.detector_confidence > threshold && c.human_verified,
            PromptKind::Crying => c.human_verified,
            PromptKind::Affective => true,
        })
        .cloned()
        .collect())
}

/// True iff the clip is at least [`MIN_DURATION_S`] long.
pub fn duration_filter(duration_s: f64) -> Result<bool> {
    duration_pass(duration_s, MIN_DURATION_S)
}

pub fn duration_pass(duration_s: f64, min_s: f64) -> Result<bool> {
    if duration_s < 0.0 || !duration_s.is_finite() {
        return Err(Error::InvalidData(format!("negative or non-finite duration {duration_s}")));
    }
    Ok(duration_s >= min_s)
}

/// Lowercases, strips characters that are neither alphanumeric nor
/// whitespace, and collapses whitespace runs. Idempotent.
pub fn normalize_text(s: &str) -> String {
    let lowered = s.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for c in lowered.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if c.is_alphanumeric() {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
        // anything else (punctuation, symbols) is dropped
    }
    out
}

/// Splits a normalized string into scoring units. Word mode splits on
/// spaces; character mode (for whitespace-free scripts) splits per
/// character.
fn scoring_tokens(normalized: &str, word_mode: bool) -> Vec<String> {
    if normalized.is_empty() {
        return Vec::new();
    }
    if word_mode {
        normalized.split(' ').map(str::to_string).collect()
    } else {
        normalized.chars().map(String::from).collect()
    }
}

fn levenshtein(a: &[String], b: &[String]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        curr[0] = i;
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            curr[j] = (prev[j] + 1).min(curr[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Word-level edit distance divided by reference length, both sides
/// normalized first. When neither normalized side contains whitespace the
/// pair is scored per character, so character-based scripts get a character
/// error rate.
pub fn word_error_rate(reference: &str, hypothesis: &str) -> Result<f64> {
    let r = normalize_text(reference);
    if r.is_empty() {
        return Err(Error::InvalidData("empty reference after normalization".into()));
    }
    let h = normalize_text(hypothesis);
    let word_mode = r.contains(' ') || h.contains(' ');
    let rt = scoring_tokens(&r, word_mode);
    let ht = scoring_tokens(&h, word_mode);
    Ok(levenshtein(&rt, &ht) as f64 / rt.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub id: String,
    pub duration_pass: bool,
    pub wer: f64,
    pub wer_pass: bool,
    pub overall_pass: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub min_duration_s: f64,
    pub max_wer: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds { min_duration_s: MIN_DURATION_S, max_wer: MAX_WER }
    }
}

/// Applies the duration and WER filters to one record; the overall verdict
/// is their conjunction.
pub fn record_filter(rec: &CorpusRecord, th: &FilterThresholds) -> Result<FilterReport> {
    let duration_pass = duration_pass(rec.duration_s, th.min_duration_s)?;
    let wer = word_error_rate(&rec.ref_text, &rec.hyp_text)?;
    let wer_pass = wer <= th.max_wer;
    Ok(FilterReport {
        id: rec.id.clone(),
        duration_pass,
        wer,
        wer_pass,
        overall_pass: duration_pass && wer_pass,
    })
}

/// Strips a trailing `.en` / `.zh` side suffix, leaving the pair id.
pub fn pair_id(id: &str) -> &str {
    id.strip_suffix(".en").or_else(|| id.strip_suffix(".zh")).unwrap_or(id)
}

/// A pair is retained only if both sides pass all filters.
pub fn pair_filter(en: &FilterReport, zh: &FilterReport) -> Result<bool> {
    if pair_id(&en.id) != pair_id(&zh.id) {
        return Err(Error::InvalidData(format!(
            "reports {} and {} do not belong to the same pair",
            en.id, zh.id
        )));
    }
    Ok(en.overall_pass && zh.overall_pass)
}

pub fn write_reports(path: &Path, reports: &[FilterReport], meta: Option<serde_json::Value>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = serde_json::json!({
        "kind": "filter-report",
        "n_records": reports.len(),
        "meta": meta,
    });
    writeln!(w, "{header}")?;
    for r in reports {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<FilterReport>> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidData(format!("{}: empty report file", path.display())))??;
    let header: serde_json::Value = serde_json::from_str(&header)?;
    if header["kind"] != "filter-report" {
        return Err(Error::InvalidData(format!("{}: not a filter report file", path.display())));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str::<FilterReport>(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::Manifold;
    use rand::Rng;

    fn candidate(kind: PromptKind, conf: f64, verified: bool) -> PromptCandidate {
        PromptCandidate {
            id: format!("{kind:?}-{conf}-{verified}"),
            kind,
            detector_confidence: conf,
            human_verified: verified,
        }
    }

    #[test]
    fn prompt_filter_boundaries() {
        // confidence exactly at the threshold is rejected: strictly greater required
        let cands = vec![
            candidate(PromptKind::Laughter, 0.99, true),
            candidate(PromptKind::Laughter, 0.995, true),
            candidate(PromptKind::Laughter, 0.995, false),
            candidate(PromptKind::Crying, 0.1, true),
            candidate(PromptKind::Crying, 0.999, false),
            candidate(PromptKind::Affective, 0.0, false),
        ];
        let kept = filter_prompts(&cands, 0.99).unwrap();
        let ids: Vec<&str> = kept.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(
            ids,
            vec!["Laughter-0.995-true", "Crying-0.1-true", "Affective-0-false"]
        );
    }

    #[test]
    fn prompt_filter_rejects_bad_threshold_and_confidence() {
        assert!(filter_prompts(&[], 1.5).is_err());
        assert!(filter_prompts(&[candidate(PromptKind::Affective, 1.2, true)], 0.5).is_err());
    }

    #[test]
    fn duration_boundaries() {
        assert!(!duration_filter(0.49).unwrap());
        assert!(duration_filter(0.5).unwrap());
        assert!(duration_filter(10.0).unwrap());
        assert!(duration_filter(-0.1).is_err());
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_text("Hello, World!"), "hello world");
        assert_eq!(normalize_text("  a   b "), "a b");
        assert_eq!(normalize_text("hello world"), "hello world"); // idempotent on clean input
        let once = normalize_text("Mixed—Case…  TEXT!!");
        assert_eq!(normalize_text(&once), once);
    }

    #[test]
    fn wer_cases() {
        assert_eq!(word_error_rate("a b c", "a b c").unwrap(), 0.0);
        assert!((word_error_rate("a b c", "a x c").unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(word_error_rate("a b", "").unwrap(), 1.0);
        assert!(word_error_rate("", "abc").is_err());
        assert!(word_error_rate("?!.", "abc").is_err()); // empty after normalization
    }

    #[test]
    fn wer_character_fallback_for_unspaced_text() {
        // whitespace-free strings are scored per character
        let wer = word_error_rate("你好世界", "你好世间").unwrap();
        assert!((wer - 0.25).abs() < 1e-12);
    }

    /// Independent full-matrix edit distance used as the oracle.
    fn edit_distance_oracle(a: &[&str], b: &[&str]) -> usize {
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 0..=a.len() {
            dp[i][0] = i;
        }
        for j in 0..=b.len() {
            dp[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                dp[i][j] = (dp[i - 1][j] + 1).min(dp[i][j - 1] + 1).min(dp[i - 1][j - 1] + cost);
            }
        }
        dp[a.len()][b.len()]
    }

    #[test]
    fn wer_matches_oracle_on_random_strings() {
        let mut rng = crate::rng::rng_from(5);
        let words = ["am", "bo", "cu", "di", "el"];
        for _ in 0..200 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<&str> {
                (0..n).map(|_| words[rng.random_range(0..words.len())]).collect()
            };
            // at least two reference words keeps the pair in word mode
            let rn = rng.random_range(2..8);
            let r = mk(&mut rng, rn);
            let hn = rng.random_range(0..8);
            let h = mk(&mut rng, hn);
            let expected = edit_distance_oracle(&r, &h) as f64 / r.len() as f64;
            let got = word_error_rate(&r.join(" "), &h.join(" ")).unwrap();
            assert!((got - expected).abs() < 1e-12);
            // symmetry bound: wer ≤ (|ref| + |hyp|) / |ref|
            assert!(got <= (r.len() + h.len()) as f64 / r.len() as f64 + 1e-12);
        }
    }

    fn record(id: &str, duration: f64, ref_text: &str, hyp_text: &str) -> CorpusRecord {
        CorpusRecord {
            id: id.into(),
            source: vec![9],
            target: vec![4, 9],
            manifold: Manifold::Angry,
            duration_s: duration,
            ref_text: ref_text.into(),
            hyp_text: hyp_text.into(),
        }
    }

    #[test]
    fn record_filter_boundary_behaviour() {
        let th = FilterThresholds::default();
        // WER exactly 0.5 passes
        let r = record_filter(&record("a", 1.0, "a b", "a x"), &th).unwrap();
        assert!((r.wer - 0.5).abs() < 1e-12);
        assert!(r.wer_pass && r.overall_pass);
        // WER above 0.5 fails overall despite good duration
        let r = record_filter(&record("b", 1.0, "a b c d", "a x y z x"), &th).unwrap();
        assert!(r.wer > 0.5 && !r.overall_pass);
        // good WER, short duration fails overall
        let r = record_filter(&record("c", 0.3, "a b c", "a b c"), &th).unwrap();
        assert!(r.duration_pass == false && r.wer_pass && !r.overall_pass);
    }

    #[test]
    fn pair_filter_requires_both_sides() {
        let mk = |id: &str, pass: bool| FilterReport {
            id: id.into(),
            duration_pass: pass,
            wer: 0.0,
            wer_pass: true,
            overall_pass: pass,
        };
        assert!(pair_filter(&mk("p1.en", true), &mk("p1.zh", true)).unwrap());
        assert!(!pair_filter(&mk("p1.en", true), &mk("p1.zh", false)).unwrap());
        assert!(!pair_filter(&mk("p1.en", false), &mk("p1.zh", false)).unwrap());
        assert!(pair_filter(&mk("p1.en", true), &mk("p2.zh", true)).is_err());
    }

    #[test]
    fn lower_wer_threshold_never_grows_accepted_set() {
        let m = crate::synth::generate_corpus(3, 60, 33, (3, 8)).unwrap();
        let accepted = |max_wer: f64| -> Vec<String> {
            m.records
                .iter()
                .filter(|r| {
                    record_filter(r, &FilterThresholds { max_wer, ..Default::default() })
                        .unwrap()
                        .overall_pass
                })
                .map(|r| r.id.clone())
                .collect()
        };
        let loose = accepted(0.5);
        let tight = accepted(0.2);
        let zero = accepted(0.0);
        assert!(tight.iter().all(|id| loose.contains(id)));
        assert!(zero.iter().all(|id| tight.contains(id)));
    }

    #[test]
    fn pair_conjunction_equals_intersection() {
        let m = crate::synth::generate_corpus(9, 40, 33, (3, 8)).unwrap();
        let th = FilterThresholds::default();
        // treat consecutive records as the two sides of one pair
        for pair in m.records.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            let mut en = record_filter(&pair[0], &th).unwrap();
            let mut zh = record_filter(&pair[1], &th).unwrap();
            en.id = "p.en".into();
            zh.id = "p.zh".into();
            let kept = pair_filter(&en, &zh).unwrap();
            assert_eq!(kept, en.overall_pass && zh.overall_pass);
        }
    }

    #[test]
    fn reports_roundtrip_through_jsonl() {
        let dir = std::env::temp_dir().join(format!("molora-filter-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("reports.jsonl");
        let m = crate::synth::generate_corpus(3, 20, 33, (3, 8)).unwrap();
        let th = FilterThresholds::default();
        let reports: Vec<FilterReport> =
            m.records.iter().map(|r| record_filter(r, &th).unwrap()).collect();
        write_reports(&path, &reports, None).unwrap();
        assert_eq!(read_reports(&path).unwrap(), reports);
        std::fs::remove_dir_all(&dir).ok();
    }
}
