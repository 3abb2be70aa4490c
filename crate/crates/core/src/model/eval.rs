//! Task-level evaluation helpers: greedy decoding, teacher-forced content
//! accuracy and forced-routing losses.

use crate::error::Result;
use crate::moe::RoutingMode;
use crate::synth::{TrainExample, TOKEN_EOS};

use super::{lm_loss, Model};

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy continuation of `prompt` until EOS or `max_new` tokens.
pub fn greedy_decode(model: &Model, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if tokens.len() >= model.cfg.max_seq {
            break;
        }
        let logits = model.forward(&tokens)?;
        let next = argmax(logits.last().expect("non-empty sequence"));
        if next == TOKEN_EOS {
            break;
        }
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

/// Teacher-forced accuracy over the content positions of one example:
/// (correct, total).
pub fn per_record_content_accuracy(model: &Model, ex: &TrainExample) -> Result<(usize, usize)> {
    let inputs = &ex.tokens[..ex.tokens.len() - 1];
    let logits = model.forward(inputs)?;
    let mut correct = 0;
    let mut total = 0;
    for t in ex.content_positions() {
        total += 1;
        if argmax(&logits[t]) == ex.tokens[t + 1] {
            correct += 1;
        }
    }
    Ok((correct, total))
}

/// Mean content accuracy over a set plus the per-record accuracies (for
/// bootstrap dispersion).
pub fn content_accuracy(model: &Model, examples: &[TrainExample]) -> Result<(f64, Vec<f64>)> {
    let mut per_record = Vec::with_capacity(examples.len());
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let (c, t) = per_record_content_accuracy(model, ex)?;
        correct += c;
        total += t;
        per_record.push(if t == 0 { 0.0 } else { c as f64 / t as f64 });
    }
    if total == 0 {
        return Err(crate::error::Error::InvalidData("no content positions to score".into()));
    }
    Ok((correct as f64 / total as f64, per_record))
}

/// Mean masked loss over `examples` with routing forced to one expert.
pub fn forced_routing_loss(model: &Model, examples: &[&TrainExample], expert: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let inputs = &ex.tokens[..ex.tokens.len() - 1];
        let (logits, _) = model.forward_cached(inputs, RoutingMode::Forced(expert))?;
        let loss = lm_loss(&logits, &ex.tokens[1..], &ex.mask)?;
        let n = ex.mask.iter().filter(|m| **m).count();
        total += loss * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(crate::error::Error::InvalidData("no masked positions".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth;

    #[test]
    fn decode_stops_at_eos_and_respects_max_seq() {
        let model = Model::init(&ModelConfig::default()).unwrap();
        let corpus = synth::generate_corpus(4, 5, 33, (3, 5)).unwrap();
        let ex = synth::encode_manifest(&corpus).remove(0);
        let out = greedy_decode(&model, ex.prompt(), 64).unwrap();
        assert!(out.len() + ex.prompt().len() <= model.cfg.max_seq);
    }

    #[test]
    fn accuracy_counts_content_positions_only() {
        let model = Model::init(&ModelConfig::default()).unwrap();
        let corpus = synth::generate_corpus(4, 10, 33, (3, 5)).unwrap();
        let examples = synth::encode_manifest(&corpus);
        let (acc, per) = content_accuracy(&model, &examples).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(per.len(), examples.len());
        let total: usize = examples.iter().map(|e| e.content_positions().len()).sum();
        let sources: usize = examples.iter().map(|e| e.target_start - 2).sum();
        assert_eq!(total, sources); // one content prediction per source token
    }
}
