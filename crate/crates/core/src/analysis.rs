//! Router–manifold disentanglement measurement: routing traces, dominant
//! expert extraction, the confusion matrix and alignment accuracy.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::moe::{Manifold, RoutingMode, N_MANIFOLDS};
use crate::synth::TrainExample;

/// Gate observations for one utterance: every soft-router weight vector
/// produced while the model consumed the target region, over all tokens,
/// layers and adapted sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub id: String,
    pub manifold: Manifold,
    pub gates: Vec<Vec<f64>>,
}

impl RoutingTrace {
    pub fn new(id: String, manifold: Manifold, gates: Vec<Vec<f64>>) -> Result<RoutingTrace> {
        for g in &gates {
            if g.len() != N_MANIFOLDS {
                return Err(Error::InvalidDim(format!(
                    "gate vector of length {}, expected {N_MANIFOLDS}",
                    g.len()
                )));
            }
            if g.iter().any(|v| *v < -1e-12) || (g.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidData(format!("gate vector off the simplex: {g:?}")));
            }
        }
        Ok(RoutingTrace { id, manifold, gates })
    }
}

/// How the dominant expert of a trace is decided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DominanceMode {
    /// Argmax of the mean gate weight over all observations (default).
    MeanWeight,
    /// Plurality vote of per-observation argmaxes.
    TokenVote,
}

fn argmax_lowest_tie(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// The expert a trace routes to overall; ties break toward the lowest
/// expert index.
pub fn dominant_expert(trace: &RoutingTrace, mode: DominanceMode) -> Result<Manifold> {
    if trace.gates.is_empty() {
        return Err(Error::InvalidData(format!("trace {} has no gate observations", trace.id)));
    }
    let idx = match mode {
        DominanceMode::MeanWeight => {
            let mut mean = [0.0; N_MANIFOLDS];
            for g in &trace.gates {
                for (m, v) in mean.iter_mut().zip(g) {
                    *m += v;
                }
            }
            argmax_lowest_tie(&mean)
        }
        DominanceMode::TokenVote => {
            let mut votes = [0.0; N_MANIFOLDS];
            for g in &trace.gates {
                votes[argmax_lowest_tie(g)] += 1.0;
            }
            argmax_lowest_tie(&votes)
        }
    };
    Ok(Manifold::from_index(idx).expect("index in range"))
}

/// Counts indexed by `[true manifold][dominant expert]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_MANIFOLDS]; N_MANIFOLDS],
}

impl ConfusionMatrix {
    pub fn zeros() -> ConfusionMatrix {
        ConfusionMatrix { counts: [[0; N_MANIFOLDS]; N_MANIFOLDS] }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..N_MANIFOLDS).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }

    /// Per-manifold recall (0 for empty rows).
    pub fn per_class_recall(&self) -> [f64; N_MANIFOLDS] {
        let mut out = [0.0; N_MANIFOLDS];
        for i in 0..N_MANIFOLDS {
            let total = self.row_total(i);
            if total > 0 {
                out[i] = self.counts[i][i] as f64 / total as f64;
            }
        }
        out
    }

    /// Row-normalized matrix for plotting (0 rows stay 0).
    pub fn normalized(&self) -> [[f64; N_MANIFOLDS]; N_MANIFOLDS] {
        let mut out = [[0.0; N_MANIFOLDS]; N_MANIFOLDS];
        for i in 0..N_MANIFOLDS {
            let total = self.row_total(i);
            if total > 0 {
                for j in 0..N_MANIFOLDS {
                    out[i][j] = self.counts[i][j] as f64 / total as f64;
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path, meta: Option<&serde_json::Value>) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        if let Some(meta) = meta {
            writeln!(w, "# meta: {meta}")?;
        }
        write!(w, "true\\dominant")?;
        for m in Manifold::ALL {
            write!(w, ",{m}")?;
        }
        writeln!(w)?;
        for (i, m) in Manifold::ALL.iter().enumerate() {
            write!(w, "{m}")?;
            for j in 0..N_MANIFOLDS {
                write!(w, ",{}", self.counts[i][j])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_normalized_csv(&self, path: &Path, meta: Option<&serde_json::Value>) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let norm = self.normalized();
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        if let Some(meta) = meta {
            writeln!(w, "# meta: {meta}")?;
        }
        write!(w, "true\\dominant")?;
        for m in Manifold::ALL {
            write!(w, ",{m}")?;
        }
        writeln!(w)?;
        for (i, m) in Manifold::ALL.iter().enumerate() {
            write!(w, "{m}")?;
            for j in 0..N_MANIFOLDS {
                write!(w, ",{}", norm[i][j])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Tallies dominant experts against true manifolds.
pub fn confusion(traces: &[RoutingTrace], mode: DominanceMode) -> Result<ConfusionMatrix> {
    if traces.is_empty() {
        return Err(Error::InvalidData("no traces".into()));
    }
    let mut cm = ConfusionMatrix::zeros();
    for t in traces {
        let dom = dominant_expert(t, mode)?;
        cm.counts[t.manifold.index()][dom.index()] += 1;
    }
    Ok(cm)
}

/// trace / total.
pub fn alignment_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidData("empty confusion matrix".into()));
    }
    Ok(cm.diagonal() as f64 / total as f64)
}

/// Runs the model over each example and collects its routing trace: gate
/// vectors at every position whose input token lies in the target region.
pub fn trace_model(model: &Model, examples: &[TrainExample]) -> Result<Vec<RoutingTrace>> {
    if model.n_experts() != N_MANIFOLDS {
        return Err(Error::InvalidConfig(format!(
            "tracing needs {N_MANIFOLDS} experts, model has {}",
            model.n_experts()
        )));
    }
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let manifold = ex.manifold.ok_or_else(|| {
            Error::InvalidData(format!("example {} has no manifold label", ex.id))
        })?;
        let inputs = &ex.tokens[..ex.tokens.len() - 1];
        let (_, cache) = model.forward_cached(inputs, RoutingMode::Soft)?;
        let mut gates = Vec::new();
        for pos in ex.trace_positions() {
            for g in cache.gates_at(pos) {
                gates.push(g.to_vec());
            }
        }
        out.push(RoutingTrace::new(ex.id.clone(), manifold, gates)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoutingSummary {
    pub accuracy: f64,
    pub per_class_recall: [f64; N_MANIFOLDS],
    pub n_traces: u64,
}

pub fn summarize(cm: &ConfusionMatrix) -> Result<RoutingSummary> {
    Ok(RoutingSummary {
        accuracy: alignment_accuracy(cm)?,
        per_class_recall: cm.per_class_recall(),
        n_traces: cm.total(),
    })
}
