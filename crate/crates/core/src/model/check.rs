//! Finite-difference verification of the analytic gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::moe::{GradScope, RoutingMode};
use crate::rng::{derive_seed_n, rng_from};
use crate::synth::TrainExample;

use super::backward::{for_each_param_pair, loss_and_grads, ParamKey};
use super::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Key and flat index of the worst coordinate.
    pub worst: (ParamKey, usize),
}

fn batch_loss(model: &Model, batch: &[&TrainExample]) -> Result<f64> {
    // loss only; gradients discarded
    Ok(loss_and_grads(model, batch, RoutingMode::Soft, GradScope::Trainable)?.0)
}

/// Compares analytic gradients of the batch loss against central finite
/// differences on a random subsample of the trainable (expert and router)
/// coordinates. Every trainable tensor contributes at least one coordinate,
/// so all adapted sites are covered.
pub fn grad_check(
    model: &Model,
    batch: &[&TrainExample],
    eps: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::InvalidData(format!("eps must be positive, got {eps}")));
    }
    let (_, grads) = loss_and_grads(model, batch, RoutingMode::Soft, GradScope::Trainable)?;

    // collect the trainable tensors and their analytic gradients
    let mut work = model.clone();
    let mut tensors: Vec<(ParamKey, usize, Vec<f64>)> = Vec::new();
    for_each_param_pair(&mut work, &grads, &mut |key, p, g| {
        if !key.is_frozen_base() {
            tensors.push((key, p.len(), g.to_vec()));
        }
    });
    if tensors.is_empty() {
        return Err(Error::InvalidData("model has no trainable parameters".into()));
    }

    let per_tensor = min_coords.div_ceil(tensors.len()).max(1);
    let mut plan: Vec<(ParamKey, usize, f64)> = Vec::new();
    for (ti, (key, len, g)) in tensors.iter().enumerate() {
        let mut rng = rng_from(derive_seed_n(seed, "grad-check", ti as u64));
        for _ in 0..per_tensor.min(*len) {
            let idx = rng.random_range(0..*len);
            plan.push((*key, idx, g[idx]));
        }
    }

    let mut max_rel = 0.0;
    let mut worst = (plan[0].0, plan[0].1);
    let mut checked = 0usize;
    for (key, idx, analytic) in plan {
        let nudge = |model: &mut Model, delta: f64| {
            for_each_param_pair(model, &grads, &mut |k, p, _| {
                if k == key {
                    p[idx] += delta;
                }
            });
        };
        nudge(&mut work, eps);
        let up = batch_loss(&work, batch)?;
        nudge(&mut work, -2.0 * eps);
        let down = batch_loss(&work, batch)?;
        nudge(&mut work, eps); // restore
        let numeric = (up - down) / (2.0 * eps);
        let denom = (analytic.abs() + numeric.abs()).max(1e-6);
        let rel = (analytic - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = (key, idx);
        }
        checked += 1;
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked, worst })
}
