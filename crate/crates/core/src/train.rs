//! AdamW and the two-stage recipe.
//!
//! Stage 1 specializes each expert independently: routing is forced one-hot
//! to the expert whose manifold matches the subset, and only that expert's
//! A/B matrices receive updates. Stage 2 freezes everything except the
//! router gates and optimizes them on the full mixture under the language
//! modeling loss alone — no manifold labels enter the loss path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{for_each_param_pair, loss_and_grads, Grads, Model, ParamGroup, ParamKey, PretrainSpec};
use crate::moe::{GradScope, RoutingMode, N_MANIFOLDS};
use crate::rng::{derive_seed, derive_seed_n, rng_from};
use crate::synth::TrainExample;
use rand::seq::SliceRandom;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHp {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHp {
    fn default() -> Self {
        AdamHp { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamHp {
    pub fn with_lr(lr: f64) -> AdamHp {
        AdamHp { lr, ..Default::default() }
    }
}

/// Decoupled-weight-decay Adam update with bias correction; `step` is
/// 1-based.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    hp: &AdamHp,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(Error::InvalidDim(format!(
            "adamw shapes disagree: param {}, grad {}, m {}, v {}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if hp.lr <= 0.0 {
        return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", hp.lr)));
    }
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= hp.lr * hp.weight_decay * param[i];
        param[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Which model parameters a training phase may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainableSet {
    /// Everything frozen after construction: embeddings, positions, base
    /// projections, up/down maps and the output head.
    Base,
    /// One expert's A and B matrices.
    Expert(usize),
    /// All router gates.
    Router,
}

impl TrainableSet {
    pub fn matches(&self, key: ParamKey) -> bool {
        match self {
            TrainableSet::Base => key.is_frozen_base(),
            TrainableSet::Expert(e) => {
                matches!(key.group, ParamGroup::ExpertA | ParamGroup::ExpertB)
                    && key.expert as usize == *e
            }
            TrainableSet::Router => {
                matches!(key.group, ParamGroup::RouterWeight | ParamGroup::RouterBias)
            }
        }
    }
}

/// Per-parameter first/second moments plus the step counter.
pub struct OptimizerState {
    pub hp: AdamHp,
    pub step: u64,
    moments: BTreeMap<ParamKey, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(hp: AdamHp) -> OptimizerState {
        OptimizerState { hp, step: 0, moments: BTreeMap::new() }
    }

    /// One optimizer step over the parameters selected by `set`.
    pub fn apply(&mut self, model: &mut Model, grads: &Grads, set: TrainableSet) -> Result<()> {
        self.step += 1;
        let step = self.step;
        let hp = self.hp;
        let moments = &mut self.moments;
        let mut result = Ok(());
        for_each_param_pair(model, grads, &mut |key, param, grad| {
            if result.is_err() || !set.matches(key) {
                return;
            }
            let (m, v) = moments
                .entry(key)
                .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
            if let Err(e) = adamw_update(param, grad, m, v, step, &hp) {
                result = Err(e);
            }
        });
        result
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainPlan {
    /// Stage 1 defaults: two epochs per expert.
    pub fn stage1(seed: u64) -> TrainPlan {
        TrainPlan { stage: Stage::Stage1, epochs: 2, batch_size: 4, lr: 1e-3, seed }
    }

    /// Stage 2 defaults: one epoch of router-only training.
    pub fn stage2(seed: u64) -> TrainPlan {
        TrainPlan { stage: Stage::Stage2, epochs: 1, batch_size: 4, lr: 1e-3, seed }
    }

    /// The parameter set a plan is allowed to touch.
    pub fn trainable_set(&self, expert: usize) -> TrainableSet {
        match self.stage {
            Stage::Stage1 => TrainableSet::Expert(expert),
            Stage::Stage2 => TrainableSet::Router,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub stage: String,
    pub loss: f64,
}

pub type TrainLog = Vec<TrainLogRow>;

pub fn write_train_log(path: &std::path::Path, log: &[TrainLogRow], meta: Option<&serde_json::Value>) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(meta) = meta {
        writeln!(w, "# meta: {meta}")?;
    }
    writeln!(w, "step,stage,loss")?;
    for row in log {
        writeln!(w, "{},{},{}", row.step, row.stage, row.loss)?;
    }
    Ok(())
}

struct LoopSpec {
    set: TrainableSet,
    mode: RoutingMode,
    scope: GradScope,
    epochs: Option<usize>,
    max_steps: Option<usize>,
    batch_size: usize,
    hp: AdamHp,
    seed: u64,
    label: String,
}

/// The shared inner loop: shuffled passes over the example set, mean-grad
/// batches, one AdamW state for the whole phase.
fn run_training(
    model: &mut Model,
    examples: &[&TrainExample],
    spec: &LoopSpec,
    log: &mut TrainLog,
) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::InvalidData(format!("{}: empty example set", spec.label)));
    }
    let mut opt = OptimizerState::new(spec.hp);
    let mut steps_done = 0usize;
    let mut pass = 0usize;
    loop {
        if let Some(max) = spec.max_steps {
            if steps_done >= max {
                break;
            }
        }
        if let Some(epochs) = spec.epochs {
            if pass >= epochs {
                break;
            }
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng_from(derive_seed_n(spec.seed, "epoch", pass as u64)));
        for chunk in order.chunks(spec.batch_size) {
            if let Some(max) = spec.max_steps {
                if steps_done >= max {
                    break;
                }
            }
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| examples[i]).collect();
            let (loss, grads) = loss_and_grads(model, &batch, spec.mode, spec.scope)?;
            opt.apply(model, &grads, spec.set)?;
            steps_done += 1;
            log.push(TrainLogRow { step: opt.step, stage: spec.label.to_string(), loss });
        }
        pass += 1;
    }
    Ok(())
}

/// Fits the base model (used before freezing; see
/// [`crate::model::BaseInit::Pretrained`]).
pub fn pretrain_base(
    model: &mut Model,
    examples: &[TrainExample],
    spec: &PretrainSpec,
) -> Result<TrainLog> {
    let refs: Vec<&TrainExample> = examples.iter().collect();
    let mut log = TrainLog::new();
    run_training(
        model,
        &refs,
        &LoopSpec {
            set: TrainableSet::Base,
            mode: RoutingMode::BaseOnly,
            scope: GradScope::All,
            epochs: None,
            max_steps: Some(spec.steps),
            batch_size: spec.batch_size,
            hp: AdamHp::with_lr(spec.lr),
            seed: derive_seed(spec.seed, "pretrain"),
            label: "pretrain".into(),
        },
        &mut log,
    )?;
    Ok(log)
}

/// Stage 1: for each manifold, train only the matching expert's A/B on that
/// manifold's subset, with routing forced to it. The five trainings are
/// mutually independent; base, other experts and routers stay untouched.
pub fn stage1_specialize(
    model: &mut Model,
    examples: &[TrainExample],
    plan: &TrainPlan,
) -> Result<TrainLog> {
    if plan.stage != Stage::Stage1 {
        return Err(Error::InvalidConfig("stage1_specialize requires a Stage1 plan".into()));
    }
    plan.validate()?;
    if model.n_experts() != N_MANIFOLDS {
        return Err(Error::InvalidConfig(format!(
            "stage 1 pairs experts with the {N_MANIFOLDS} manifolds; model has {}",
            model.n_experts()
        )));
    }
    let mut log = TrainLog::new();
    for (mi, manifold) in crate::moe::Manifold::ALL.iter().enumerate() {
        let subset: Vec<&TrainExample> =
            examples.iter().filter(|e| e.manifold == Some(*manifold)).collect();
        if subset.is_empty() {
            return Err(Error::InvalidData(format!("no records for manifold {manifold}")));
        }
        run_training(
            model,
            &subset,
            &LoopSpec {
                set: TrainableSet::Expert(mi),
                mode: RoutingMode::Forced(mi),
                scope: GradScope::Trainable,
                epochs: Some(plan.epochs),
                max_steps: None,
                batch_size: plan.batch_size,
                hp: AdamHp::with_lr(plan.lr),
                seed: derive_seed_n(plan.seed, "stage1", mi as u64),
                label: format!("stage1-{manifold}"),
            },
            &mut log,
        )?;
    }
    Ok(log)
}

/// Stage 2: router-only optimization on the full set under the language
/// modeling loss. The loss path sees tokens and masks only — never manifold
/// labels.
pub fn stage2_route(
    model: &mut Model,
    examples: &[TrainExample],
    plan: &TrainPlan,
) -> Result<TrainLog> {
    if plan.stage != Stage::Stage2 {
        return Err(Error::InvalidConfig("stage2_route requires a Stage2 plan".into()));
    }
    plan.validate()?;
    let refs: Vec<&TrainExample> = examples.iter().collect();
    let mut log = TrainLog::new();
    run_training(
        model,
        &refs,
        &LoopSpec {
            set: TrainableSet::Router,
            mode: RoutingMode::Soft,
            scope: GradScope::Trainable,
            epochs: Some(plan.epochs),
            max_steps: None,
            batch_size: plan.batch_size,
            hp: AdamHp::with_lr(plan.lr),
            seed: derive_seed(plan.seed, "stage2"),
            label: "stage2".into(),
        },
        &mut log,
    )?;
    Ok(log)
}

/// Single-adapter fine-tuning: expert 0 trained on the whole set with
/// routing forced to it, for a fixed step budget. This is the configuration
/// the data-scale sweep uses.
pub fn finetune_single(
    model: &mut Model,
    examples: &[TrainExample],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainLog> {
    let refs: Vec<&TrainExample> = examples.iter().collect();
    let mut log = TrainLog::new();
    run_training(
        model,
        &refs,
        &LoopSpec {
            set: TrainableSet::Expert(0),
            mode: RoutingMode::Forced(0),
            scope: GradScope::Trainable,
            epochs: None,
            max_steps: Some(steps),
            batch_size,
            hp: AdamHp::with_lr(lr),
            seed: derive_seed(seed, "sft"),
            label: "sft".into(),
        },
        &mut log,
    )?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::moe::ProjectionSite;
    use crate::synth;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 33,
            d: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq: 24,
            move_rank: 2,
            move_alpha: 2.0,
            n_experts: 5,
            sites: ProjectionSite::ALL.to_vec(),
            seed: 17,
        }
    }

    #[test]
    fn adamw_zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![0.7, -1.3];
        let g = vec![0.0, 0.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adamw_update(&mut p, &g, &mut m, &mut v, 1, &AdamHp::default()).unwrap();
        assert_eq!(p, vec![0.7, -1.3]);
    }

    #[test]
    fn adamw_single_step_matches_hand_computation() {
        // g=1, lr=0.1, β1=0.9, β2=0.95, wd=0, ε=1e-8:
        // m=0.1, v=0.05, m̂=1, v̂=1 → update = −0.1 · 1/(1+1e-8)
        let hp = AdamHp { lr: 0.1, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 };
        let mut p = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, &hp).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adamw_rejects_shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        assert!(adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, &AdamHp::default()).is_err());
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let hp = AdamHp { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut p = vec![2.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, &hp).unwrap();
        // zero gradient: only the decay term acts
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn stage1_touches_only_the_matching_expert() {
        let cfg = tiny_cfg();
        let mut model = Model::init(&cfg).unwrap();
        let corpus = synth::generate_corpus(3, 20, 33, (3, 5)).unwrap();
        let examples = synth::encode_manifest(&corpus);
        let before = model.clone();
        let plan = TrainPlan { epochs: 1, ..TrainPlan::stage1(5) };
        stage1_specialize(&mut model, &examples, &plan).unwrap();
        // base and routers bit-identical
        assert_eq!(model.embed, before.embed);
        assert_eq!(model.out_proj, before.out_proj);
        for (b_after, b_before) in model.blocks.iter().zip(&before.blocks) {
            assert_eq!(b_after.up, b_before.up);
            for ((pa, _), (pb, _)) in b_after.projections().iter().zip(b_before.projections().iter())
            {
                let la = pa.as_moe().unwrap();
                let lb = pb.as_moe().unwrap();
                assert_eq!(la.base, lb.base);
                assert_eq!(la.router, lb.router);
                // every expert changed (each got its own subset)
                for (ea, eb) in la.experts.iter().zip(&lb.experts) {
                    assert_ne!(ea.b, eb.b, "expert {:?} should have trained", ea.manifold);
                }
            }
        }
    }

    #[test]
    fn stage2_touches_only_routers() {
        let cfg = tiny_cfg();
        let mut model = Model::init(&cfg).unwrap();
        let corpus = synth::generate_corpus(3, 15, 33, (3, 5)).unwrap();
        let examples = synth::encode_manifest(&corpus);
        stage1_specialize(&mut model, &examples, &TrainPlan { epochs: 1, ..TrainPlan::stage1(5) })
            .unwrap();
        let before = model.clone();
        stage2_route(&mut model, &examples, &TrainPlan::stage2(6)).unwrap();
        for (b_after, b_before) in model.blocks.iter().zip(&before.blocks) {
            for ((pa, _), (pb, _)) in b_after.projections().iter().zip(b_before.projections().iter())
            {
                let la = pa.as_moe().unwrap();
                let lb = pb.as_moe().unwrap();
                assert_eq!(la.base, lb.base);
                for (ea, eb) in la.experts.iter().zip(&lb.experts) {
                    assert_eq!(ea, eb); // experts bit-identical through stage 2
                }
                assert_ne!(la.router, lb.router); // routers moved
            }
        }
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny_cfg();
        let corpus = synth::generate_corpus(9, 15, 33, (3, 5)).unwrap();
        let examples = synth::encode_manifest(&corpus);
        let run = || {
            let mut model = Model::init(&cfg).unwrap();
            let plan = TrainPlan { epochs: 1, ..TrainPlan::stage1(5) };
            stage1_specialize(&mut model, &examples, &plan).unwrap();
            stage2_route(&mut model, &examples, &TrainPlan::stage2(6)).unwrap();
            model
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stage_plans_validate() {
        let cfg = tiny_cfg();
        let mut model = Model::init(&cfg).unwrap();
        let corpus = synth::generate_corpus(3, 10, 33, (3, 5)).unwrap();
        let examples = synth::encode_manifest(&corpus);
        assert!(stage1_specialize(&mut model, &examples, &TrainPlan::stage2(1)).is_err());
        assert!(stage2_route(&mut model, &examples, &TrainPlan::stage1(1)).is_err());
        assert!(stage2_route(&mut model, &[], &TrainPlan::stage2(1)).is_err());
        // missing manifold subset
        let partial: Vec<TrainExample> = examples
            .iter()
            .filter(|e| e.manifold != Some(crate::moe::Manifold::Cry))
            .cloned()
            .collect();
        assert!(stage1_specialize(&mut model, &partial, &TrainPlan::stage1(1)).is_err());
    }

    #[test]
    fn loss_decreases_over_first_50_steps() {
        // a learnable signal: pretraining from scratch on neutral data
        let cfg = ModelConfig { max_seq: 24, ..tiny_cfg() };
        let mut model = Model::init(&cfg).unwrap();
        let examples = synth::neutral_examples(4, 64, 33, (3, 6)).unwrap();
        let spec = PretrainSpec {
            records: 64,
            len_range: (3, 6),
            steps: 50,
            batch_size: 8,
            lr: 3e-3,
            seed: 4,
        };
        let log = pretrain_base(&mut model, &examples, &spec).unwrap();
        assert_eq!(log.len(), 50);
        let first = log.first().unwrap().loss;
        let last = log.last().unwrap().loss;
        assert!(last < first, "loss should decrease: {first} → {last}");
    }
}
