//! Small decoder-only autoregressive model whose attention and feed-forward
//! gating projections are soft-routed expert mixtures over a frozen base.
//!
//! Every block is pre-norm: RMS-normed input feeds causal multi-head
//! attention (query/key/value/output projections), then a gated feed-forward
//! (`down(silu(gate(x)) ⊙ up(x))`), each with a residual connection. The
//! adapted projection sites come from the config; everything else (embedding,
//! positions, up/down maps, output projection) is frozen after construction.
//!
//! Gradients are hand-rolled reverse mode in double precision, verified
//! against central finite differences (see [`check`]).

mod backward;
mod check;
mod eval;

pub use backward::{for_each_param_pair, loss_and_grads, BlockGrads, Grads, ParamGroup, ParamKey, ProjGrads};
pub use check::{grad_check, GradCheckReport};
pub use eval::{content_accuracy, forced_routing_loss, greedy_decode, per_record_content_accuracy};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, silu, Mat};
use crate::moe::{MoeCache, MoeLayer, ProjectionSite, RoutingMode};
use crate::rng::{derive_seed, rng_from};
use crate::synth::TrainExample;

pub const RMS_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub move_rank: usize,
    pub move_alpha: f64,
    pub n_experts: usize,
    pub sites: Vec<ProjectionSite>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 33,
            d: 32,
            n_layers: 2,
            n_heads: 4,
            max_seq: 48,
            move_rank: 8,
            move_alpha: 8.0,
            n_experts: 5,
            sites: ProjectionSite::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::InvalidConfig("sizes must be positive".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden dim {} not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if self.max_seq < 2 {
            return Err(Error::InvalidConfig("max_seq must be at least 2".into()));
        }
        if self.move_rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be at least 1".into()));
        }
        if self.move_alpha <= 0.0 {
            return Err(Error::InvalidConfig("adapter alpha must be positive".into()));
        }
        if self.n_experts == 0 || self.n_experts > crate::moe::N_MANIFOLDS {
            return Err(Error::InvalidConfig(format!(
                "n_experts must be in 1..={}, got {}",
                crate::moe::N_MANIFOLDS,
                self.n_experts
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.sites {
            if !seen.insert(*s) {
                return Err(Error::InvalidConfig(format!("duplicate site {:?}", s)));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        2 * self.d
    }
}

/// A projection matrix slot: either an adapted mixture layer or a plain
/// frozen matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    Moe(MoeLayer),
    Dense(Mat),
}

impl Projection {
    pub fn out_dim(&self) -> usize {
        match self {
            Projection::Moe(l) => l.out_dim(),
            Projection::Dense(m) => m.rows,
        }
    }

    pub fn as_moe(&self) -> Option<&MoeLayer> {
        match self {
            Projection::Moe(l) => Some(l),
            Projection::Dense(_) => None,
        }
    }

    pub fn as_moe_mut(&mut self) -> Option<&mut MoeLayer> {
        match self {
            Projection::Moe(l) => Some(l),
            Projection::Dense(_) => None,
        }
    }

    fn forward_cached(&self, x: &[f64], mode: RoutingMode) -> Result<(Vec<f64>, ProjCache)> {
        match self {
            Projection::Moe(l) => {
                let mut cache = MoeCache::default();
                let y = l.forward_cached(x, mode, &mut cache)?;
                Ok((y, ProjCache::Moe(cache)))
            }
            Projection::Dense(m) => Ok((m.matvec(x), ProjCache::Dense(x.to_vec()))),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Projection::Moe(l) => l.is_finite(),
            Projection::Dense(m) => m.is_finite(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ProjCache {
    Moe(MoeCache),
    Dense(Vec<f64>),
}

impl ProjCache {
    /// Router mixture weights recorded by this call, when soft-routed.
    pub fn gates(&self) -> Option<&[f64]> {
        match self {
            ProjCache::Moe(c) if c.mode == RoutingMode::Soft => Some(&c.gates),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    pub gate: Projection,
    pub up: Mat,
    pub down: Mat,
}

impl Block {
    pub fn projections(&self) -> [(&Projection, ProjectionSite); 5] {
        [
            (&self.q, ProjectionSite::Query),
            (&self.k, ProjectionSite::Key),
            (&self.v, ProjectionSite::Value),
            (&self.o, ProjectionSite::Output),
            (&self.gate, ProjectionSite::FeedForwardGate),
        ]
    }
}

/// How the base weights are produced before freezing.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseInit {
    /// Freshly sampled base weights, frozen as-is.
    Random,
    /// Base weights fitted on a neutral copy/translation corpus, then
    /// frozen.
    Pretrained(PretrainSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub records: usize,
    pub len_range: (usize, usize),
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            records: 3000,
            len_range: (4, 9),
            steps: 4000,
            batch_size: 8,
            lr: 3e-3,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embed: Mat,
    pub pos: Mat,
    pub blocks: Vec<Block>,
    pub out_proj: Mat,
}

fn normal_mat(rows: usize, cols: usize, std: f64, seed: u64) -> Mat {
    let normal = Normal::new(0.0, std).expect("valid std");
    let mut rng = rng_from(seed);
    Mat::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
}

impl Model {
    /// Fresh model: sampled base weights, zero-delta experts, uniform
    /// routers. Deterministic in `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let d = cfg.d;
        let proj_std = 1.0 / (d as f64).sqrt();
        let ffn = cfg.ffn_hidden();
        let make_proj = |site: ProjectionSite, out_dim: usize, layer: usize| -> Result<Projection> {
            let tag = format!("l{layer}.{}.base", site.name());
            let base = normal_mat(out_dim, d, proj_std, derive_seed(cfg.seed, &tag));
            if cfg.sites.contains(&site) {
                let etag = format!("l{layer}.{}.experts", site.name());
                Ok(Projection::Moe(MoeLayer::around_base(
                    site,
                    base,
                    cfg.n_experts,
                    cfg.move_rank,
                    cfg.move_alpha,
                    derive_seed(cfg.seed, &etag),
                )?))
            } else {
                Ok(Projection::Dense(base))
            }
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            blocks.push(Block {
                q: make_proj(ProjectionSite::Query, d, l)?,
                k: make_proj(ProjectionSite::Key, d, l)?,
                v: make_proj(ProjectionSite::Value, d, l)?,
                o: make_proj(ProjectionSite::Output, d, l)?,
                gate: make_proj(ProjectionSite::FeedForwardGate, ffn, l)?,
                up: normal_mat(ffn, d, proj_std, derive_seed(cfg.seed, &format!("l{l}.up"))),
                down: normal_mat(
                    d,
                    ffn,
                    1.0 / (ffn as f64).sqrt(),
                    derive_seed(cfg.seed, &format!("l{l}.down")),
                ),
            });
        }
        Ok(Model {
            cfg: cfg.clone(),
            embed: normal_mat(cfg.vocab_size, d, 0.1, derive_seed(cfg.seed, "embed")),
            pos: normal_mat(cfg.max_seq, d, 0.1, derive_seed(cfg.seed, "pos")),
            blocks,
            out_proj: normal_mat(cfg.vocab_size, d, proj_std, derive_seed(cfg.seed, "out")),
        })
    }

    /// Builds a model with the requested base initialization. The
    /// `Pretrained` branch fits the base weights on a neutral
    /// copy/translation corpus (experts and routers untouched), then the
    /// base is frozen like everything else.
    pub fn build(cfg: &ModelConfig, init: &BaseInit) -> Result<Model> {
        let mut model = Model::init(cfg)?;
        if let BaseInit::Pretrained(spec) = init {
            let needed = crate::synth::max_encoded_len(spec.len_range.1);
            if needed > cfg.max_seq {
                return Err(Error::InvalidConfig(format!(
                    "max_seq {} too small for pretraining length range (needs {needed})",
                    cfg.max_seq
                )));
            }
            let examples = crate::synth::neutral_examples(
                spec.seed,
                spec.records,
                cfg.vocab_size,
                spec.len_range,
            )?;
            crate::train::pretrain_base(&mut model, &examples, spec)?;
        }
        Ok(model)
    }

    pub fn n_experts(&self) -> usize {
        self.cfg.n_experts
    }

    /// Token-level forward pass: logits per position (seq × vocab), soft
    /// routing.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_cached(tokens, RoutingMode::Soft)?.0)
    }

    fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidData("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::InvalidData(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::InvalidData(format!(
                "token {t} out of vocabulary (size {})",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Forward pass recording all intermediates for the backward pass.
    pub fn forward_cached(
        &self,
        tokens: &[u32],
        mode: RoutingMode,
    ) -> Result<(Vec<Vec<f64>>, SeqCache)> {
        self.validate_tokens(tokens)?;
        let seq = tokens.len();
        let d = self.cfg.d;
        let n_heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let ffn = self.cfg.ffn_hidden();

        let mut x: Vec<Vec<f64>> = Vec::with_capacity(seq);
        for (t, &tok) in tokens.iter().enumerate() {
            let mut row = self.embed.row(tok as usize).to_vec();
            for (a, b) in row.iter_mut().zip(self.pos.row(t)) {
                *a += b;
            }
            x.push(row);
        }
        let x0 = x.clone();

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let x_in = x;
            let mut n1_inv = Vec::with_capacity(seq);
            let mut xn1 = Vec::with_capacity(seq);
            for row in &x_in {
                let (normed, inv) = rms_norm(row);
                n1_inv.push(inv);
                xn1.push(normed);
            }
            let mut qc = Vec::with_capacity(seq);
            let mut kc = Vec::with_capacity(seq);
            let mut vc = Vec::with_capacity(seq);
            let mut q = Vec::with_capacity(seq);
            let mut k = Vec::with_capacity(seq);
            let mut v = Vec::with_capacity(seq);
            for row in &xn1 {
                let (y, c) = block.q.forward_cached(row, mode)?;
                q.push(y);
                qc.push(c);
                let (y, c) = block.k.forward_cached(row, mode)?;
                k.push(y);
                kc.push(c);
                let (y, c) = block.v.forward_cached(row, mode)?;
                v.push(y);
                vc.push(c);
            }
            // causal multi-head attention
            let mut probs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(seq);
            let mut ctx: Vec<Vec<f64>> = Vec::with_capacity(seq);
            for t in 0..seq {
                let mut head_probs = Vec::with_capacity(n_heads);
                let mut ctx_t = vec![0.0; d];
                for h in 0..n_heads {
                    let r = h * hd..(h + 1) * hd;
                    let qh = &q[t][r.clone()];
                    let mut scores = Vec::with_capacity(t + 1);
                    for j in 0..=t {
                        scores.push(crate::linalg::dot(qh, &k[j][r.clone()]) * scale);
                    }
                    crate::linalg::softmax_in_place(&mut scores);
                    for j in 0..=t {
                        let p = scores[j];
                        let vh = &v[j][r.clone()];
                        for (idx, c) in r.clone().enumerate() {
                            ctx_t[c] += p * vh[idx];
                        }
                    }
                    head_probs.push(scores);
                }
                probs.push(head_probs);
                ctx.push(ctx_t);
            }
            let mut oc = Vec::with_capacity(seq);
            let mut x_mid = Vec::with_capacity(seq);
            for t in 0..seq {
                let (o_out, c) = block.o.forward_cached(&ctx[t], mode)?;
                oc.push(c);
                let mut row = x_in[t].clone();
                for (a, b) in row.iter_mut().zip(&o_out) {
                    *a += b;
                }
                x_mid.push(row);
            }
            let mut n2_inv = Vec::with_capacity(seq);
            let mut xn2 = Vec::with_capacity(seq);
            for row in &x_mid {
                let (normed, inv) = rms_norm(row);
                n2_inv.push(inv);
                xn2.push(normed);
            }
            let mut gc = Vec::with_capacity(seq);
            let mut gate_out = Vec::with_capacity(seq);
            let mut up_out = Vec::with_capacity(seq);
            let mut act = Vec::with_capacity(seq);
            let mut x_out = Vec::with_capacity(seq);
            for t in 0..seq {
                let (g_out, c) = block.gate.forward_cached(&xn2[t], mode)?;
                gc.push(c);
                let u_out = block.up.matvec(&xn2[t]);
                let mut a = vec![0.0; ffn];
                for i in 0..ffn {
                    a[i] = silu(g_out[i]) * u_out[i];
                }
                let mut row = x_mid[t].clone();
                block.down.matvec_acc(&a, &mut row);
                gate_out.push(g_out);
                up_out.push(u_out);
                act.push(a);
                x_out.push(row);
            }
            block_caches.push(BlockCache {
                x_in,
                n1_inv,
                xn1,
                qc,
                kc,
                vc,
                oc,
                gc,
                q,
                k,
                v,
                probs,
                ctx,
                x_mid,
                n2_inv,
                xn2,
                gate_out,
                up_out,
                act,
            });
            x = x_out;
        }

        let x_final = x;
        let mut fin_inv = Vec::with_capacity(seq);
        let mut fin_h = Vec::with_capacity(seq);
        for row in &x_final {
            let (normed, inv) = rms_norm(row);
            fin_inv.push(inv);
            fin_h.push(normed);
        }
        let logits: Vec<Vec<f64>> = fin_h.iter().map(|h| self.out_proj.matvec(h)).collect();
        Ok((logits, SeqCache { x0, blocks: block_caches, x_final, fin_inv, fin_h }))
    }

    /// Perturbs expert `B` matrices and router gates with Gaussian noise.
    /// Useful for gradient checking and routing experiments, where the
    /// zero-initialized adapters would make most gradients vanish.
    pub fn randomize_adapters(&mut self, seed: u64, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut rng = rng_from(seed);
        for block in &mut self.blocks {
            for proj in [
                &mut block.q,
                &mut block.k,
                &mut block.v,
                &mut block.o,
                &mut block.gate,
            ] {
                if let Projection::Moe(layer) = proj {
                    for e in &mut layer.experts {
                        for w in &mut e.b.data {
                            *w = normal.sample(&mut rng);
                        }
                    }
                    for w in &mut layer.router.weight.data {
                        *w = normal.sample(&mut rng);
                    }
                    for w in &mut layer.router.bias {
                        *w = normal.sample(&mut rng);
                    }
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embed.is_finite()
            && self.pos.is_finite()
            && self.out_proj.is_finite()
            && self.blocks.iter().all(|b| {
                b.q.is_finite()
                    && b.k.is_finite()
                    && b.v.is_finite()
                    && b.o.is_finite()
                    && b.gate.is_finite()
                    && b.up.is_finite()
                    && b.down.is_finite()
            })
    }
}

fn rms_norm(x: &[f64]) -> (Vec<f64>, f64) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    (x.iter().map(|v| v * inv).collect(), inv)
}

/// dL/dx for `y = x · inv` where `inv = (mean(x²)+ε)^(-1/2)`.
pub(crate) fn rms_bwd(dy: &[f64], x: &[f64], inv: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let proj = crate::linalg::dot(dy, x);
    let f = inv * inv * inv / n;
    dy.iter().zip(x).map(|(dyi, xi)| inv * dyi - f * proj * xi).collect()
}

/// Per-sequence forward intermediates.
#[derive(Clone, Debug)]
pub struct SeqCache {
    pub x0: Vec<Vec<f64>>,
    pub blocks: Vec<BlockCache>,
    pub x_final: Vec<Vec<f64>>,
    pub fin_inv: Vec<f64>,
    pub fin_h: Vec<Vec<f64>>,
}

impl SeqCache {
    /// All soft-router mixture weights observed at one position, in a fixed
    /// layer-major, site-major order.
    pub fn gates_at(&self, pos: usize) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for pc in [&b.qc[pos], &b.kc[pos], &b.vc[pos], &b.oc[pos], &b.gc[pos]] {
                if let Some(g) = pc.gates() {
                    out.push(g);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    pub x_in: Vec<Vec<f64>>,
    pub n1_inv: Vec<f64>,
    pub xn1: Vec<Vec<f64>>,
    pub qc: Vec<ProjCache>,
    pub kc: Vec<ProjCache>,
    pub vc: Vec<ProjCache>,
    pub oc: Vec<ProjCache>,
    pub gc: Vec<ProjCache>,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Attention weights `[pos][head][j ≤ pos]`.
    pub probs: Vec<Vec<Vec<f64>>>,
    pub ctx: Vec<Vec<f64>>,
    pub x_mid: Vec<Vec<f64>>,
    pub n2_inv: Vec<f64>,
    pub xn2: Vec<Vec<f64>>,
    pub gate_out: Vec<Vec<f64>>,
    pub up_out: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
}

/// Mean token-level cross entropy over masked-in positions.
///
/// `logits[t]` scores the prediction of `targets[t]`; `mask[t]` selects the
/// positions that contribute.
pub fn lm_loss(logits: &[Vec<f64>], targets: &[u32], mask: &[bool]) -> Result<f64> {
    if logits.len() != targets.len() || logits.len() != mask.len() {
        return Err(Error::InvalidDim(format!(
            "loss shapes disagree: {} logits, {} targets, {} mask",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..logits.len() {
        if !mask[t] {
            continue;
        }
        let row = &logits[t];
        let target = targets[t] as usize;
        if target >= row.len() {
            return Err(Error::InvalidData(format!("target {target} out of vocabulary")));
        }
        total += log_sum_exp(row) - row[target];
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidData("empty mask: no positions contribute to the loss".into()));
    }
    Ok(total / count as f64)
}

/// Convenience: loss of one encoded example under a routing mode.
pub fn example_loss(model: &Model, ex: &TrainExample, mode: RoutingMode) -> Result<f64> {
    let (logits, _) = model.forward_cached(&ex.tokens[..ex.tokens.len() - 1], mode)?;
    lm_loss(&logits, &ex.tokens[1..], &ex.mask)
}

/// Scope-aware wrapper re-exported for callers that only need names.
pub use crate::moe::{GradScope as Scope, RoutingMode as Routing};
