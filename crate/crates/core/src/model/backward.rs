//! Reverse-mode gradients through the decoder.
//!
//! The backward pass mirrors the cached forward exactly; parameter gradients
//! accumulate into a [`Grads`] tree shaped like the model. Under
//! [`GradScope::Trainable`] only expert and router gradients are produced —
//! frozen parameters (base projections, embeddings, up/down, output head)
//! keep identically zero gradients, while input gradients still flow through
//! them.

use crate::error::{Error, Result};
use crate::linalg::{dot, silu, silu_deriv, softmax_in_place, Mat};
use crate::moe::{GradScope, MoeGrads, RoutingMode};
use crate::synth::TrainExample;

use super::{rms_bwd, Block, Model, ProjCache, Projection, SeqCache};

/// Identifies one parameter tensor in the model tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: ParamGroup,
    pub layer: u32,
    /// Site index in q/k/v/o/gate order; unused for non-projection groups.
    pub site: u8,
    /// Expert index; unused outside expert tensors.
    pub expert: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Embed,
    Pos,
    OutProj,
    Up,
    Down,
    ProjBase,
    ExpertA,
    ExpertB,
    RouterWeight,
    RouterBias,
}

impl ParamKey {
    fn plain(group: ParamGroup) -> ParamKey {
        ParamKey { group, layer: 0, site: 0, expert: 0 }
    }

    /// Frozen parameters never receive optimizer updates.
    pub fn is_frozen_base(&self) -> bool {
        matches!(
            self.group,
            ParamGroup::Embed
                | ParamGroup::Pos
                | ParamGroup::OutProj
                | ParamGroup::Up
                | ParamGroup::Down
                | ParamGroup::ProjBase
        )
    }
}

/// Gradient tree matching [`Model`].
#[derive(Clone, Debug)]
pub struct Grads {
    pub embed: Mat,
    pub pos: Mat,
    pub out_proj: Mat,
    pub blocks: Vec<BlockGrads>,
}

#[derive(Clone, Debug)]
pub struct BlockGrads {
    pub q: ProjGrads,
    pub k: ProjGrads,
    pub v: ProjGrads,
    pub o: ProjGrads,
    pub gate: ProjGrads,
    pub up: Mat,
    pub down: Mat,
}

#[derive(Clone, Debug)]
pub enum ProjGrads {
    Moe(MoeGrads),
    Dense(Mat),
}

impl ProjGrads {
    fn zeros_like(p: &Projection) -> ProjGrads {
        match p {
            Projection::Moe(l) => ProjGrads::Moe(MoeGrads::zeros_like(l)),
            Projection::Dense(m) => ProjGrads::Dense(Mat::zeros(m.rows, m.cols)),
        }
    }
}

impl Grads {
    pub fn zeros_like(model: &Model) -> Grads {
        Grads {
            embed: Mat::zeros(model.embed.rows, model.embed.cols),
            pos: Mat::zeros(model.pos.rows, model.pos.cols),
            out_proj: Mat::zeros(model.out_proj.rows, model.out_proj.cols),
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    q: ProjGrads::zeros_like(&b.q),
                    k: ProjGrads::zeros_like(&b.k),
                    v: ProjGrads::zeros_like(&b.v),
                    o: ProjGrads::zeros_like(&b.o),
                    gate: ProjGrads::zeros_like(&b.gate),
                    up: Mat::zeros(b.up.rows, b.up.cols),
                    down: Mat::zeros(b.down.rows, b.down.cols),
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        let scale_mat = |m: &mut Mat| m.data.iter_mut().for_each(|v| *v *= s);
        scale_mat(&mut self.embed);
        scale_mat(&mut self.pos);
        scale_mat(&mut self.out_proj);
        for b in &mut self.blocks {
            for pg in [&mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.gate] {
                match pg {
                    ProjGrads::Dense(m) => scale_mat(m),
                    ProjGrads::Moe(g) => {
                        scale_mat(&mut g.base);
                        scale_mat(&mut g.router_weight);
                        g.router_bias.iter_mut().for_each(|v| *v *= s);
                        for e in &mut g.experts {
                            scale_mat(&mut e.a);
                            scale_mat(&mut e.b);
                        }
                    }
                }
            }
            scale_mat(&mut b.up);
            scale_mat(&mut b.down);
        }
    }
}

fn proj_backward(
    proj: &Projection,
    cache: &ProjCache,
    dy: &[f64],
    grads: &mut ProjGrads,
    dx: &mut [f64],
    scope: GradScope,
) {
    match (proj, cache, grads) {
        (Projection::Moe(layer), ProjCache::Moe(c), ProjGrads::Moe(g)) => {
            layer.backward(c, dy, g, dx, scope);
        }
        (Projection::Dense(w), ProjCache::Dense(x), ProjGrads::Dense(g)) => {
            if scope == GradScope::All {
                g.add_outer(1.0, dy, x);
            }
            w.matvec_t_acc(dy, dx);
        }
        _ => unreachable!("projection, cache and grads kinds always match"),
    }
}

/// Backward through one cached sequence. `dlogits` is dL/dlogits; gradients
/// accumulate into `grads` (not zeroed here).
pub fn backward_seq(
    model: &Model,
    tokens: &[u32],
    cache: &SeqCache,
    dlogits: &[Vec<f64>],
    grads: &mut Grads,
    scope: GradScope,
) {
    let seq = tokens.len();
    let d = model.cfg.d;
    let n_heads = model.cfg.n_heads;
    let hd = model.cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let ffn = model.cfg.ffn_hidden();

    // output head and final norm
    let mut dx: Vec<Vec<f64>> = Vec::with_capacity(seq);
    for t in 0..seq {
        let mut dh = vec![0.0; d];
        model.out_proj.matvec_t_acc(&dlogits[t], &mut dh);
        if scope == GradScope::All {
            grads.out_proj.add_outer(1.0, &dlogits[t], &cache.fin_h[t]);
        }
        dx.push(rms_bwd(&dh, &cache.x_final[t], cache.fin_inv[t]));
    }

    for (bi, block) in model.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[bi];
        let bg = &mut grads.blocks[bi];

        // feed-forward: x_out = x_mid + down(silu(gate(xn2)) ⊙ up(xn2))
        let mut dx_mid: Vec<Vec<f64>> = Vec::with_capacity(seq);
        for t in 0..seq {
            let mut dact = vec![0.0; ffn];
            block.down.matvec_t_acc(&dx[t], &mut dact);
            if scope == GradScope::All {
                bg.down.add_outer(1.0, &dx[t], &bc.act[t]);
            }
            let mut dgate_pre = vec![0.0; ffn];
            let mut dup_out = vec![0.0; ffn];
            for i in 0..ffn {
                let z = bc.gate_out[t][i];
                dgate_pre[i] = dact[i] * bc.up_out[t][i] * silu_deriv(z);
                dup_out[i] = dact[i] * silu(z);
            }
            let mut dxn2 = vec![0.0; d];
            block.up.matvec_t_acc(&dup_out, &mut dxn2);
            if scope == GradScope::All {
                bg.up.add_outer(1.0, &dup_out, &bc.xn2[t]);
            }
            proj_backward(&block.gate, &bc.gc[t], &dgate_pre, &mut bg.gate, &mut dxn2, scope);
            let mut dm = rms_bwd(&dxn2, &bc.x_mid[t], bc.n2_inv[t]);
            for (a, b) in dm.iter_mut().zip(&dx[t]) {
                *a += b; // residual
            }
            dx_mid.push(dm);
        }

        // attention: x_mid = x_in + O(ctx)
        let mut dctx: Vec<Vec<f64>> = Vec::with_capacity(seq);
        for t in 0..seq {
            let mut dc = vec![0.0; d];
            proj_backward(&block.o, &bc.oc[t], &dx_mid[t], &mut bg.o, &mut dc, scope);
            dctx.push(dc);
        }
        let mut dq = vec![vec![0.0; d]; seq];
        let mut dk = vec![vec![0.0; d]; seq];
        let mut dv = vec![vec![0.0; d]; seq];
        for t in 0..seq {
            for h in 0..n_heads {
                let r = h * hd..(h + 1) * hd;
                let probs = &bc.probs[t][h];
                let dctx_h = &dctx[t][r.clone()];
                let mut dp = vec![0.0; t + 1];
                for j in 0..=t {
                    dp[j] = dot(dctx_h, &bc.v[j][r.clone()]);
                    let p = probs[j];
                    if p != 0.0 {
                        let dvj = &mut dv[j][r.clone()];
                        for (idx, g) in dctx_h.iter().enumerate() {
                            dvj[idx] += p * g;
                        }
                    }
                }
                let inner: f64 = probs.iter().zip(&dp).map(|(p, g)| p * g).sum();
                for j in 0..=t {
                    let ds = probs[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kh = &bc.k[j][r.clone()];
                    let qh = &bc.q[t][r.clone()];
                    let dqt = &mut dq[t][r.clone()];
                    for idx in 0..hd {
                        dqt[idx] += ds * kh[idx];
                    }
                    let dkj = &mut dk[j][r.clone()];
                    for idx in 0..hd {
                        dkj[idx] += ds * qh[idx];
                    }
                }
            }
        }
        let mut dx_in: Vec<Vec<f64>> = Vec::with_capacity(seq);
        for t in 0..seq {
            let mut dxn1 = vec![0.0; d];
            proj_backward(&block.q, &bc.qc[t], &dq[t], &mut bg.q, &mut dxn1, scope);
            proj_backward(&block.k, &bc.kc[t], &dk[t], &mut bg.k, &mut dxn1, scope);
            proj_backward(&block.v, &bc.vc[t], &dv[t], &mut bg.v, &mut dxn1, scope);
            let mut din = rms_bwd(&dxn1, &bc.x_in[t], bc.n1_inv[t]);
            for (a, b) in din.iter_mut().zip(&dx_mid[t]) {
                *a += b; // residual
            }
            dx_in.push(din);
        }
        dx = dx_in;
    }

    if scope == GradScope::All {
        for t in 0..seq {
            let tok = tokens[t] as usize;
            let row = grads.embed.row_mut(tok);
            for (a, b) in row.iter_mut().zip(&dx[t]) {
                *a += b;
            }
            let prow = grads.pos.row_mut(t);
            for (a, b) in prow.iter_mut().zip(&dx[t]) {
                *a += b;
            }
        }
    }
}

/// Mean masked cross-entropy over a batch of encoded examples, with its
/// gradient tree. The mean is per masked token across the whole batch.
pub fn loss_and_grads(
    model: &Model,
    batch: &[&TrainExample],
    mode: RoutingMode,
    scope: GradScope,
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::InvalidData("empty batch".into()));
    }
    let mut grads = Grads::zeros_like(model);
    let mut total_loss = 0.0;
    let mut total_count = 0usize;
    for ex in batch {
        let inputs = &ex.tokens[..ex.tokens.len() - 1];
        let targets = &ex.tokens[1..];
        let (logits, cache) = model.forward_cached(inputs, mode)?;
        let mut dlogits: Vec<Vec<f64>> = Vec::with_capacity(logits.len());
        let mut ex_count = 0usize;
        for t in 0..logits.len() {
            if !ex.mask[t] {
                dlogits.push(vec![0.0; logits[t].len()]);
                continue;
            }
            let target = targets[t] as usize;
            let mut probs = logits[t].clone();
            softmax_in_place(&mut probs);
            total_loss += -probs[target].max(f64::MIN_POSITIVE).ln();
            probs[target] -= 1.0;
            dlogits.push(probs);
            ex_count += 1;
        }
        total_count += ex_count;
        if ex_count == 0 {
            continue;
        }
        backward_seq(model, inputs, &cache, &dlogits, &mut grads, scope);
    }
    if total_count == 0 {
        return Err(Error::InvalidData("batch has no masked positions".into()));
    }
    let inv = 1.0 / total_count as f64;
    grads.scale(inv);
    let loss = total_loss * inv;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok((loss, grads))
}

/// Walks the model and a matching gradient tree in lockstep, in a fixed
/// deterministic order.
pub fn for_each_param_pair(
    model: &mut Model,
    grads: &Grads,
    f: &mut dyn FnMut(ParamKey, &mut [f64], &[f64]),
) {
    f(ParamKey::plain(ParamGroup::Embed), &mut model.embed.data, &grads.embed.data);
    f(ParamKey::plain(ParamGroup::Pos), &mut model.pos.data, &grads.pos.data);
    f(ParamKey::plain(ParamGroup::OutProj), &mut model.out_proj.data, &grads.out_proj.data);
    for (bi, (block, bg)) in model.blocks.iter_mut().zip(&grads.blocks).enumerate() {
        let layer = bi as u32;
        let Block { q, k, v, o, gate, up, down } = block;
        let projs: [(&mut Projection, &ProjGrads); 5] =
            [(q, &bg.q), (k, &bg.k), (v, &bg.v), (o, &bg.o), (gate, &bg.gate)];
        for (site, (proj, pg)) in projs.into_iter().enumerate() {
            let site = site as u8;
            match (proj, pg) {
                (Projection::Dense(w), ProjGrads::Dense(g)) => {
                    let key = ParamKey { group: ParamGroup::ProjBase, layer, site, expert: 0 };
                    f(key, &mut w.data, &g.data);
                }
                (Projection::Moe(l), ProjGrads::Moe(g)) => {
                    let key = ParamKey { group: ParamGroup::ProjBase, layer, site, expert: 0 };
                    f(key, &mut l.base.data, &g.base.data);
                    for (ei, (e, eg)) in l.experts.iter_mut().zip(&g.experts).enumerate() {
                        let expert = ei as u8;
                        f(
                            ParamKey { group: ParamGroup::ExpertA, layer, site, expert },
                            &mut e.a.data,
                            &eg.a.data,
                        );
                        f(
                            ParamKey { group: ParamGroup::ExpertB, layer, site, expert },
                            &mut e.b.data,
                            &eg.b.data,
                        );
                    }
                    f(
                        ParamKey { group: ParamGroup::RouterWeight, layer, site, expert: 0 },
                        &mut l.router.weight.data,
                        &g.router_weight.data,
                    );
                    f(
                        ParamKey { group: ParamGroup::RouterBias, layer, site, expert: 0 },
                        &mut l.router.bias,
                        &g.router_bias,
                    );
                }
                _ => unreachable!("model and gradient trees always match"),
            }
        }
        f(ParamKey { group: ParamGroup::Up, layer, site: 0, expert: 0 }, &mut up.data, &bg.up.data);
        f(
            ParamKey { group: ParamGroup::Down, layer, site: 0, expert: 0 },
            &mut down.data,
            &bg.down.data,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::moe::ProjectionSite;
    use crate::synth;

    #[test]
    fn trainable_scope_leaves_frozen_gradients_at_zero() {
        let cfg = ModelConfig {
            vocab_size: 33,
            d: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq: 32,
            move_rank: 2,
            move_alpha: 2.0,
            n_experts: 5,
            sites: ProjectionSite::ALL.to_vec(),
            seed: 7,
        };
        let mut model = Model::init(&cfg).unwrap();
        model.randomize_adapters(1, 0.3);
        let corpus = synth::generate_corpus(2, 6, 33, (3, 5)).unwrap();
        let examples = synth::encode_manifest(&corpus);
        let batch: Vec<&TrainExample> = examples.iter().collect();
        let (_, grads) = loss_and_grads(&model, &batch, RoutingMode::Soft, GradScope::Trainable)
            .unwrap();
        assert!(grads.embed.data.iter().all(|v| *v == 0.0));
        assert!(grads.pos.data.iter().all(|v| *v == 0.0));
        assert!(grads.out_proj.data.iter().all(|v| *v == 0.0));
        for bg in &grads.blocks {
            assert!(bg.up.data.iter().all(|v| *v == 0.0));
            assert!(bg.down.data.iter().all(|v| *v == 0.0));
            for pg in [&bg.q, &bg.k, &bg.v, &bg.o, &bg.gate] {
                match pg {
                    ProjGrads::Moe(g) => {
                        assert!(g.base.data.iter().all(|v| *v == 0.0));
                        // adapters do receive gradient
                        let any = g.experts.iter().any(|e| {
                            e.a.data.iter().any(|v| *v != 0.0)
                                || e.b.data.iter().any(|v| *v != 0.0)
                        }) || g.router_weight.data.iter().any(|v| *v != 0.0);
                        assert!(any, "expected non-zero adapter gradients");
                    }
                    ProjGrads::Dense(_) => panic!("all sites adapted in this config"),
                }
            }
        }
    }

    #[test]
    fn param_walk_covers_every_tensor_once() {
        let cfg = ModelConfig { n_layers: 2, ..ModelConfig::default() };
        let mut model = Model::init(&cfg).unwrap();
        let grads = Grads::zeros_like(&model);
        let mut keys = Vec::new();
        for_each_param_pair(&mut model, &grads, &mut |key, p, g| {
            assert_eq!(p.len(), g.len());
            keys.push(key);
        });
        let unique: std::collections::BTreeSet<_> = keys.iter().copied().collect();
        assert_eq!(unique.len(), keys.len());
        // 3 top-level + per layer: 5 bases + 5·(2·5 experts) + 5·2 router + up + down
        let per_layer = 5 + 5 * 10 + 10 + 2;
        assert_eq!(keys.len(), 3 + 2 * per_layer);
    }
}
