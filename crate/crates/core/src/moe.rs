//! Mixture of low-rank experts over a frozen linear map.
//!
//! Each adapted projection keeps its frozen base weight `W0` and adds `N`
//! parallel low-rank experts blended by a per-token soft router:
//!
//! ```text
//! h(x) = W0 x + Σ_i g_i(x) · (α/r) · B_i A_i x,     g = softmax(Wr x + br)
//! ```
//!
//! With the default `α = r` the per-expert scaling is 1. Routing is always
//! soft: every expert contributes with its continuous mixture weight; there
//! is no hard top-k selection. Experts start with `B = 0`, so a freshly
//! built layer computes exactly `W0 x`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, softmax_in_place, Mat};
use crate::rng::rng_from;

/// Number of expressive manifolds in the standard configuration.
pub const N_MANIFOLDS: usize = 5;

/// The five expressive manifolds an expert can specialize in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Manifold {
    Angry,
    Happy,
    Sad,
    Laugh,
    Cry,
}

impl Manifold {
    pub const ALL: [Manifold; N_MANIFOLDS] =
        [Manifold::Angry, Manifold::Happy, Manifold::Sad, Manifold::Laugh, Manifold::Cry];

    pub fn index(self) -> usize {
        match self {
            Manifold::Angry => 0,
            Manifold::Happy => 1,
            Manifold::Sad => 2,
            Manifold::Laugh => 3,
            Manifold::Cry => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Manifold> {
        Manifold::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Manifold::Angry => "angry",
            Manifold::Happy => "happy",
            Manifold::Sad => "sad",
            Manifold::Laugh => "laugh",
            Manifold::Cry => "cry",
        }
    }
}

impl std::fmt::Display for Manifold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The five projection matrices that receive expert adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProjectionSite {
    Query,
    Key,
    Value,
    Output,
    FeedForwardGate,
}

impl ProjectionSite {
    pub const ALL: [ProjectionSite; 5] = [
        ProjectionSite::Query,
        ProjectionSite::Key,
        ProjectionSite::Value,
        ProjectionSite::Output,
        ProjectionSite::FeedForwardGate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProjectionSite::Query => "query",
            ProjectionSite::Key => "key",
            ProjectionSite::Value => "value",
            ProjectionSite::Output => "output",
            ProjectionSite::FeedForwardGate => "ffn_gate",
        }
    }
}

/// One low-rank expert: `delta(x) = (α/r) · B (A x)`.
///
/// `A` is `r × d`, `B` is `out_dim × r`. `B` starts at zero so the delta is
/// zero until training moves it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraExpert {
    pub a: Mat,
    pub b: Mat,
    pub rank: usize,
    pub alpha: f64,
    pub manifold: Manifold,
}

impl LoraExpert {
    /// Builds a fresh expert. `A` entries are uniform in `±1/√d` drawn
    /// deterministically from `seed`; `B` is all zeros; `alpha` defaults to
    /// `rank` so the delta scaling is exactly 1.
    pub fn init(
        rank: usize,
        d: usize,
        out_dim: usize,
        seed: u64,
        manifold: Manifold,
    ) -> Result<LoraExpert> {
        if rank == 0 || d == 0 || out_dim == 0 {
            return Err(Error::InvalidDim(format!(
                "expert dimensions must be positive (rank={rank}, d={d}, out_dim={out_dim})"
            )));
        }
        let mut rng = rng_from(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let a = Mat::from_fn(rank, d, |_, _| rng.random_range(-bound..bound));
        let b = Mat::zeros(out_dim, rank);
        Ok(LoraExpert { a, b, rank, alpha: rank as f64, manifold })
    }

    pub fn d(&self) -> usize {
        self.a.cols
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows
    }

    /// α/r, the multiplier applied to `B A x`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(α/r) · B (A x)`.
    pub fn delta(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d() {
            return Err(Error::InvalidDim(format!(
                "expert input length {} does not match d={}",
                x.len(),
                self.d()
            )));
        }
        let u = self.a.matvec(x);
        let mut out = self.b.matvec(&u);
        let s = self.scaling();
        out.iter_mut().for_each(|v| *v *= s);
        Ok(out)
    }
}

/// Linear router over experts; `weights(x) = softmax(W x + b)`.
///
/// Starts at zero weight and bias, i.e. uniform routing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterGate {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl RouterGate {
    pub fn zeros(n_experts: usize, d: usize) -> RouterGate {
        RouterGate { weight: Mat::zeros(n_experts, d), bias: vec![0.0; n_experts] }
    }

    pub fn n_experts(&self) -> usize {
        self.weight.rows
    }

    pub fn d(&self) -> usize {
        self.weight.cols
    }

    /// Mixture weights on the probability simplex.
    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d() {
            return Err(Error::InvalidDim(format!(
                "router input length {} does not match d={}",
                x.len(),
                self.d()
            )));
        }
        let mut logits = self.bias.clone();
        self.weight.matvec_acc(x, &mut logits);
        softmax_in_place(&mut logits);
        Ok(logits)
    }
}

/// How the mixture weights are produced during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    /// Router-produced soft weights (inference and Stage 2).
    Soft,
    /// One-hot weight on the given expert (Stage 1 specialization).
    Forced(usize),
    /// Skip the experts entirely; compute the frozen base map only.
    BaseOnly,
}

/// Which parameters receive gradients in a backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    /// Experts and routers only; frozen base gradients stay zero.
    Trainable,
    /// Everything, including base weights (used to fit the base model
    /// before it is frozen).
    All,
}

/// A frozen base projection with its experts and router.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub site: ProjectionSite,
    pub base: Mat,
    pub experts: Vec<LoraExpert>,
    pub router: RouterGate,
}

impl MoeLayer {
    pub fn new(
        site: ProjectionSite,
        base: Mat,
        experts: Vec<LoraExpert>,
        router: RouterGate,
    ) -> Result<MoeLayer> {
        if experts.is_empty() {
            return Err(Error::InvalidDim("layer needs at least one expert".into()));
        }
        let d = base.cols;
        let out = base.rows;
        let rank = experts[0].rank;
        for (i, e) in experts.iter().enumerate() {
            if e.d() != d || e.out_dim() != out || e.rank != rank {
                return Err(Error::InvalidDim(format!(
                    "expert {i} shape ({}x{} rank {}) does not match layer ({out}x{d} rank {rank})",
                    e.out_dim(),
                    e.d(),
                    e.rank
                )));
            }
        }
        if router.n_experts() != experts.len() || router.d() != d {
            return Err(Error::InvalidDim(format!(
                "router shape {}x{} does not match {} experts over d={d}",
                router.n_experts(),
                router.d(),
                experts.len()
            )));
        }
        Ok(MoeLayer { site, base, experts, router })
    }

    /// Builds a layer around an existing (frozen) base matrix, with fresh
    /// zero-delta experts and a uniform router.
    pub fn around_base(
        site: ProjectionSite,
        base: Mat,
        n_experts: usize,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<MoeLayer> {
        let d = base.cols;
        let out = base.rows;
        let mut experts = Vec::with_capacity(n_experts);
        for i in 0..n_experts {
            let manifold = Manifold::ALL[i % N_MANIFOLDS];
            let mut e = LoraExpert::init(rank, d, out, crate::rng::derive_seed_n(seed, "expert", i as u64), manifold)?;
            e.alpha = alpha;
            experts.push(e);
        }
        let router = RouterGate::zeros(n_experts, d);
        MoeLayer::new(site, base, experts, router)
    }

    pub fn d(&self) -> usize {
        self.base.cols
    }

    pub fn out_dim(&self) -> usize {
        self.base.rows
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn rank(&self) -> usize {
        self.experts[0].rank
    }

    /// `W0 x + Σ g_i(x) · delta_i(x)` with soft routing.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut cache = MoeCache::default();
        self.forward_cached(x, RoutingMode::Soft, &mut cache)
    }

    /// Forward pass that records the intermediates needed by
    /// [`MoeLayer::backward`].
    pub fn forward_cached(
        &self,
        x: &[f64],
        mode: RoutingMode,
        cache: &mut MoeCache,
    ) -> Result<Vec<f64>> {
        if x.len() != self.d() {
            return Err(Error::InvalidDim(format!(
                "layer input length {} does not match d={}",
                x.len(),
                self.d()
            )));
        }
        if let RoutingMode::Forced(k) = mode {
            if k >= self.n_experts() {
                return Err(Error::InvalidDim(format!(
                    "forced expert {k} out of range (n={})",
                    self.n_experts()
                )));
            }
        }
        let mut y = self.base.matvec(x);
        cache.x.clear();
        cache.x.extend_from_slice(x);
        cache.mode = mode;
        cache.gates.clear();
        cache.u.clear();
        cache.delta.clear();
        if mode == RoutingMode::BaseOnly {
            return Ok(y);
        }
        let gates = match mode {
            RoutingMode::Soft => self.router.weights(x)?,
            RoutingMode::Forced(k) => {
                let mut g = vec![0.0; self.n_experts()];
                g[k] = 1.0;
                g
            }
            RoutingMode::BaseOnly => unreachable!(),
        };
        for (i, e) in self.experts.iter().enumerate() {
            if gates[i] == 0.0 && matches!(mode, RoutingMode::Forced(_)) {
                cache.u.push(Vec::new());
                cache.delta.push(Vec::new());
                continue;
            }
            let u = e.a.matvec(x);
            let mut delta = e.b.matvec(&u);
            let s = e.scaling();
            delta.iter_mut().for_each(|v| *v *= s);
            for (yv, dv) in y.iter_mut().zip(&delta) {
                *yv += gates[i] * dv;
            }
            cache.u.push(u);
            cache.delta.push(delta);
        }
        cache.gates = gates;
        Ok(y)
    }

    /// Reverse pass for one cached call. Accumulates parameter gradients
    /// into `grads` and the input gradient into `dx`.
    pub fn backward(&self, cache: &MoeCache, dy: &[f64], grads: &mut MoeGrads, dx: &mut [f64], scope: GradScope) {
        let x = &cache.x;
        if scope == GradScope::All {
            grads.base.add_outer(1.0, dy, x);
        }
        self.base.matvec_t_acc(dy, dx);
        if cache.mode == RoutingMode::BaseOnly {
            return;
        }

        let n = self.n_experts();
        let mut dgate = vec![0.0; n];
        for i in 0..n {
            let g = cache.gates[i];
            if cache.u[i].is_empty() {
                continue;
            }
            let e = &self.experts[i];
            let s = e.scaling();
            dgate[i] = dot(dy, &cache.delta[i]);
            // delta_i = s · B u; y gets g_i · delta_i
            let eg = &mut grads.experts[i];
            eg.b.add_outer(s * g, dy, &cache.u[i]);
            let mut du = vec![0.0; e.rank];
            for r in 0..e.b.rows {
                let f = s * g * dy[r];
                if f == 0.0 {
                    continue;
                }
                let row = e.b.row(r);
                for c in 0..e.rank {
                    du[c] += f * row[c];
                }
            }
            eg.a.add_outer(1.0, &du, x);
            e.a.matvec_t_acc(&du, dx);
        }

        if cache.mode == RoutingMode::Soft {
            // softmax backward: dlogits = g ⊙ (dgate − g·dgate)
            let g = &cache.gates;
            let inner = dot(g, &dgate);
            let mut dlogits = vec![0.0; n];
            for i in 0..n {
                dlogits[i] = g[i] * (dgate[i] - inner);
            }
            grads.router_weight.add_outer(1.0, &dlogits, x);
            for i in 0..n {
                grads.router_bias[i] += dlogits[i];
            }
            self.router.weight.matvec_t_acc(&dlogits, dx);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.base.is_finite()
            && self.router.weight.is_finite()
            && self.router.bias.iter().all(|v| v.is_finite())
            && self.experts.iter().all(|e| e.a.is_finite() && e.b.is_finite())
    }
}

/// Intermediates recorded by [`MoeLayer::forward_cached`].
#[derive(Clone, Debug)]
pub struct MoeCache {
    pub x: Vec<f64>,
    pub gates: Vec<f64>,
    /// `A_i x` per expert (empty slot when the expert was skipped).
    pub u: Vec<Vec<f64>>,
    /// `(α/r) B_i A_i x` per expert.
    pub delta: Vec<Vec<f64>>,
    pub mode: RoutingMode,
}

impl Default for MoeCache {
    fn default() -> Self {
        MoeCache {
            x: Vec::new(),
            gates: Vec::new(),
            u: Vec::new(),
            delta: Vec::new(),
            mode: RoutingMode::Soft,
        }
    }
}

/// Gradient buffers matching a [`MoeLayer`].
#[derive(Clone, Debug)]
pub struct MoeGrads {
    pub base: Mat,
    pub experts: Vec<ExpertGrads>,
    pub router_weight: Mat,
    pub router_bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ExpertGrads {
    pub a: Mat,
    pub b: Mat,
}

impl MoeGrads {
    pub fn zeros_like(layer: &MoeLayer) -> MoeGrads {
        MoeGrads {
            base: Mat::zeros(layer.base.rows, layer.base.cols),
            experts: layer
                .experts
                .iter()
                .map(|e| ExpertGrads {
                    a: Mat::zeros(e.a.rows, e.a.cols),
                    b: Mat::zeros(e.b.rows, e.b.cols),
                })
                .collect(),
            router_weight: Mat::zeros(layer.router.weight.rows, layer.router.weight.cols),
            router_bias: vec![0.0; layer.router.bias.len()],
        }
    }
}
