//! Self-describing JSON tensor archives.
//!
//! Serialized floats use the shortest round-trip decimal representation, so
//! a save/load cycle reproduces every parameter bit for bit. Adapted layers
//! carry their full shape description (site, expert count, rank, dims,
//! alpha) alongside the matrices.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{Block, Model, ModelConfig, Projection};
use crate::moe::{LoraExpert, Manifold, MoeLayer, ProjectionSite, RouterGate};

pub const CHECKPOINT_FORMAT: &str = "molora-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertArchive {
    pub manifold: Manifold,
    pub rank: usize,
    pub alpha: f64,
    pub a: Mat,
    pub b: Mat,
}

/// One adapted projection with its shape header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerArchive {
    pub site: ProjectionSite,
    pub n_experts: usize,
    pub rank: usize,
    pub d: usize,
    pub out_dim: usize,
    pub alpha: f64,
    pub base: Mat,
    pub experts: Vec<ExpertArchive>,
    pub router_weight: Mat,
    pub router_bias: Vec<f64>,
}

impl LayerArchive {
    pub fn from_layer(layer: &MoeLayer) -> LayerArchive {
        LayerArchive {
            site: layer.site,
            n_experts: layer.n_experts(),
            rank: layer.rank(),
            d: layer.d(),
            out_dim: layer.out_dim(),
            alpha: layer.experts[0].alpha,
            base: layer.base.clone(),
            experts: layer
                .experts
                .iter()
                .map(|e| ExpertArchive {
                    manifold: e.manifold,
                    rank: e.rank,
                    alpha: e.alpha,
                    a: e.a.clone(),
                    b: e.b.clone(),
                })
                .collect(),
            router_weight: layer.router.weight.clone(),
            router_bias: layer.router.bias.clone(),
        }
    }

    pub fn into_layer(self) -> Result<MoeLayer> {
        if self.experts.len() != self.n_experts {
            return Err(Error::InvalidData(format!(
                "archive claims {} experts, holds {}",
                self.n_experts,
                self.experts.len()
            )));
        }
        let experts: Vec<LoraExpert> = self
            .experts
            .into_iter()
            .map(|e| LoraExpert { a: e.a, b: e.b, rank: e.rank, alpha: e.alpha, manifold: e.manifold })
            .collect();
        MoeLayer::new(
            self.site,
            self.base,
            experts,
            RouterGate { weight: self.router_weight, bias: self.router_bias },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProjArchive {
    Moe(LayerArchive),
    Dense(Mat),
}

impl ProjArchive {
    fn from_projection(p: &Projection) -> ProjArchive {
        match p {
            Projection::Moe(l) => ProjArchive::Moe(LayerArchive::from_layer(l)),
            Projection::Dense(m) => ProjArchive::Dense(m.clone()),
        }
    }

    fn into_projection(self) -> Result<Projection> {
        Ok(match self {
            ProjArchive::Moe(l) => Projection::Moe(l.into_layer()?),
            ProjArchive::Dense(m) => Projection::Dense(m),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockArchive {
    pub q: ProjArchive,
    pub k: ProjArchive,
    pub v: ProjArchive,
    pub o: ProjArchive,
    pub gate: ProjArchive,
    pub up: Mat,
    pub down: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub tool_version: String,
    pub config: ModelConfig,
    /// Training phases already applied, in order (e.g. "pretrain",
    /// "stage1", "stage2").
    pub stages_done: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
    pub embed: Mat,
    pub pos: Mat,
    pub out_proj: Mat,
    pub blocks: Vec<BlockArchive>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, stages_done: &[String], meta: Option<serde_json::Value>) -> Result<Checkpoint> {
        if !model.is_finite() {
            return Err(Error::Numeric("refusing to archive non-finite parameters".into()));
        }
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: model.cfg.clone(),
            stages_done: stages_done.to_vec(),
            meta,
            embed: model.embed.clone(),
            pos: model.pos.clone(),
            out_proj: model.out_proj.clone(),
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockArchive {
                    q: ProjArchive::from_projection(&b.q),
                    k: ProjArchive::from_projection(&b.k),
                    v: ProjArchive::from_projection(&b.v),
                    o: ProjArchive::from_projection(&b.o),
                    gate: ProjArchive::from_projection(&b.gate),
                    up: b.up.clone(),
                    down: b.down.clone(),
                })
                .collect(),
        })
    }

    pub fn into_model(self) -> Result<(Model, Vec<String>)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidData(format!(
                "unsupported checkpoint format {:?}",
                self.format
            )));
        }
        self.config.validate()?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in self.blocks {
            blocks.push(Block {
                q: b.q.into_projection()?,
                k: b.k.into_projection()?,
                v: b.v.into_projection()?,
                o: b.o.into_projection()?,
                gate: b.gate.into_projection()?,
                up: b.up,
                down: b.down,
            });
        }
        let model = Model {
            cfg: self.config,
            embed: self.embed,
            pos: self.pos,
            blocks,
            out_proj: self.out_proj,
        };
        if !model.is_finite() {
            return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
        }
        Ok((model, self.stages_done))
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    stages_done: &[String],
    meta: Option<serde_json::Value>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let ck = Checkpoint::from_model(model, stages_done, meta)?;
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(file, &ck)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Vec<String>)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let ck: Checkpoint = serde_json::from_reader(file)?;
    ck.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn checkpoint_roundtrips_bit_exactly() {
        let dir = std::env::temp_dir().join(format!("molora-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let cfg = ModelConfig { n_layers: 1, d: 16, n_heads: 2, ..ModelConfig::default() };
        let mut model = Model::init(&cfg).unwrap();
        model.randomize_adapters(3, 0.17);
        save_checkpoint(&path, &model, &["pretrain".into(), "stage1".into()], None).unwrap();
        let (back, stages) = load_checkpoint(&path).unwrap();
        assert_eq!(stages, vec!["pretrain".to_string(), "stage1".to_string()]);
        assert_eq!(model, back);
        // explicit bit-exactness on a few tensors
        for (a, b) in model.embed.data.iter().zip(&back.embed.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let la = model.blocks[0].q.as_moe().unwrap();
        let lb = back.blocks[0].q.as_moe().unwrap();
        for (a, b) in la.router.weight.data.iter().zip(&lb.router.weight.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn layer_archive_carries_shape_header() {
        let cfg = ModelConfig { n_layers: 1, d: 16, n_heads: 2, ..ModelConfig::default() };
        let model = Model::init(&cfg).unwrap();
        let layer = model.blocks[0].gate.as_moe().unwrap();
        let arch = LayerArchive::from_layer(layer);
        assert_eq!(arch.site, ProjectionSite::FeedForwardGate);
        assert_eq!(arch.n_experts, 5);
        assert_eq!(arch.rank, cfg.move_rank);
        assert_eq!(arch.d, 16);
        assert_eq!(arch.out_dim, 32);
        let text = serde_json::to_string(&arch).unwrap();
        let back: LayerArchive = serde_json::from_str(&text).unwrap();
        assert_eq!(arch, back);
        assert_eq!(back.into_layer().unwrap(), *layer);
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let cfg = ModelConfig { n_layers: 1, d: 16, n_heads: 2, ..ModelConfig::default() };
        let model = Model::init(&cfg).unwrap();
        let mut ck = Checkpoint::from_model(&model, &[], None).unwrap();
        ck.format = "other/9".into();
        assert!(ck.into_model().is_err());
    }
}
