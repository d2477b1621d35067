//! Mapping network: one 512-d image feature vector in, a visual prefix of
//! `prefix_len` embedding rows out. Three layer widths
//! {512, (prefix_len * e) / 2, prefix_len * e}, GELU between, always
//! trainable regardless of the fine-tuning strategy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::INIT_STD;
use crate::tensor::{Graph, NodeId, Tensor};

/// Dimensionality of the incoming image features.
pub const FEATURE_DIM: usize = 512;

/// A single pooled image feature vector of length 512.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeature(Vec<f64>);

impl VisualFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_DIM {
            return Err(Error::Dimension {
                op: "visual_feature",
                lhs: vec![values.len()],
                rhs: vec![FEATURE_DIM],
            });
        }
        Ok(VisualFeature(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapperConfig {
    /// Number of visual prefix rows produced (8 by default).
    pub prefix_len: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl MapperConfig {
    pub fn new(prefix_len: usize, embed_dim: usize, seed: u64) -> Self {
        MapperConfig {
            prefix_len,
            embed_dim,
            seed,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.prefix_len * self.embed_dim / 2
    }

    pub fn out_dim(&self) -> usize {
        self.prefix_len * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.prefix_len == 0 || self.embed_dim == 0 {
            return Err(Error::Config("mapper dimensions must be positive".into()));
        }
        if (self.prefix_len * self.embed_dim) % 2 != 0 {
            return Err(Error::Config(format!(
                "prefix_len * embed_dim = {} must be even",
                self.prefix_len * self.embed_dim
            )));
        }
        Ok(())
    }
}

pub(crate) mod names {
    pub const W1: &str = "mapper.w1";
    pub const B1: &str = "mapper.b1";
    pub const W2: &str = "mapper.w2";
    pub const B2: &str = "mapper.b2";
}

#[derive(Debug, Clone)]
pub struct Mapper {
    cfg: MapperConfig,
    w1: Tensor, // [hidden, 512]
    b1: Tensor,
    w2: Tensor, // [out, hidden]
    b2: Tensor,
}

impl Mapper {
    pub fn init(cfg: &MapperConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let hidden = cfg.hidden_dim();
        let out = cfg.out_dim();
        Ok(Mapper {
            cfg: cfg.clone(),
            w1: Tensor::randn(vec![hidden, FEATURE_DIM], INIT_STD, &mut rng)
                .with_requires_grad(true),
            b1: Tensor::zeros(vec![hidden]).with_requires_grad(true),
            w2: Tensor::randn(vec![out, hidden], INIT_STD, &mut rng).with_requires_grad(true),
            b2: Tensor::zeros(vec![out]).with_requires_grad(true),
        })
    }

    pub fn cfg(&self) -> &MapperConfig {
        &self.cfg
    }

    pub fn count_params(&self) -> u64 {
        (self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()) as u64
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        f(names::W1, &self.w1, true);
        f(names::B1, &self.b1, false);
        f(names::W2, &self.w2, true);
        f(names::B2, &self.b2, false);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f(names::W1, &mut self.w1, true);
        f(names::B1, &mut self.b1, false);
        f(names::W2, &mut self.w2, true);
        f(names::B2, &mut self.b2, false);
    }

    /// Visual prefix rows for one feature vector, recorded on the graph so
    /// gradients reach the mapper weights.
    pub fn map_features_on(&self, g: &mut Graph, feat: &VisualFeature) -> Result<NodeId> {
        let x = g.input(&Tensor::new(vec![1, FEATURE_DIM], feat.values().to_vec())?);
        let w1 = g.param(names::W1, &self.w1);
        let w1t = g.transpose(w1);
        let h = g.matmul(x, w1t)?;
        let b1 = g.param(names::B1, &self.b1);
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h);
        let w2 = g.param(names::W2, &self.w2);
        let w2t = g.transpose(w2);
        let out = g.matmul(h, w2t)?;
        let b2 = g.param(names::B2, &self.b2);
        let out = g.add_bias(out, b2)?;
        // Row-major reshape of the flat MLP output into prefix rows.
        g.reshape(out, vec![self.cfg.prefix_len, self.cfg.embed_dim])
    }

    /// Materialized visual prefix `[prefix_len, embed_dim]`.
    pub fn map_features(&self, feat: &VisualFeature) -> Result<Tensor> {
        let mut g = Graph::new();
        let id = self.map_features_on(&mut g, feat)?;
        Ok(g.value(id))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let cfg = serde_json::to_string(&self.cfg)?;
        let mut w = crate::checkpoint::CheckpointWriter::create(path, &cfg)?;
        let mut result = Ok(());
        self.visit_params(&mut |name, t, _| {
            if result.is_ok() {
                result = w.tensor(name, t);
            }
        });
        result?;
        w.finish()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut ckpt = crate::checkpoint::Checkpoint::read(path)?;
        let cfg: MapperConfig = serde_json::from_str(&ckpt.config_json)?;
        let mut mapper = Mapper::init(&cfg)?;
        let mut result = Ok(());
        mapper.visit_params_mut(&mut |name, t, _| {
            if result.is_err() {
                return;
            }
            match ckpt.take(name) {
                Ok(loaded) if loaded.shape() == t.shape() => {
                    let rg = t.requires_grad();
                    *t = loaded.with_requires_grad(rg);
                }
                Ok(loaded) => {
                    result = Err(Error::Checkpoint(format!(
                        "mapper tensor {name}: shape {:?} != expected {:?}",
                        loaded.shape(),
                        t.shape()
                    )));
                }
                Err(e) => result = Err(e),
            }
        });
        result?;
        Ok(mapper)
    }
}
