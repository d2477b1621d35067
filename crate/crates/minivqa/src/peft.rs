//! Parameter-efficient fine-tuning strategies over a frozen base model.
//!
//! Four variants: Frozen (mapper-only), prompt tuning (learnable virtual
//! tokens prepended to the input), prefix tuning (learnable key/value slots
//! inside every attention block), and LoRA (low-rank deltas on the query and
//! value projections). The base model's weights are frozen under every
//! variant; trainable-parameter accounting over the LM matches the closed
//! forms m*e, 2*L*p*e and 2*L*|targets|*r*e.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointWriter};
use crate::error::{Error, Result};
use crate::model::{
    AttentionExtras, LayerLora, LoraFactors, LoraHook, ModelConfig, NamedKv, TransformerLM,
    INIT_STD,
};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraTargets {
    pub q: bool,
    pub v: bool,
}

impl Default for LoraTargets {
    fn default() -> Self {
        LoraTargets { q: true, v: true }
    }
}

impl LoraTargets {
    pub fn count(&self) -> usize {
        usize::from(self.q) + usize::from(self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PeftVariant {
    Frozen,
    PromptTuning { tokens: usize },
    PrefixTuning { length: usize },
    Lora {
        rank: usize,
        alpha: f64,
        targets: LoraTargets,
    },
}

impl PeftVariant {
    pub fn name(&self) -> &'static str {
        match self {
            PeftVariant::Frozen => "frozen",
            PeftVariant::PromptTuning { .. } => "prompt",
            PeftVariant::PrefixTuning { .. } => "prefix",
            PeftVariant::Lora { .. } => "lora",
        }
    }

    /// Trainable parameters added inside the LM, in closed form. The mapper
    /// is excluded, matching accounting where Frozen reports 0%.
    pub fn lm_trainable_params(&self, cfg: &ModelConfig) -> u64 {
        let e = cfg.embed_dim as u64;
        let l = cfg.n_layers as u64;
        match self {
            PeftVariant::Frozen => 0,
            PeftVariant::PromptTuning { tokens } => *tokens as u64 * e,
            PeftVariant::PrefixTuning { length } => 2 * l * *length as u64 * e,
            PeftVariant::Lora { rank, targets, .. } => {
                2 * l * targets.count() as u64 * *rank as u64 * e
            }
        }
    }

    /// (count, percent of total LM parameters).
    pub fn lm_trainable_percent(&self, cfg: &ModelConfig) -> (u64, f64) {
        let count = self.lm_trainable_params(cfg);
        let percent = 100.0 * count as f64 / cfg.total_params() as f64;
        (count, percent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeftConfig {
    #[serde(flatten)]
    pub variant: PeftVariant,
    pub seed: u64,
}

impl PeftConfig {
    pub fn validate(&self, model_cfg: &ModelConfig) -> Result<()> {
        match &self.variant {
            PeftVariant::Frozen => Ok(()),
            PeftVariant::PromptTuning { tokens } if *tokens == 0 => {
                Err(Error::Config("prompt token count must be positive".into()))
            }
            PeftVariant::PrefixTuning { length } if *length == 0 => {
                Err(Error::Config("prefix length must be positive".into()))
            }
            PeftVariant::Lora { rank, targets, .. } => {
                if *rank == 0 {
                    Err(Error::Config("lora rank must be positive".into()))
                } else if *rank > model_cfg.embed_dim {
                    Err(Error::Config(format!(
                        "lora rank {} exceeds embed_dim {}",
                        rank, model_cfg.embed_dim
                    )))
                } else if targets.count() == 0 {
                    Err(Error::Config("lora needs at least one target".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoraPair {
    pub a: Tensor, // [r, e]
    pub b: Tensor, // [e, r]
}

#[derive(Debug, Clone)]
pub struct LoraLayerWeights {
    pub q: Option<LoraPair>,
    pub v: Option<LoraPair>,
}

#[derive(Debug, Clone)]
pub struct PrefixLayerWeights {
    pub k: Tensor, // [p, e]
    pub v: Tensor, // [p, e]
}

#[derive(Debug, Clone)]
pub enum Adapter {
    Frozen,
    Prompt { m: Tensor },
    Prefix { layers: Vec<PrefixLayerWeights> },
    Lora { layers: Vec<LoraLayerWeights> },
}

pub(crate) mod names {
    pub const PROMPT: &str = "adapter.prompt";

    pub fn prefix_k(layer: usize) -> String {
        format!("adapter.prefix.{layer}.k")
    }

    pub fn prefix_v(layer: usize) -> String {
        format!("adapter.prefix.{layer}.v")
    }

    pub fn lora(layer: usize, target: &str, factor: &str) -> String {
        format!("adapter.lora.{layer}.{target}.{factor}")
    }
}

/// A frozen base model plus the adapter weights of one fine-tuning strategy.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    base: TransformerLM,
    adapter: Adapter,
    cfg: PeftConfig,
}

/// Grafts adapter weights onto `base` and freezes every base tensor.
/// Prompt/prefix weights start from normal(0, 0.02); LoRA starts from
/// A ~ normal(0, 0.02), B = 0 so the initial update is exactly zero.
pub fn attach_adapter(mut base: TransformerLM, cfg: PeftConfig) -> Result<AdaptedModel> {
    cfg.validate(base.cfg())?;
    base.freeze();
    let e = base.cfg().embed_dim;
    let n_layers = base.cfg().n_layers;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adapter = match &cfg.variant {
        PeftVariant::Frozen => Adapter::Frozen,
        PeftVariant::PromptTuning { tokens } => Adapter::Prompt {
            m: Tensor::randn(vec![*tokens, e], INIT_STD, &mut rng).with_requires_grad(true),
        },
        PeftVariant::PrefixTuning { length } => {
            let layers = (0..n_layers)
                .map(|_| PrefixLayerWeights {
                    k: Tensor::randn(vec![*length, e], INIT_STD, &mut rng)
                        .with_requires_grad(true),
                    v: Tensor::randn(vec![*length, e], INIT_STD, &mut rng)
                        .with_requires_grad(true),
                })
                .collect();
            Adapter::Prefix { layers }
        }
        PeftVariant::Lora { rank, targets, .. } => {
            let pair = |rng: &mut ChaCha8Rng| LoraPair {
                a: Tensor::randn(vec![*rank, e], INIT_STD, rng).with_requires_grad(true),
                b: Tensor::zeros(vec![e, *rank]).with_requires_grad(true),
            };
            let layers = (0..n_layers)
                .map(|_| LoraLayerWeights {
                    q: targets.q.then(|| pair(&mut rng)),
                    v: targets.v.then(|| pair(&mut rng)),
                })
                .collect();
            Adapter::Lora { layers }
        }
    };
    Ok(AdaptedModel {
        base,
        adapter,
        cfg,
    })
}

impl AdaptedModel {
    pub fn base(&self) -> &TransformerLM {
        &self.base
    }

    pub fn peft_cfg(&self) -> &PeftConfig {
        &self.cfg
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    /// Virtual prompt rows prepended to every input (0 unless prompt tuning).
    pub fn virtual_tokens(&self) -> usize {
        match &self.adapter {
            Adapter::Prompt { m } => m.rows(),
            _ => 0,
        }
    }

    /// Explicit list of trainable tensor names inside the LM.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_adapter_params(&mut |name, _, _| out.push(name.to_string()));
        out
    }

    pub fn visit_adapter_params(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        match &self.adapter {
            Adapter::Frozen => {}
            Adapter::Prompt { m } => f(names::PROMPT, m, false),
            Adapter::Prefix { layers } => {
                for (l, p) in layers.iter().enumerate() {
                    f(&names::prefix_k(l), &p.k, false);
                    f(&names::prefix_v(l), &p.v, false);
                }
            }
            Adapter::Lora { layers } => {
                for (l, lw) in layers.iter().enumerate() {
                    if let Some(pair) = &lw.q {
                        f(&names::lora(l, "q", "a"), &pair.a, true);
                        f(&names::lora(l, "q", "b"), &pair.b, true);
                    }
                    if let Some(pair) = &lw.v {
                        f(&names::lora(l, "v", "a"), &pair.a, true);
                        f(&names::lora(l, "v", "b"), &pair.b, true);
                    }
                }
            }
        }
    }

    pub fn visit_adapter_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        match &mut self.adapter {
            Adapter::Frozen => {}
            Adapter::Prompt { m } => f(names::PROMPT, m, false),
            Adapter::Prefix { layers } => {
                for (l, p) in layers.iter_mut().enumerate() {
                    f(&names::prefix_k(l), &mut p.k, false);
                    f(&names::prefix_v(l), &mut p.v, false);
                }
            }
            Adapter::Lora { layers } => {
                for (l, lw) in layers.iter_mut().enumerate() {
                    if let Some(pair) = &mut lw.q {
                        f(&names::lora(l, "q", "a"), &mut pair.a, true);
                        f(&names::lora(l, "q", "b"), &mut pair.b, true);
                    }
                    if let Some(pair) = &mut lw.v {
                        f(&names::lora(l, "v", "a"), &mut pair.a, true);
                        f(&names::lora(l, "v", "b"), &mut pair.b, true);
                    }
                }
            }
        }
    }

    /// Trainable parameters inside the LM by enumeration, plus the percent
    /// of total LM parameters. The always-trained mapper is excluded.
    pub fn trainable_parameter_count(&self) -> (u64, f64) {
        let mut count = 0u64;
        self.visit_adapter_params(&mut |_, t, _| count += t.len() as u64);
        let percent = 100.0 * count as f64 / self.base.cfg().total_params() as f64;
        (count, percent)
    }

    fn prefix_extras(&self) -> Option<Vec<NamedKv<'_>>> {
        match &self.adapter {
            Adapter::Prefix { layers } => Some(
                layers
                    .iter()
                    .enumerate()
                    .map(|(l, p)| NamedKv {
                        name_k: names::prefix_k(l),
                        k: &p.k,
                        name_v: names::prefix_v(l),
                        v: &p.v,
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    fn lora_hook(&self) -> Option<LoraHook<'_>> {
        match (&self.adapter, &self.cfg.variant) {
            (Adapter::Lora { layers }, PeftVariant::Lora { rank, alpha, .. }) => {
                let scale = alpha / *rank as f64;
                Some(LoraHook {
                    layers: layers
                        .iter()
                        .enumerate()
                        .map(|(l, lw)| LayerLora {
                            q: lw.q.as_ref().map(|pair| LoraFactors {
                                name_a: names::lora(l, "q", "a"),
                                name_b: names::lora(l, "q", "b"),
                                a: &pair.a,
                                b: &pair.b,
                                scale,
                            }),
                            v: lw.v.as_ref().map(|pair| LoraFactors {
                                name_a: names::lora(l, "v", "a"),
                                name_b: names::lora(l, "v", "b"),
                                a: &pair.a,
                                b: &pair.b,
                                scale,
                            }),
                        })
                        .collect(),
                })
            }
            _ => None,
        }
    }

    /// Forward over a pre-embedded sequence with this adapter applied.
    /// Returns the logits node and the number of leading virtual rows the
    /// adapter prepended (prompt tuning only).
    pub fn forward_embedded_on(
        &self,
        g: &mut Graph,
        embedded: NodeId,
        key_valid: Option<&[bool]>,
    ) -> Result<(NodeId, usize)> {
        let virtual_tokens = self.virtual_tokens();
        let input = match &self.adapter {
            Adapter::Prompt { m } => {
                let n = g.shape(embedded)[0];
                if m.rows() + n > self.base.cfg().max_positions {
                    return Err(Error::Length {
                        len: m.rows() + n,
                        limit: self.base.cfg().max_positions,
                    });
                }
                let mid = g.param(names::PROMPT, m);
                g.concat_rows(&[mid, embedded])?
            }
            _ => embedded,
        };
        let extended_valid: Option<Vec<bool>> = key_valid.map(|kv| {
            let mut v = vec![true; virtual_tokens];
            v.extend_from_slice(kv);
            v
        });
        let prefixes = self.prefix_extras();
        let extras = AttentionExtras {
            prefixes: prefixes.as_deref(),
            virtual_tokens,
            key_valid: extended_valid.as_deref(),
        };
        let hook = self.lora_hook();
        let logits = self.base.forward_on(g, input, &extras, hook.as_ref())?;
        Ok((logits, virtual_tokens))
    }

    /// Materialized adapted forward for evaluation paths.
    pub fn forward_embedded(&self, embedded: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(embedded);
        let (logits, _) = self.forward_embedded_on(&mut g, x, None)?;
        Ok(g.value(logits))
    }

    /// Serializes the adapter configuration and adapter tensors only; the
    /// base model and mapper are checkpointed separately.
    pub fn save_adapter(&self, path: &Path) -> Result<()> {
        let record = AdapterRecord {
            peft: self.cfg.clone(),
            n_layers: self.base.cfg().n_layers,
            embed_dim: self.base.cfg().embed_dim,
        };
        let mut w = CheckpointWriter::create(path, &serde_json::to_string(&record)?)?;
        let mut result = Ok(());
        self.visit_adapter_params(&mut |name, t, _| {
            if result.is_ok() {
                result = w.tensor(name, t);
            }
        });
        result?;
        w.finish()
    }
}

#[derive(Serialize, Deserialize)]
struct AdapterRecord {
    peft: PeftConfig,
    n_layers: usize,
    embed_dim: usize,
}

/// Re-attaches a saved adapter onto an identically shaped base model.
pub fn load_adapter(base: TransformerLM, path: &Path) -> Result<AdaptedModel> {
    let mut ckpt = Checkpoint::read(path)?;
    let record: AdapterRecord = serde_json::from_str(&ckpt.config_json)?;
    if record.n_layers != base.cfg().n_layers || record.embed_dim != base.cfg().embed_dim {
        return Err(Error::Checkpoint(format!(
            "adapter built for L={}, e={} but base has L={}, e={}",
            record.n_layers,
            record.embed_dim,
            base.cfg().n_layers,
            base.cfg().embed_dim
        )));
    }
    let mut adapted = attach_adapter(base, record.peft)?;
    let mut result = Ok(());
    adapted.visit_adapter_params_mut(&mut |name, t, _| {
        if result.is_err() {
            return;
        }
        match ckpt.take(name) {
            Ok(loaded) if loaded.shape() == t.shape() => {
                *t = loaded.with_requires_grad(true);
            }
            Ok(loaded) => {
                result = Err(Error::Checkpoint(format!(
                    "adapter tensor {name}: shape {:?} != expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            Err(e) => result = Err(e),
        }
    });
    result?;
    Ok(adapted)
}

/// `y = x W^T + bias + (alpha/r) (x A^T) B^T` with the base projection
/// frozen; gradients flow into A and B only.
pub fn lora_linear(
    w: &Tensor,
    bias: &Tensor,
    a: &Tensor,
    b: &Tensor,
    alpha: f64,
    x: &Tensor,
) -> Result<Tensor> {
    let r = a.rows();
    let mut g = Graph::new();
    let xid = g.input(x);
    let wid = g.input(w); // frozen: registered without gradient
    let wt = g.transpose(wid);
    let base = g.matmul(xid, wt)?;
    let bid = g.input(bias);
    let base = g.add_bias(base, bid)?;
    let factors = LoraFactors {
        name_a: "lora.a".into(),
        name_b: "lora.b".into(),
        a,
        b,
        scale: alpha / r as f64,
    };
    let delta = crate::model::lora_delta_on(&mut g, xid, &factors)?;
    let sum = g.add(base, delta)?;
    Ok(g.value(sum))
}

/// Folds `W + (alpha/r) B A` into the base weights and returns the plain
/// model. Only defined for the LoRA variant; the returned model carries no
/// adapter, so a second merge is impossible by construction.
pub fn merge_lora(adapted: AdaptedModel) -> Result<TransformerLM> {
    let AdaptedModel {
        mut base,
        adapter,
        cfg,
    } = adapted;
    let (layers, scale) = match (adapter, &cfg.variant) {
        (Adapter::Lora { layers }, PeftVariant::Lora { rank, alpha, .. }) => {
            (layers, alpha / *rank as f64)
        }
        (other, _) => {
            return Err(Error::Variant(format!(
                "merge_lora on non-LoRA adapter {:?}",
                match other {
                    Adapter::Frozen => "frozen",
                    Adapter::Prompt { .. } => "prompt",
                    Adapter::Prefix { .. } => "prefix",
                    Adapter::Lora { .. } => unreachable!(),
                }
            )))
        }
    };
    let e = base.cfg().embed_dim;
    for (l, lw) in layers.iter().enumerate() {
        if let Some(pair) = &lw.q {
            fold_delta(&mut base.blocks[l].attn.wq, pair, scale, e);
        }
        if let Some(pair) = &lw.v {
            fold_delta(&mut base.blocks[l].attn.wv, pair, scale, e);
        }
    }
    Ok(base)
}

fn fold_delta(w: &mut Tensor, pair: &LoraPair, scale: f64, e: usize) {
    let r = pair.a.rows();
    // delta = B [e, r] . A [r, e]
    let b = pair.b.data();
    let a = pair.a.data();
    let data = w.data_mut();
    for i in 0..e {
        for p in 0..r {
            let bv = b[i * r + p] * scale;
            if bv == 0.0 {
                continue;
            }
            for j in 0..e {
                data[i * e + j] += bv * a[p * e + j];
            }
        }
    }
}

/// Prepends learnable virtual token embeddings to an embedded sequence.
pub fn prompt_prepend(m: &Tensor, embedded: &Tensor, max_positions: usize) -> Result<Tensor> {
    if m.cols() != embedded.cols() {
        return Err(Error::Dimension {
            op: "prompt_prepend",
            lhs: m.shape().to_vec(),
            rhs: embedded.shape().to_vec(),
        });
    }
    let total = m.rows() + embedded.rows();
    if total > max_positions {
        return Err(Error::Length {
            len: total,
            limit: max_positions,
        });
    }
    let mut data = Vec::with_capacity(total * m.cols());
    data.extend_from_slice(m.data());
    data.extend_from_slice(embedded.data());
    Tensor::new(vec![total, m.cols()], data)
}
