//! Decoder-only causal transformer over pre-embedded sequences.
//!
//! The model consumes an `[n, e]` embedding matrix rather than token ids, so
//! visual prefixes and learnable prompt tokens can be spliced into the input
//! without special cases. Pre-norm residual blocks, learned absolute
//! positions, tied input/output embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Mask, NodeId, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub ff_mult: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.embed_dim == 0
            || self.vocab_size == 0
            || self.max_positions == 0
            || self.ff_mult == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count (tied output head adds nothing).
    pub fn total_params(&self) -> u64 {
        let e = self.embed_dim as u64;
        let f = (self.ff_mult * self.embed_dim) as u64;
        let v = self.vocab_size as u64;
        let p = self.max_positions as u64;
        let l = self.n_layers as u64;
        let attn = 4 * (e * e + e);
        let mlp = (f * e + f) + (e * f + e);
        let norms = 4 * e;
        v * e + p * e + l * (attn + mlp + norms) + 2 * e
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

/// Weight set of the decoder-only language model.
#[derive(Debug, Clone)]
pub struct TransformerLM {
    cfg: ModelConfig,
    pub(crate) tok_emb: Tensor,
    pub(crate) pos_emb: Tensor,
    pub(crate) blocks: Vec<Block>,
    pub(crate) final_ln: LayerNormParams,
}

// Parameter names shared by init order, graph registration, checkpointing
// and the optimizer.
pub(crate) mod names {
    pub const TOK_EMB: &str = "tok_emb";
    pub const POS_EMB: &str = "pos_emb";
    pub const FINAL_LN_GAIN: &str = "final_ln.gain";
    pub const FINAL_LN_BIAS: &str = "final_ln.bias";

    pub fn block(layer: usize, field: &str) -> String {
        format!("layers.{layer}.{field}")
    }
}

/// One visited parameter: name, tensor, and whether weight decay applies
/// (matrices yes, biases/gains no).
pub struct ParamInfo<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    pub decay: bool,
}

impl TransformerLM {
    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Deterministic seeded initialization: matrices and embeddings from
    /// normal(0, 0.02), biases zero, layer-norm gains one.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let e = cfg.embed_dim;
        let f = cfg.ff_mult * e;
        let mut normal =
            |shape: Vec<usize>| Tensor::randn(shape, INIT_STD, &mut rng).with_requires_grad(true);
        let ln = |dim: usize| LayerNormParams {
            gain: Tensor::new(vec![dim], vec![1.0; dim])
                .expect("ln gain")
                .with_requires_grad(true),
            bias: Tensor::zeros(vec![dim]).with_requires_grad(true),
        };
        let tok_emb = normal(vec![cfg.vocab_size, e]);
        let pos_emb = normal(vec![cfg.max_positions, e]);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(Block {
                ln1: ln(e),
                attn: AttentionParams {
                    wq: normal(vec![e, e]),
                    bq: Tensor::zeros(vec![e]).with_requires_grad(true),
                    wk: normal(vec![e, e]),
                    bk: Tensor::zeros(vec![e]).with_requires_grad(true),
                    wv: normal(vec![e, e]),
                    bv: Tensor::zeros(vec![e]).with_requires_grad(true),
                    wo: normal(vec![e, e]),
                    bo: Tensor::zeros(vec![e]).with_requires_grad(true),
                },
                ln2: ln(e),
                mlp: MlpParams {
                    w1: normal(vec![f, e]),
                    b1: Tensor::zeros(vec![f]).with_requires_grad(true),
                    w2: normal(vec![e, f]),
                    b2: Tensor::zeros(vec![e]).with_requires_grad(true),
                },
            });
        }
        Ok(TransformerLM {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
            final_ln: ln(e),
        })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(ParamInfo<'_>)) {
        fn p(name: String, tensor: &Tensor, decay: bool) -> ParamInfo<'_> {
            ParamInfo {
                name,
                tensor,
                decay,
            }
        }
        f(p(names::TOK_EMB.into(), &self.tok_emb, true));
        f(p(names::POS_EMB.into(), &self.pos_emb, true));
        for (l, b) in self.blocks.iter().enumerate() {
            f(p(names::block(l, "ln1.gain"), &b.ln1.gain, false));
            f(p(names::block(l, "ln1.bias"), &b.ln1.bias, false));
            f(p(names::block(l, "attn.wq"), &b.attn.wq, true));
            f(p(names::block(l, "attn.bq"), &b.attn.bq, false));
            f(p(names::block(l, "attn.wk"), &b.attn.wk, true));
            f(p(names::block(l, "attn.bk"), &b.attn.bk, false));
            f(p(names::block(l, "attn.wv"), &b.attn.wv, true));
            f(p(names::block(l, "attn.bv"), &b.attn.bv, false));
            f(p(names::block(l, "attn.wo"), &b.attn.wo, true));
            f(p(names::block(l, "attn.bo"), &b.attn.bo, false));
            f(p(names::block(l, "ln2.gain"), &b.ln2.gain, false));
            f(p(names::block(l, "ln2.bias"), &b.ln2.bias, false));
            f(p(names::block(l, "mlp.w1"), &b.mlp.w1, true));
            f(p(names::block(l, "mlp.b1"), &b.mlp.b1, false));
            f(p(names::block(l, "mlp.w2"), &b.mlp.w2, true));
            f(p(names::block(l, "mlp.b2"), &b.mlp.b2, false));
        }
        f(p(names::FINAL_LN_GAIN.into(), &self.final_ln.gain, false));
        f(p(names::FINAL_LN_BIAS.into(), &self.final_ln.bias, false));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(names::TOK_EMB, &mut self.tok_emb);
        f(names::POS_EMB, &mut self.pos_emb);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            f(&names::block(l, "ln1.gain"), &mut b.ln1.gain);
            f(&names::block(l, "ln1.bias"), &mut b.ln1.bias);
            f(&names::block(l, "attn.wq"), &mut b.attn.wq);
            f(&names::block(l, "attn.bq"), &mut b.attn.bq);
            f(&names::block(l, "attn.wk"), &mut b.attn.wk);
            f(&names::block(l, "attn.bk"), &mut b.attn.bk);
            f(&names::block(l, "attn.wv"), &mut b.attn.wv);
            f(&names::block(l, "attn.bv"), &mut b.attn.bv);
            f(&names::block(l, "attn.wo"), &mut b.attn.wo);
            f(&names::block(l, "attn.bo"), &mut b.attn.bo);
            f(&names::block(l, "ln2.gain"), &mut b.ln2.gain);
            f(&names::block(l, "ln2.bias"), &mut b.ln2.bias);
            f(&names::block(l, "mlp.w1"), &mut b.mlp.w1);
            f(&names::block(l, "mlp.b1"), &mut b.mlp.b1);
            f(&names::block(l, "mlp.w2"), &mut b.mlp.w2);
            f(&names::block(l, "mlp.b2"), &mut b.mlp.b2);
        }
        f(names::FINAL_LN_GAIN, &mut self.final_ln.gain);
        f(names::FINAL_LN_BIAS, &mut self.final_ln.bias);
    }

    /// Parameter count by enumeration; must equal the closed form.
    pub fn count_params(&self) -> u64 {
        let mut total = 0u64;
        self.visit_params(&mut |p| total += p.tensor.len() as u64);
        total
    }

    pub fn param_clone(&self, name: &str) -> Option<Tensor> {
        let mut found = None;
        self.visit_params(&mut |p| {
            if p.name == name {
                found = Some(p.tensor.clone());
            }
        });
        found
    }

    pub fn freeze(&mut self) {
        self.visit_params_mut(&mut |_, t| t.set_requires_grad(false));
    }

    /// Token + position embedding per index, materialized.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        let e = self.cfg.embed_dim;
        if ids.len() > self.cfg.max_positions {
            return Err(Error::Length {
                len: ids.len(),
                limit: self.cfg.max_positions,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for (pos, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.cfg.vocab_size {
                return Err(Error::Index(format!(
                    "token id {id} >= vocab size {}",
                    self.cfg.vocab_size
                )));
            }
            for c in 0..e {
                data.push(self.tok_emb.at(id, c) + self.pos_emb.at(pos, c));
            }
        }
        Tensor::new(vec![ids.len(), e], data)
    }

    /// Graph-recorded version of `embed_tokens` for training paths.
    pub fn embed_tokens_on(&self, g: &mut Graph, ids: &[u32]) -> Result<NodeId> {
        if ids.len() > self.cfg.max_positions {
            return Err(Error::Length {
                len: ids.len(),
                limit: self.cfg.max_positions,
            });
        }
        let ids_usize: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = g.param(names::TOK_EMB, &self.tok_emb);
        let emb = g.embedding_lookup(tok, &ids_usize)?;
        let pos = g.param(names::POS_EMB, &self.pos_emb);
        let pos_rows = g.slice_rows(pos, 0, ids.len())?;
        g.add(emb, pos_rows)
    }

    /// Next-token logits for every input position.
    pub fn forward(&self, embedded: &Tensor, extras: &AttentionExtras<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(embedded);
        let logits = self.forward_on(&mut g, x, extras, None)?;
        Ok(g.value(logits))
    }

    /// Last row of `forward`.
    pub fn next_token_logits(
        &self,
        embedded: &Tensor,
        extras: &AttentionExtras<'_>,
    ) -> Result<Tensor> {
        let logits = self.forward(embedded, extras)?;
        let v = self.cfg.vocab_size;
        let n = logits.rows();
        Tensor::new(vec![v], logits.data()[(n - 1) * v..n * v].to_vec())
    }

    /// Full forward pass on a graph. `lora` supplies low-rank deltas for the
    /// query/value projections of each layer.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        embedded: NodeId,
        extras: &AttentionExtras<'_>,
        lora: Option<&LoraHook<'_>>,
    ) -> Result<NodeId> {
        let e = self.cfg.embed_dim;
        let heads = self.cfg.n_heads;
        let dh = e / heads;
        let shape = g.shape(embedded).to_vec();
        if shape.len() != 2 || shape[1] != e {
            return Err(Error::Dimension {
                op: "forward",
                lhs: shape,
                rhs: vec![0, e],
            });
        }
        let n = shape[0];
        if n == 0 {
            return Err(Error::Input("forward: empty sequence".into()));
        }
        if n < extras.virtual_tokens {
            return Err(Error::Input(
                "forward: virtual token count exceeds sequence".into(),
            ));
        }
        let prefix_len = extras.prefix_len()?;
        let real = n - extras.virtual_tokens;
        if real + prefix_len > self.cfg.max_positions {
            return Err(Error::Length {
                len: real + prefix_len,
                limit: self.cfg.max_positions,
            });
        }
        if let Some(kv) = extras.key_valid {
            if kv.len() != n {
                return Err(Error::Dimension {
                    op: "forward.key_valid",
                    lhs: vec![kv.len()],
                    rhs: vec![n],
                });
            }
        }
        if let Some(prefixes) = extras.prefixes {
            if prefixes.len() != self.cfg.n_layers {
                return Err(Error::Config(format!(
                    "{} prefix layers for {} model layers",
                    prefixes.len(),
                    self.cfg.n_layers
                )));
            }
        }

        let mask = Mask::causal_with_prefix(n, prefix_len, extras.key_valid);
        let mut h = embedded;
        for (l, block) in self.blocks.iter().enumerate() {
            // Attention sublayer, pre-norm.
            let ln1g = g.param(&names::block(l, "ln1.gain"), &block.ln1.gain);
            let ln1b = g.param(&names::block(l, "ln1.bias"), &block.ln1.bias);
            let x1 = g.layer_norm(h, ln1g, ln1b, LN_EPS)?;

            let layer_lora = lora.map(|hook| &hook.layers[l]);
            let q = self.linear_with_lora(
                g,
                x1,
                &names::block(l, "attn.wq"),
                &block.attn.wq,
                &names::block(l, "attn.bq"),
                &block.attn.bq,
                layer_lora.and_then(|ll| ll.q.as_ref()),
            )?;
            let k = self.linear(
                g,
                x1,
                &names::block(l, "attn.wk"),
                &block.attn.wk,
                &names::block(l, "attn.bk"),
                &block.attn.bk,
            )?;
            let v = self.linear_with_lora(
                g,
                x1,
                &names::block(l, "attn.wv"),
                &block.attn.wv,
                &names::block(l, "attn.bv"),
                &block.attn.bv,
                layer_lora.and_then(|ll| ll.v.as_ref()),
            )?;

            // Learnable key/value prefixes prepend extra attention slots
            // without consuming positions or extending the output.
            let (k_full, v_full) = match extras.prefixes {
                Some(prefixes) => {
                    let pk = g.param(&prefixes[l].name_k, prefixes[l].k);
                    let pv = g.param(&prefixes[l].name_v, prefixes[l].v);
                    (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?)
                }
                None => (k, v),
            };

            let mut head_outs = Vec::with_capacity(heads);
            for hi in 0..heads {
                let qh = g.slice_cols(q, hi * dh, dh)?;
                let kh = g.slice_cols(k_full, hi * dh, dh)?;
                let vh = g.slice_cols(v_full, hi * dh, dh)?;
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt)?;
                let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
                let probs = g.masked_softmax(scaled, &mask)?;
                head_outs.push(g.matmul(probs, vh)?);
            }
            let ctx = g.concat_cols(&head_outs)?;
            let attn_out = self.linear(
                g,
                ctx,
                &names::block(l, "attn.wo"),
                &block.attn.wo,
                &names::block(l, "attn.bo"),
                &block.attn.bo,
            )?;
            h = g.add(h, attn_out)?;

            // MLP sublayer, pre-norm.
            let ln2g = g.param(&names::block(l, "ln2.gain"), &block.ln2.gain);
            let ln2b = g.param(&names::block(l, "ln2.bias"), &block.ln2.bias);
            let x2 = g.layer_norm(h, ln2g, ln2b, LN_EPS)?;
            let mid = self.linear(
                g,
                x2,
                &names::block(l, "mlp.w1"),
                &block.mlp.w1,
                &names::block(l, "mlp.b1"),
                &block.mlp.b1,
            )?;
            let mid = g.gelu(mid);
            let mlp_out = self.linear(
                g,
                mid,
                &names::block(l, "mlp.w2"),
                &block.mlp.w2,
                &names::block(l, "mlp.b2"),
                &block.mlp.b2,
            )?;
            h = g.add(h, mlp_out)?;
        }

        let fg = g.param(names::FINAL_LN_GAIN, &self.final_ln.gain);
        let fb = g.param(names::FINAL_LN_BIAS, &self.final_ln.bias);
        let hf = g.layer_norm(h, fg, fb, LN_EPS)?;
        // Tied output head: project onto the token embedding.
        let tok = g.param(names::TOK_EMB, &self.tok_emb);
        let tok_t = g.transpose(tok);
        g.matmul(hf, tok_t)
    }

    fn linear(
        &self,
        g: &mut Graph,
        x: NodeId,
        wname: &str,
        w: &Tensor,
        bname: &str,
        b: &Tensor,
    ) -> Result<NodeId> {
        let wid = g.param(wname, w);
        let wt = g.transpose(wid);
        let y = g.matmul(x, wt)?;
        let bid = g.param(bname, b);
        g.add_bias(y, bid)
    }

    fn linear_with_lora(
        &self,
        g: &mut Graph,
        x: NodeId,
        wname: &str,
        w: &Tensor,
        bname: &str,
        b: &Tensor,
        lora: Option<&LoraFactors<'_>>,
    ) -> Result<NodeId> {
        let base = self.linear(g, x, wname, w, bname, b)?;
        match lora {
            None => Ok(base),
            Some(factors) => {
                let delta = lora_delta_on(g, x, factors)?;
                g.add(base, delta)
            }
        }
    }
}

/// `(alpha/r) * (x A^T) B^T` — the low-rank contribution of one adapted
/// projection.
pub(crate) fn lora_delta_on(g: &mut Graph, x: NodeId, f: &LoraFactors<'_>) -> Result<NodeId> {
    let a = g.param(&f.name_a, f.a);
    let b = g.param(&f.name_b, f.b);
    let at = g.transpose(a);
    let xa = g.matmul(x, at)?;
    let bt = g.transpose(b);
    let xab = g.matmul(xa, bt)?;
    Ok(g.scale(xab, f.scale))
}

/// Low-rank factors for one projection: `A [r, e]`, `B [e, r]`, and the
/// `alpha / r` scale.
pub struct LoraFactors<'a> {
    pub name_a: String,
    pub name_b: String,
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub scale: f64,
}

pub struct LayerLora<'a> {
    pub q: Option<LoraFactors<'a>>,
    pub v: Option<LoraFactors<'a>>,
}

pub struct LoraHook<'a> {
    pub layers: Vec<LayerLora<'a>>,
}

/// Named per-layer key/value prefix entering attention as raw slots.
pub struct NamedKv<'a> {
    pub name_k: String,
    pub k: &'a Tensor,
    pub name_v: String,
    pub v: &'a Tensor,
}

/// Adapter-supplied additions to attention: per-layer key/value prefixes,
/// leading virtual prompt tokens, and key validity for padded batches.
#[derive(Default)]
pub struct AttentionExtras<'a> {
    pub prefixes: Option<&'a [NamedKv<'a>]>,
    pub virtual_tokens: usize,
    pub key_valid: Option<&'a [bool]>,
}

impl<'a> AttentionExtras<'a> {
    pub fn none() -> Self {
        AttentionExtras::default()
    }

    fn prefix_len(&self) -> Result<usize> {
        match self.prefixes {
            None => Ok(0),
            Some(layers) => {
                let first = layers
                    .first()
                    .ok_or_else(|| Error::Config("empty prefix list".into()))?;
                let p = first.k.rows();
                for kv in layers {
                    if kv.k.rows() != p || kv.v.rows() != p {
                        return Err(Error::Config(
                            "prefix length differs across layers".into(),
                        ));
                    }
                }
                Ok(p)
            }
        }
    }
}
