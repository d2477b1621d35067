//! Tokenization, length budgeting, prompt templating and loss masking.
//!
//! A prompt is assembled as `question: <q> context: <visual prefix> answer:
//! <a> <eos>` (template variants reorder or drop blocks). Token slots carry
//! ids; visual slots are filled by the mapping network at embed time so the
//! whole sample stays differentiable end to end.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mapper::{Mapper, VisualFeature};
use crate::model::TransformerLM;
use crate::tensor::{Graph, NodeId};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;

pub const MARKER_QUESTION: &str = "question:";
pub const MARKER_CONTEXT: &str = "context:";
pub const MARKER_ANSWER: &str = "answer:";

const RESERVED: [&str; 6] = [
    "<pad>",
    "<unk>",
    "<eos>",
    MARKER_QUESTION,
    MARKER_CONTEXT,
    MARKER_ANSWER,
];

/// Whitespace-and-punctuation tokenizer with a fixed id table.
/// PAD/UNK/EOS occupy ids 0..2 and the three prompt markers ids 3..5.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Lowercases and splits on whitespace; chunks that are exactly a marker
/// string stay whole, everything else breaks into alphanumeric runs.
fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        if lower == MARKER_QUESTION || lower == MARKER_CONTEXT || lower == MARKER_ANSWER {
            out.push(lower);
            continue;
        }
        let mut run = String::new();
        for ch in lower.chars() {
            if ch.is_alphanumeric() {
                run.push(ch);
            } else if !run.is_empty() {
                out.push(std::mem::take(&mut run));
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

impl Tokenizer {
    /// Builds a vocabulary from a corpus. Tokens seen fewer than `min_count`
    /// times map to UNK; ids are assigned by (count desc, token asc).
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("build_vocab: empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, count)| *count >= min_count && !RESERVED.contains(&tok.as_str()))
            .collect();
        kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Ok(Tokenizer::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Tokenizer { tokens, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .into_iter()
            .map(|tok| self.index.get(&tok).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < RESERVED.len() {
            return Err(Error::Format("vocabulary file too short".into()));
        }
        for (i, expected) in RESERVED.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(Error::Format(format!(
                    "vocabulary line {i} is {:?}, expected {expected:?}",
                    tokens[i]
                )));
            }
        }
        Ok(Tokenizer::from_tokens(tokens))
    }
}

/// ceil(mean + 3 * population std) over training-set token lengths.
pub fn compute_length_budget(token_lengths: &[usize]) -> Result<usize> {
    if token_lengths.is_empty() {
        return Err(Error::Input("length budget: empty length list".into()));
    }
    let n = token_lengths.len() as f64;
    let mean = token_lengths.iter().map(|&l| l as f64).sum::<f64>() / n;
    let var = token_lengths
        .iter()
        .map(|&l| (l as f64 - mean) * (l as f64 - mean))
        .sum::<f64>()
        / n;
    Ok(length_budget_from_stats(mean, var.sqrt()))
}

pub fn length_budget_from_stats(mean: f64, std: f64) -> usize {
    (mean + 3.0 * std).ceil() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LengthBudget {
    pub max_question: usize,
    pub max_answer: usize,
}

impl LengthBudget {
    pub fn new(max_question: usize, max_answer: usize) -> Result<Self> {
        if max_question == 0 || max_answer == 0 {
            return Err(Error::Config("length budgets must be >= 1".into()));
        }
        Ok(LengthBudget {
            max_question,
            max_answer,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    Regular,
    WithoutQuestion,
    WithoutImage,
    Swapped,
}

impl PromptTemplate {
    pub const ALL: [PromptTemplate; 4] = [
        PromptTemplate::Regular,
        PromptTemplate::WithoutQuestion,
        PromptTemplate::WithoutImage,
        PromptTemplate::Swapped,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PromptTemplate::Regular => "regular",
            PromptTemplate::WithoutQuestion => "without_question",
            PromptTemplate::WithoutImage => "without_image",
            PromptTemplate::Swapped => "swapped",
        }
    }

    pub fn has_question(&self) -> bool {
        !matches!(self, PromptTemplate::WithoutQuestion)
    }

    pub fn has_image(&self) -> bool {
        !matches!(self, PromptTemplate::WithoutImage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssembleMode {
    Train,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(u32),
    /// Row k of the visual prefix.
    Visual(usize),
}

/// One assembled prompt: slot layout, per-position ids and loss mask, plus
/// the raw feature vector consumed at embed time.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub slots: Vec<Slot>,
    /// Per-slot token id; visual slots carry PAD as filler (never a target).
    pub ids: Vec<u32>,
    /// True exactly on answer tokens and the terminating EOS.
    pub loss_mask: Vec<bool>,
    pub visual_span: Option<Range<usize>>,
    /// Length before right padding.
    pub real_len: usize,
    pub feature: Option<Vec<f64>>,
    pub answer_ids: Vec<u32>,
}

impl EncodedSample {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Key validity per position: padding is masked out of attention keys.
    pub fn key_valid(&self) -> Vec<bool> {
        (0..self.len()).map(|t| t < self.real_len).collect()
    }

    /// Next-token targets aligned with forward logits: position t predicts
    /// slot t+1. The final row never contributes.
    pub fn shifted_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.len();
        let mut targets = vec![0usize; n];
        let mut mask = vec![false; n];
        for t in 0..n.saturating_sub(1) {
            targets[t] = self.ids[t + 1] as usize;
            mask[t] = self.loss_mask[t + 1];
        }
        (targets, mask)
    }

    /// Appends a generated token (used by the decoding loop).
    pub fn push_token(&mut self, id: u32) {
        self.slots.push(Slot::Token(id));
        self.ids.push(id);
        self.loss_mask.push(false);
        self.real_len += 1;
    }

    /// Builds the embedded matrix on the graph: token slots get token plus
    /// position embeddings, visual slots get mapper rows (no position
    /// embedding, like attention prefixes they learn their own geometry).
    pub fn embed_on(
        &self,
        g: &mut Graph,
        model: &TransformerLM,
        mapper: &Mapper,
    ) -> Result<NodeId> {
        enum Run {
            Tokens { start: usize, ids: Vec<u32> },
            Visual { start: usize, len: usize },
        }
        let mut runs: Vec<Run> = Vec::new();
        for (pos, slot) in self.slots.iter().enumerate() {
            match slot {
                Slot::Token(id) => match runs.last_mut() {
                    Some(Run::Tokens { ids, .. }) => ids.push(*id),
                    _ => runs.push(Run::Tokens {
                        start: pos,
                        ids: vec![*id],
                    }),
                },
                Slot::Visual(_) => match runs.last_mut() {
                    Some(Run::Visual { len, .. }) => *len += 1,
                    _ => runs.push(Run::Visual { start: pos, len: 1 }),
                },
            }
        }
        let mut parts = Vec::with_capacity(runs.len());
        for run in &runs {
            match run {
                Run::Tokens { start, ids } => {
                    let ids_usize: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
                    let tok = g.param(crate::model::names::TOK_EMB, &model.tok_emb);
                    let looked = g.embedding_lookup(tok, &ids_usize)?;
                    let pos = g.param(crate::model::names::POS_EMB, &model.pos_emb);
                    if start + ids.len() > model.cfg().max_positions {
                        return Err(Error::Length {
                            len: start + ids.len(),
                            limit: model.cfg().max_positions,
                        });
                    }
                    let pos_rows = g.slice_rows(pos, *start, ids.len())?;
                    parts.push(g.add(looked, pos_rows)?);
                }
                Run::Visual { len, .. } => {
                    let feature = self.feature.as_ref().ok_or_else(|| {
                        Error::Input("sample has a visual span but no feature".into())
                    })?;
                    if *len != mapper.cfg().prefix_len {
                        return Err(Error::Dimension {
                            op: "embed.visual_span",
                            lhs: vec![*len],
                            rhs: vec![mapper.cfg().prefix_len],
                        });
                    }
                    let feat = VisualFeature::new(feature.clone())?;
                    parts.push(mapper.map_features_on(g, &feat)?);
                }
            }
        }
        g.concat_rows(&parts)
    }
}

/// Assembles a prompt under a template. Regular order: `question:` block,
/// `context:` block holding the visual prefix, `answer:` block (answer
/// tokens + EOS in train mode). Swapped puts the context block first;
/// the Without* templates drop a block together with its marker.
#[allow(clippy::too_many_arguments)]
pub fn assemble_prompt(
    tok: &Tokenizer,
    question: &str,
    feature: Option<&VisualFeature>,
    answer: Option<&str>,
    budget: &LengthBudget,
    template: PromptTemplate,
    mode: AssembleMode,
    prefix_len: usize,
) -> Result<EncodedSample> {
    let mut q_ids = tok.encode(question);
    if template.has_question() && q_ids.is_empty() {
        return Err(Error::Input("question is empty".into()));
    }
    q_ids.truncate(budget.max_question);

    let answer_ids: Vec<u32> = match (mode, answer) {
        (AssembleMode::Train, Some(a)) => {
            let mut ids = tok.encode(a);
            ids.truncate(budget.max_answer);
            ids
        }
        (AssembleMode::Train, None) => {
            return Err(Error::Input("train-mode prompt needs an answer".into()))
        }
        (AssembleMode::Inference, _) => Vec::new(),
    };

    let mut slots = Vec::new();
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    let mut visual_span = None;

    let mut push_tok = |slots: &mut Vec<Slot>, ids: &mut Vec<u32>, mask: &mut Vec<bool>, id: u32, in_loss: bool| {
        slots.push(Slot::Token(id));
        ids.push(id);
        mask.push(in_loss);
    };

    let q_marker = tok.id(MARKER_QUESTION).expect("marker present");
    let c_marker = tok.id(MARKER_CONTEXT).expect("marker present");
    let a_marker = tok.id(MARKER_ANSWER).expect("marker present");

    let mut push_question = |slots: &mut Vec<Slot>, ids: &mut Vec<u32>, mask: &mut Vec<bool>| {
        push_tok(slots, ids, mask, q_marker, false);
        for &id in &q_ids {
            push_tok(slots, ids, mask, id, false);
        }
    };
    let push_image = |slots: &mut Vec<Slot>,
                      ids: &mut Vec<u32>,
                      mask: &mut Vec<bool>,
                      visual_span: &mut Option<Range<usize>>| {
        slots.push(Slot::Token(c_marker));
        ids.push(c_marker);
        mask.push(false);
        let start = slots.len();
        for k in 0..prefix_len {
            slots.push(Slot::Visual(k));
            ids.push(PAD);
            mask.push(false);
        }
        *visual_span = Some(start..start + prefix_len);
    };

    match template {
        PromptTemplate::Regular => {
            push_question(&mut slots, &mut ids, &mut mask);
            push_image(&mut slots, &mut ids, &mut mask, &mut visual_span);
        }
        PromptTemplate::Swapped => {
            push_image(&mut slots, &mut ids, &mut mask, &mut visual_span);
            push_question(&mut slots, &mut ids, &mut mask);
        }
        PromptTemplate::WithoutQuestion => {
            push_image(&mut slots, &mut ids, &mut mask, &mut visual_span);
        }
        PromptTemplate::WithoutImage => {
            push_question(&mut slots, &mut ids, &mut mask);
        }
    }

    // answer block is always last
    slots.push(Slot::Token(a_marker));
    ids.push(a_marker);
    mask.push(false);
    if mode == AssembleMode::Train {
        for &id in &answer_ids {
            slots.push(Slot::Token(id));
            ids.push(id);
            mask.push(true);
        }
        slots.push(Slot::Token(EOS));
        ids.push(EOS);
        mask.push(true);
    }

    let real_len = slots.len();
    Ok(EncodedSample {
        slots,
        ids,
        loss_mask: mask,
        visual_span,
        real_len,
        feature: if template.has_image() {
            Some(
                feature
                    .ok_or_else(|| Error::Input("template needs an image feature".into()))?
                    .values()
                    .to_vec(),
            )
        } else {
            None
        },
        answer_ids,
    })
}

/// Right-pads every sample to the batch maximum with PAD token slots;
/// padding stays outside the loss mask and attention keys.
pub fn pad_batch(samples: &mut [EncodedSample]) -> Result<usize> {
    let width = samples
        .iter()
        .map(|s| s.len())
        .max()
        .ok_or_else(|| Error::Input("pad_batch: empty batch".into()))?;
    for s in samples.iter_mut() {
        while s.len() < width {
            s.slots.push(Slot::Token(PAD));
            s.ids.push(PAD);
            s.loss_mask.push(false);
        }
    }
    Ok(width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::{MapperConfig, FEATURE_DIM};
    use crate::model::ModelConfig;

    fn toy_tokenizer() -> Tokenizer {
        Tokenizer::build(
            &["what color is the square", "red blue green yes no circle"],
            1,
        )
        .unwrap()
    }

    #[test]
    fn build_vocab_counts_and_reserved_tokens() {
        let tok = Tokenizer::build(&["yes", "yes", "no"], 1).unwrap();
        // {yes, no} plus 6 reserved/marker tokens
        assert_eq!(tok.vocab_size(), 8);
        assert_eq!(tok.id("yes"), Some(6)); // higher count wins the first id
        assert_eq!(tok.id("no"), Some(7));
        assert_eq!(tok.id(MARKER_QUESTION), Some(3));
    }

    #[test]
    fn min_count_maps_rare_tokens_to_unk() {
        let tok = Tokenizer::build(&["yes yes rare"], 2).unwrap();
        assert_eq!(tok.encode("rare"), vec![UNK]);
        assert_eq!(tok.encode("yes"), vec![6]);
    }

    #[test]
    fn encode_recognizes_markers() {
        let tok = Tokenizer::build(&["yes"], 1).unwrap();
        assert_eq!(tok.encode("question: yes"), vec![3, 6]);
    }

    #[test]
    fn encode_decode_round_trip_for_in_vocab_text() {
        let tok = toy_tokenizer();
        let text = "what is the square red";
        assert_eq!(tok.decode(&tok.encode(text)), text);
    }

    #[test]
    fn tokenizer_strips_punctuation_and_lowercases() {
        let tok = toy_tokenizer();
        assert_eq!(tok.encode("Red!"), tok.encode("red"));
        assert_eq!(tok.encode("the  square."), tok.encode("the square"));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(Tokenizer::build(&[] as &[&str], 1).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let tok = toy_tokenizer();
        tok.save(&path).unwrap();
        let loaded = Tokenizer::load(&path).unwrap();
        assert_eq!(loaded.vocab_size(), tok.vocab_size());
        assert_eq!(loaded.encode("square"), tok.encode("square"));
    }

    #[test]
    fn length_budget_examples() {
        assert_eq!(compute_length_budget(&[2, 2, 2]).unwrap(), 2);
        assert_eq!(compute_length_budget(&[1, 3]).unwrap(), 5);
        // answers with mean 1.21 and std 0.6: ceil(1.21 + 1.8) = 4
        assert_eq!(length_budget_from_stats(1.21, 0.6), 4);
        assert!(compute_length_budget(&[]).is_err());
    }

    fn feat(v: f64) -> VisualFeature {
        VisualFeature::new(vec![v; FEATURE_DIM]).unwrap()
    }

    #[test]
    fn regular_assembly_layout_and_mask() {
        let tok = toy_tokenizer();
        let budget = LengthBudget::new(8, 4).unwrap();
        let s = assemble_prompt(
            &tok,
            "what color square", // 3 tokens
            Some(&feat(0.1)),
            Some("red"),
            &budget,
            PromptTemplate::Regular,
            AssembleMode::Train,
            8,
        )
        .unwrap();
        // 1 + 3 + 1 + 8 + 1 + 1 + 1
        assert_eq!(s.len(), 16);
        assert_eq!(s.visual_span, Some(5..13));
        let mask_true: Vec<usize> = (0..s.len()).filter(|&i| s.loss_mask[i]).collect();
        assert_eq!(mask_true, vec![14, 15]); // answer token + EOS
        assert_eq!(s.ids[15], EOS);
    }

    #[test]
    fn without_image_drops_block_and_marker() {
        let tok = toy_tokenizer();
        let budget = LengthBudget::new(8, 4).unwrap();
        let make = |template| {
            assemble_prompt(
                &tok,
                "what color square",
                Some(&feat(0.1)),
                Some("red"),
                &budget,
                template,
                AssembleMode::Train,
                8,
            )
            .unwrap()
        };
        let regular = make(PromptTemplate::Regular);
        let no_image = make(PromptTemplate::WithoutImage);
        // visual block (8) plus its context: marker (1)
        assert_eq!(no_image.len(), regular.len() - 9);
        assert!(no_image.visual_span.is_none());
        assert!(no_image.feature.is_none());
    }

    #[test]
    fn swapped_reorders_blocks_but_answer_stays_last() {
        let tok = toy_tokenizer();
        let budget = LengthBudget::new(8, 4).unwrap();
        let make = |template| {
            assemble_prompt(
                &tok,
                "what color square",
                Some(&feat(0.1)),
                Some("red"),
                &budget,
                template,
                AssembleMode::Train,
                4,
            )
            .unwrap()
        };
        let regular = make(PromptTemplate::Regular);
        let swapped = make(PromptTemplate::Swapped);
        assert_eq!(regular.len(), swapped.len());
        // same multiset of slots
        let mut a = regular.ids.clone();
        let mut b = swapped.ids.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        // swapped starts with the context block
        assert_eq!(swapped.ids[0], tok.id(MARKER_CONTEXT).unwrap());
        assert_eq!(swapped.visual_span, Some(1..5));
        // answer block at the end in both
        let tail = &regular.ids[regular.len() - 3..];
        assert_eq!(tail[0], tok.id(MARKER_ANSWER).unwrap());
        let tail_s = &swapped.ids[swapped.len() - 3..];
        assert_eq!(tail_s[0], tok.id(MARKER_ANSWER).unwrap());
    }

    #[test]
    fn question_truncates_to_budget() {
        let tok = toy_tokenizer();
        let budget = LengthBudget::new(2, 4).unwrap();
        let s = assemble_prompt(
            &tok,
            "what color is the square",
            Some(&feat(0.0)),
            None,
            &budget,
            PromptTemplate::Regular,
            AssembleMode::Inference,
            4,
        )
        .unwrap();
        // marker + 2 question tokens + marker + 4 visual + answer marker
        assert_eq!(s.len(), 1 + 2 + 1 + 4 + 1);
    }

    #[test]
    fn train_mode_requires_answer_and_question() {
        let tok = toy_tokenizer();
        let budget = LengthBudget::new(4, 4).unwrap();
        assert!(matches!(
            assemble_prompt(
                &tok,
                "what",
                Some(&feat(0.0)),
                None,
                &budget,
                PromptTemplate::Regular,
                AssembleMode::Train,
                4,
            ),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            assemble_prompt(
                &tok,
                "  ",
                Some(&feat(0.0)),
                Some("red"),
                &budget,
                PromptTemplate::Regular,
                AssembleMode::Train,
                4,
            ),
            Err(Error::Input(_))
        ));
        // an empty question is fine when the template drops it
        assert!(assemble_prompt(
            &tok,
            "",
            Some(&feat(0.0)),
            Some("red"),
            &budget,
            PromptTemplate::WithoutQuestion,
            AssembleMode::Train,
            4,
        )
        .is_ok());
    }

    #[test]
    fn pad_batch_pads_to_maximum() {
        let tok = toy_tokenizer();
        let budget = LengthBudget::new(8, 4).unwrap();
        let mut samples = vec![
            assemble_prompt(
                &tok,
                "square",
                Some(&feat(0.0)),
                Some("red"),
                &budget,
                PromptTemplate::Regular,
                AssembleMode::Train,
                4,
            )
            .unwrap(),
            assemble_prompt(
                &tok,
                "what color is the",
                Some(&feat(0.0)),
                Some("red"),
                &budget,
                PromptTemplate::Regular,
                AssembleMode::Train,
                4,
            )
            .unwrap(),
        ];
        let short = samples[0].len();
        let width = pad_batch(&mut samples).unwrap();
        assert_eq!(width, samples[1].len());
        assert_eq!(samples[0].len(), width);
        assert_eq!(samples[0].real_len, short);
        for t in short..width {
            assert_eq!(samples[0].ids[t], PAD);
            assert!(!samples[0].loss_mask[t]);
            assert!(!samples[0].key_valid()[t]);
        }
        // single sample stays unchanged
        let mut single = vec![samples[1].clone()];
        let before = single[0].len();
        pad_batch(&mut single).unwrap();
        assert_eq!(single[0].len(), before);
    }

    #[test]
    fn shifted_targets_align_next_token() {
        let tok = toy_tokenizer();
        let budget = LengthBudget::new(4, 4).unwrap();
        let s = assemble_prompt(
            &tok,
            "square",
            Some(&feat(0.0)),
            Some("red"),
            &budget,
            PromptTemplate::WithoutImage,
            AssembleMode::Train,
            4,
        )
        .unwrap();
        // layout: question: square answer: red <eos>
        let (targets, mask) = s.shifted_targets();
        assert_eq!(s.len(), 5);
        assert_eq!(mask, vec![false, false, true, true, false]);
        assert_eq!(targets[2], tok.id("red").unwrap() as usize);
        assert_eq!(targets[3], EOS as usize);
    }

    #[test]
    fn padding_neutrality_logits_match_at_real_positions() {
        let model = TransformerLM::init(&ModelConfig {
            n_layers: 2,
            n_heads: 2,
            embed_dim: 8,
            vocab_size: 16,
            max_positions: 32,
            ff_mult: 2,
            seed: 4,
        })
        .unwrap();
        let mapper = Mapper::init(&MapperConfig::new(2, 8, 5)).unwrap();
        let tok = toy_tokenizer();
        let budget = LengthBudget::new(4, 4).unwrap();
        let mut sample = assemble_prompt(
            &tok,
            "square red",
            Some(&feat(0.2)),
            Some("yes"),
            &budget,
            PromptTemplate::Regular,
            AssembleMode::Train,
            2,
        )
        .unwrap();
        // clamp ids into the toy vocab of 16
        for id in sample.ids.iter_mut() {
            *id %= 16;
        }
        for slot in sample.slots.iter_mut() {
            if let Slot::Token(id) = slot {
                *id %= 16;
            }
        }

        let run = |s: &EncodedSample| -> Vec<f64> {
            let mut g = Graph::new();
            let emb = s.embed_on(&mut g, &model, &mapper).unwrap();
            let kv = s.key_valid();
            let extras = crate::model::AttentionExtras {
                key_valid: Some(&kv),
                ..Default::default()
            };
            let logits = model.forward_on(&mut g, emb, &extras, None).unwrap();
            g.data(logits).to_vec()
        };
        let plain = run(&sample);
        let real = sample.real_len;
        let mut padded = vec![sample.clone(), sample.clone()];
        // make the second longer so the first gets padding
        padded[1].push_token(1);
        padded[1].push_token(1);
        pad_batch(&mut padded).unwrap();
        let with_pad = run(&padded[0]);
        let v = 16;
        for t in 0..real {
            for c in 0..v {
                let diff = (plain[t * v + c] - with_pad[t * v + c]).abs();
                assert!(diff < 1e-10, "pos {t} col {c} differs by {diff}");
            }
        }
    }
}
