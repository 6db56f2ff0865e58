//! Pre-LN transformer text encoder over word tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lora::LoraAdapterSet;
use super::vocab::{self, TokenKind, TokenRegistry, TokenizedPrompt, Vocabulary};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, LoraBinding, INIT_STD};
use crate::params::{gaussian, Binder, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 2,
            heads: 4,
            max_len: 16,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.layers == 0 || self.max_len == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Name of the learned-token table inside [`TextEncoder::learned`].
pub const LEARNED_TABLE: &str = "tokens";

pub const ATTN_PROJECTIONS: [&str; 4] = ["q", "k", "v", "out"];
pub const MLP_LAYERS: [&str; 2] = ["fc1", "fc2"];

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    config: EncoderConfig,
    vocab: Vocabulary,
    registry: TokenRegistry,
    params: ParamStore,
    learned: ParamStore,
    merged: bool,
}

/// Parameters of one encoder lifted into a graph.
pub struct EncoderBinding<'a> {
    pub base: Binder<'a>,
    pub learned: Binder<'a>,
    pub lora: Option<LoraBinding<'a>>,
}

impl TextEncoder {
    pub fn new(config: EncoderConfig, vocab: Vocabulary, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut p = ParamStore::new();
        p.insert("embed", gaussian(rng, vocab.len(), d, INIT_STD));
        p.insert("pos", gaussian(rng, config.max_len, d, INIT_STD));
        for i in 0..config.layers {
            nn::init_layer_norm(&mut p, &format!("block{i}.ln1"), d);
            for proj in ATTN_PROJECTIONS {
                nn::init_linear(&mut p, rng, &format!("block{i}.attn.{proj}"), d, d);
            }
            nn::init_layer_norm(&mut p, &format!("block{i}.ln2"), d);
            let hidden = d * config.mlp_ratio;
            nn::init_linear(&mut p, rng, &format!("block{i}.mlp.fc1"), d, hidden);
            nn::init_linear(&mut p, rng, &format!("block{i}.mlp.fc2"), hidden, d);
        }
        nn::init_layer_norm(&mut p, "final_ln", d);
        Self::from_parts(config, vocab, p)
    }

    /// Reassembles an encoder from stored base weights (no learned tokens).
    pub fn from_parts(config: EncoderConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let expect = |name: &str, shape: (usize, usize)| -> Result<()> {
            match params.get(name) {
                Some(t) if t.shape() == shape => Ok(()),
                Some(t) => Err(Error::config(format!(
                    "encoder parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                ))),
                None => Err(Error::config(format!("encoder parameter `{name}` missing"))),
            }
        };
        expect("embed", (vocab.len(), d))?;
        expect("pos", (config.max_len, d))?;
        for i in 0..config.layers {
            for proj in ATTN_PROJECTIONS {
                expect(&format!("block{i}.attn.{proj}.weight"), (d, d))?;
            }
            let hidden = d * config.mlp_ratio;
            expect(&format!("block{i}.mlp.fc1.weight"), (hidden, d))?;
            expect(&format!("block{i}.mlp.fc2.weight"), (d, hidden))?;
        }
        let registry = TokenRegistry::new(vocab.len());
        let mut learned = ParamStore::new();
        learned.insert(LEARNED_TABLE, Tensor::zeros(0, d));
        Ok(Self {
            config,
            vocab,
            registry,
            params,
            learned,
            merged: false,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn registry(&self) -> &TokenRegistry {
        &self.registry
    }

    /// Frozen base weights.
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Learned V\*/A\* embeddings, one row per registered token.
    pub fn learned(&self) -> &ParamStore {
        &self.learned
    }

    pub fn learned_mut(&mut self) -> &mut ParamStore {
        &mut self.learned
    }

    pub fn learned_table(&self) -> &Tensor {
        self.learned.expect(LEARNED_TABLE)
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub(crate) fn set_merged(&mut self) {
        self.merged = true;
    }

    /// Embedding-table size including registered tokens.
    pub fn table_len(&self) -> usize {
        self.vocab.len() + self.registry.len()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenizedPrompt> {
        vocab::tokenize(text, &self.vocab, &self.registry, self.config.max_len)
    }

    pub fn detokenize(&self, prompt: &TokenizedPrompt) -> String {
        vocab::detokenize(prompt, &self.vocab, &self.registry)
    }

    /// Current embedding row of any id (base or learned).
    pub fn embedding_row(&self, id: usize) -> Option<&[f64]> {
        let nb = self.vocab.len();
        if id < nb {
            Some(self.params.expect("embed").row(id))
        } else if id < self.table_len() {
            Some(self.learned_table().row(id - nb))
        } else {
            None
        }
    }

    fn word_embedding(&self, word: &str) -> Result<Vec<f64>> {
        let id = self
            .vocab
            .id(word)
            .ok_or_else(|| Error::config(format!("initializer word `{word}` is not in the vocabulary")))?;
        Ok(self.params.expect("embed").row(id).to_vec())
    }

    /// Registers a token with an explicit embedding row.
    pub fn register_token(&mut self, literal: String, init_word: String, kind: TokenKind, row: &[f64]) -> Result<usize> {
        if row.len() != self.config.width {
            return Err(Error::arg(format!(
                "token embedding has width {}, encoder width is {}",
                row.len(),
                self.config.width
            )));
        }
        let id = self.registry.push(literal, init_word, kind)?;
        let table = self.learned.expect(LEARNED_TABLE);
        let mut data = table.data().to_vec();
        data.extend_from_slice(row);
        let n = table.rows() + 1;
        self.learned
            .insert(LEARNED_TABLE, Tensor::from_vec(n, self.config.width, data));
        Ok(id)
    }

    /// Adds a V\* token whose embedding starts as a copy of `init_word`'s.
    pub fn register_subject_token(&mut self, init_word: &str) -> Result<usize> {
        let row = self.word_embedding(init_word)?;
        let literal = self.registry.next_subject_literal();
        self.register_token(literal, init_word.to_owned(), TokenKind::Subject, &row)
    }

    /// Adds `count` A\* tokens for `group`, initialized from the words of
    /// `init_phrase` (cycled when the phrase is shorter than `count`).
    pub fn register_aug_group(&mut self, group: &str, init_phrase: &str, count: usize) -> Result<Vec<usize>> {
        let words: Vec<&str> = init_phrase.split_whitespace().collect();
        if words.is_empty() || count == 0 {
            return Err(Error::config(format!("augmentation group `{group}` needs words and a positive count")));
        }
        let rows = words
            .iter()
            .map(|w| self.word_embedding(w))
            .collect::<Result<Vec<_>>>()?;
        (0..count)
            .map(|k| {
                let i = k % words.len();
                self.register_token(
                    vocab::aug_literal(group, k),
                    words[i].to_owned(),
                    TokenKind::Augmentation {
                        group: group.to_owned(),
                        index: k,
                    },
                    &rows[i],
                )
            })
            .collect()
    }

    /// Paths of every linear layer, e.g. `block0.attn.q`.
    pub fn linear_paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.config.layers {
            out.extend(ATTN_PROJECTIONS.iter().map(|p| format!("block{i}.attn.{p}")));
            out.extend(MLP_LAYERS.iter().map(|p| format!("block{i}.mlp.{p}")));
        }
        out
    }

    pub fn bind<'a>(
        &'a self,
        base_trainable: bool,
        learned_trainable: bool,
        adapters: Option<(&'a LoraAdapterSet, bool)>,
    ) -> EncoderBinding<'a> {
        EncoderBinding {
            base: Binder::new(&self.params, base_trainable),
            learned: Binder::new(&self.learned, learned_trainable),
            lora: adapters.map(|(a, trainable)| LoraBinding {
                params: Binder::new(a.params(), trainable),
                scale: a.scale(),
            }),
        }
    }

    /// Records the forward pass of `prompt`, returning its `(len, width)`
    /// embedding sequence.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, b: &mut EncoderBinding<'a>, prompt: &TokenizedPrompt) -> Result<Var> {
        let ids = &prompt.ids;
        if ids.is_empty() {
            return Err(Error::arg("cannot encode an empty prompt"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::arg(format!(
                "prompt of {} tokens exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&id| id >= self.table_len()) {
            return Err(Error::arg(format!(
                "token id {bad} outside embedding table of size {}",
                self.table_len()
            )));
        }
        let embed = b.base.var(g, "embed");
        let learned = (!self.registry.is_empty()).then(|| b.learned.var(g, LEARNED_TABLE));
        let mut h = g.gather(embed, learned, ids);
        let pos = b.base.var(g, "pos");
        let pos = g.slice_rows(pos, 0, ids.len());
        h = g.add(h, pos);
        for i in 0..self.config.layers {
            let x = nn::layer_norm(g, &mut b.base, &format!("block{i}.ln1"), h);
            let q = nn::linear(g, &mut b.base, b.lora.as_mut(), &format!("block{i}.attn.q"), x);
            let k = nn::linear(g, &mut b.base, b.lora.as_mut(), &format!("block{i}.attn.k"), x);
            let v = nn::linear(g, &mut b.base, b.lora.as_mut(), &format!("block{i}.attn.v"), x);
            let (a, _) = nn::attention(g, q, k, v, self.config.heads);
            let o = nn::linear(g, &mut b.base, b.lora.as_mut(), &format!("block{i}.attn.out"), a);
            h = g.add(h, o);
            let x = nn::layer_norm(g, &mut b.base, &format!("block{i}.ln2"), h);
            let m = nn::linear(g, &mut b.base, b.lora.as_mut(), &format!("block{i}.mlp.fc1"), x);
            let m = g.quick_gelu(m);
            let m = nn::linear(g, &mut b.base, b.lora.as_mut(), &format!("block{i}.mlp.fc2"), m);
            h = g.add(h, m);
        }
        Ok(nn::layer_norm(g, &mut b.base, "final_ln", h))
    }

    /// Inference-only encoding.
    pub fn encode(&self, adapters: Option<&LoraAdapterSet>, prompt: &TokenizedPrompt) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = self.bind(false, false, adapters.map(|a| (a, false)));
        let out = self.forward(&mut g, &mut b, prompt)?;
        Ok(g.value(out).clone())
    }

    pub fn encode_text(&self, adapters: Option<&LoraAdapterSet>, text: &str) -> Result<Tensor> {
        self.encode(adapters, &self.tokenize(text)?)
    }

    /// Digest of the architecture and fixed vocabulary, independent of weights.
    pub fn arch_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.vocab.to_text().as_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    pub(crate) fn tiny() -> TextEncoder {
        let vocab = Vocabulary::from_corpus_words(["a", "photo", "of", "dog", "cat", "on", "the", "left"]).unwrap();
        let cfg = EncoderConfig {
            width: 8,
            layers: 1,
            heads: 2,
            max_len: 8,
            mlp_ratio: 2,
        };
        TextEncoder::new(cfg, vocab, &mut rng::stream(1, 0)).unwrap()
    }

    #[test]
    fn output_shape_is_len_by_width() {
        let e = tiny();
        let out = e.encode_text(None, "a photo of dog").unwrap();
        assert_eq!(out.shape(), (4, 8));
    }

    #[test]
    fn subject_token_copies_initializer_embedding() {
        let mut e = tiny();
        let id = e.register_subject_token("dog").unwrap();
        let dog = e.vocab().id("dog").unwrap();
        assert_eq!(e.embedding_row(id).unwrap(), e.embedding_row(dog).unwrap());
        let id2 = e.register_subject_token("cat").unwrap();
        assert_ne!(id, id2);
        assert!(matches!(e.register_subject_token("zebra"), Err(Error::Config(_))));
    }

    #[test]
    fn aug_group_initializes_from_each_word() {
        let mut e = tiny();
        let ids = e.register_aug_group("shift_left", "on the left", 3).unwrap();
        assert_eq!(ids.len(), 3);
        for (id, w) in ids.iter().zip(["on", "the", "left"]) {
            let wid = e.vocab().id(w).unwrap();
            assert_eq!(e.embedding_row(*id).unwrap(), e.embedding_row(wid).unwrap());
        }
        assert_eq!(e.registry().aug_group("shift_left"), ids);
    }

    #[test]
    fn out_of_range_ids_are_argument_errors() {
        let e = tiny();
        let p = TokenizedPrompt {
            ids: vec![0, 999],
            learnable_mask: vec![false, false],
            truncated: false,
        };
        assert!(matches!(e.encode(None, &p), Err(Error::Argument(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let e = tiny();
        let a = e.encode_text(None, "a dog on the left").unwrap();
        let b = e.encode_text(None, "a dog on the left").unwrap();
        assert_eq!(a, b);
    }
}
