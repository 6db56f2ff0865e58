//! Word-level vocabulary, learnable-token registry and tokenizer.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Literal of the first subject token; later ones get a numeric suffix.
pub const SUBJECT_LITERAL: &str = "v*";

/// Fixed word list; line index in the serialized form is the id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from corpus words; the reserved entries are
    /// placed first automatically.
    pub fn from_corpus_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let all = RESERVED
            .iter()
            .map(|s| (*s).to_owned())
            .chain(words.into_iter().map(|w| w.as_ref().to_owned()));
        Self::from_lines(all)
    }

    fn from_lines(lines: impl IntoIterator<Item = String>) -> Result<Self> {
        let words: Vec<String> = lines.into_iter().collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if words.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::config(format!("vocabulary line {i} must be `{r}`")));
            }
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) || w.to_lowercase() != *w {
                return Err(Error::config(format!("invalid vocabulary word {w:?} on line {i}")));
            }
            if i >= RESERVED.len() && is_placeholder(w) {
                return Err(Error::config(format!("vocabulary word {w:?} collides with placeholder syntax")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Parses the one-word-per-line UTF-8 form.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_lines(text.lines().map(|l| l.trim().to_owned()).filter(|l| !l.is_empty()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Whether a normalized word uses learnable-token syntax (`v*`, `v*2`, `<aug:…>`).
pub fn is_placeholder(word: &str) -> bool {
    word.starts_with("<aug:")
        || word
            .strip_prefix(SUBJECT_LITERAL)
            .is_some_and(|rest| rest.chars().all(|c| c.is_ascii_digit()))
}

pub fn aug_literal(tag: &str, k: usize) -> String {
    format!("<aug:{tag}:{k}>")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenKind {
    Subject,
    Augmentation { group: String, index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnedToken {
    pub literal: String,
    pub id: usize,
    pub init_word: String,
    #[serde(flatten)]
    pub kind: TokenKind,
}

/// Learnable tokens (V\* and A\*), numbered after the fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRegistry {
    base_len: usize,
    tokens: Vec<LearnedToken>,
}

impl TokenRegistry {
    pub fn new(base_len: usize) -> Self {
        Self {
            base_len,
            tokens: Vec::new(),
        }
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[LearnedToken] {
        &self.tokens
    }

    pub(crate) fn push(&mut self, literal: String, init_word: String, kind: TokenKind) -> Result<usize> {
        if self.lookup(&literal).is_some() {
            return Err(Error::config(format!("token `{literal}` already registered")));
        }
        let id = self.base_len + self.tokens.len();
        self.tokens.push(LearnedToken {
            literal,
            id,
            init_word,
            kind,
        });
        Ok(id)
    }

    pub fn lookup(&self, literal: &str) -> Option<&LearnedToken> {
        self.tokens.iter().find(|t| t.literal == literal)
    }

    pub fn by_id(&self, id: usize) -> Option<&LearnedToken> {
        id.checked_sub(self.base_len).and_then(|i| self.tokens.get(i))
    }

    pub fn subject_tokens(&self) -> impl Iterator<Item = &LearnedToken> {
        self.tokens.iter().filter(|t| t.kind == TokenKind::Subject)
    }

    /// Ids of an augmentation group, in placeholder order.
    pub fn aug_group(&self, group: &str) -> Vec<usize> {
        let mut v: Vec<(usize, usize)> = self
            .tokens
            .iter()
            .filter_map(|t| match &t.kind {
                TokenKind::Augmentation { group: g, index } if g == group => Some((*index, t.id)),
                _ => None,
            })
            .collect();
        v.sort_unstable();
        v.into_iter().map(|(_, id)| id).collect()
    }

    pub fn next_subject_literal(&self) -> String {
        match self.subject_tokens().count() {
            0 => SUBJECT_LITERAL.to_owned(),
            n => format!("{SUBJECT_LITERAL}{}", n + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub ids: Vec<usize>,
    /// True at V\*/A\* positions.
    pub learnable_mask: Vec<bool>,
    /// Set when the prompt exceeded the maximum length and was cut.
    pub truncated: bool,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercases and collapses whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn tokenize(text: &str, vocab: &Vocabulary, registry: &TokenRegistry, max_len: usize) -> Result<TokenizedPrompt> {
    let norm = normalize(text);
    if norm.is_empty() {
        return Err(Error::arg("prompt is empty"));
    }
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for word in norm.split(' ') {
        if let Some(t) = registry.lookup(word) {
            ids.push(t.id);
            mask.push(true);
        } else if is_placeholder(word) {
            return Err(Error::UnknownToken(word.to_owned()));
        } else {
            ids.push(vocab.id(word).unwrap_or(UNK));
            mask.push(false);
        }
    }
    let truncated = ids.len() > max_len;
    ids.truncate(max_len);
    mask.truncate(max_len);
    Ok(TokenizedPrompt {
        ids,
        learnable_mask: mask,
        truncated,
    })
}

pub fn detokenize(prompt: &TokenizedPrompt, vocab: &Vocabulary, registry: &TokenRegistry) -> String {
    prompt
        .ids
        .iter()
        .map(|&id| {
            registry
                .by_id(id)
                .map(|t| t.literal.as_str())
                .or_else(|| vocab.word(id))
                .unwrap_or(RESERVED[UNK])
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_corpus_words(["a", "photo", "of", "dog"]).unwrap()
    }

    #[test]
    fn subject_placeholder_is_masked() {
        let v = vocab();
        let mut r = TokenRegistry::new(v.len());
        let id = r.push("v*".into(), "dog".into(), TokenKind::Subject).unwrap();
        let p = tokenize("a photo of V*", &v, &r, 16).unwrap();
        assert_eq!(p.ids.len(), 4);
        assert_eq!(p.ids[3], id);
        assert_eq!(p.learnable_mask, vec![false, false, false, true]);
    }

    #[test]
    fn empty_prompt_is_an_argument_error() {
        let v = vocab();
        let r = TokenRegistry::new(v.len());
        assert!(matches!(tokenize("  \t ", &v, &r, 8), Err(Error::Argument(_))));
        assert!(matches!(tokenize("", &v, &r, 8), Err(Error::Argument(_))));
    }

    #[test]
    fn unregistered_placeholder_is_unknown_token() {
        let v = vocab();
        let r = TokenRegistry::new(v.len());
        assert!(matches!(tokenize("a photo of v*", &v, &r, 8), Err(Error::UnknownToken(_))));
        assert!(matches!(tokenize("<aug:vflip:0> dog", &v, &r, 8), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn unknown_words_map_to_unk_and_long_prompts_truncate() {
        let v = vocab();
        let r = TokenRegistry::new(v.len());
        let p = tokenize("a zebra of of of", &v, &r, 3).unwrap();
        assert_eq!(p.ids, vec![v.id("a").unwrap(), UNK, v.id("of").unwrap()]);
        assert!(p.truncated);
    }

    #[test]
    fn serialized_form_roundtrips() {
        let v = vocab();
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_missing_reserved() {
        assert!(Vocabulary::from_corpus_words(["a", "a"]).is_err());
        assert!(Vocabulary::parse("a\nb\n").is_err());
        assert!(Vocabulary::from_corpus_words(["v*"]).is_err());
    }

    #[test]
    fn registered_ids_follow_the_fixed_vocabulary() {
        let v = vocab();
        let mut r = TokenRegistry::new(v.len());
        let a = r.push("v*".into(), "dog".into(), TokenKind::Subject).unwrap();
        let b = r.push(r.next_subject_literal(), "dog".into(), TokenKind::Subject).unwrap();
        assert_eq!(a, v.len());
        assert_eq!(b, v.len() + 1);
        assert_eq!(r.by_id(b).unwrap().literal, "v*2");
        assert!(r.push("v*".into(), "dog".into(), TokenKind::Subject).is_err());
    }
}
