//! Tokenizer, text encoder and its low-rank adapters.

pub mod encoder;
pub mod lora;
pub mod vocab;

pub use encoder::{EncoderBinding, EncoderConfig, TextEncoder, LEARNED_TABLE};
pub use lora::{default_targets, inject_lora, merge_lora, LoraAdapterSet};
pub use vocab::{
    detokenize, is_placeholder, normalize, tokenize, LearnedToken, TokenKind, TokenRegistry, TokenizedPrompt,
    Vocabulary, SUBJECT_LITERAL,
};
