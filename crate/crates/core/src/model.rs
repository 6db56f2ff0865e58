//! The base text-to-image model (frozen encoder + denoiser) and its
//! full-weight snapshot format.

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::persistence::{Container, ContainerKind, DType};
use crate::rng;
use crate::text::{EncoderConfig, TextEncoder, Vocabulary};
use crate::world;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DENOISER_PREFIX: &str = "denoiser.";

/// Words of the augmentation initializers and prompt templates.
const EXTRA_WORDS: [&str; 14] = [
    "flip", "zoom", "out", "crop", "gray", "bright", "dark", "hole", "grid", "with", "background", "picture",
    "image", "an",
];

/// The bundled vocabulary: every caption word of the sprite world plus the
/// words used to initialize augmentation tokens.
pub fn default_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = world::caption_words();
    words.extend(EXTRA_WORDS);
    let mut seen = std::collections::HashSet::new();
    words.retain(|w| seen.insert(*w));
    Vocabulary::from_corpus_words(words).expect("bundled vocabulary is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub encoder: TextEncoder,
    pub denoiser: Denoiser,
}

impl BaseModel {
    /// Randomly initialized model; `denoiser.cond_dim` follows the encoder width.
    pub fn new(enc: EncoderConfig, mut den: DenoiserConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        den.cond_dim = enc.width;
        let encoder = TextEncoder::new(enc, vocab, &mut rng::stream(seed, 0x0e4c))?;
        let denoiser = Denoiser::new(den, &mut rng::stream(seed, 0xde40))?;
        Ok(Self { encoder, denoiser })
    }

    /// All weights as one f64 snapshot. Registered tokens are not included.
    pub fn to_snapshot(&self, config_digest: &str) -> Container {
        snapshot(&self.encoder, self.encoder.params(), self.denoiser.params(), self.denoiser.config(), config_digest)
    }

    pub fn from_snapshot(c: &Container) -> Result<Self> {
        c.expect_kind(ContainerKind::Snapshot)?;
        let meta = |k: &str| {
            c.meta(k)
                .ok_or_else(|| Error::config(format!("snapshot metadata lacks `{k}`")))
        };
        let enc_cfg: EncoderConfig = serde_json::from_str(meta("encoder_config")?)
            .map_err(|e| Error::config(format!("bad encoder_config: {e}")))?;
        let den_cfg: DenoiserConfig = serde_json::from_str(meta("denoiser_config")?)
            .map_err(|e| Error::config(format!("bad denoiser_config: {e}")))?;
        let vocab = Vocabulary::parse(meta("vocab")?)?;
        let (enc, den) = split_snapshot(&c.tensors);
        Ok(Self {
            encoder: TextEncoder::from_parts(enc_cfg, vocab, enc)?,
            denoiser: Denoiser::from_parts(den_cfg, den)?,
        })
    }
}

/// Snapshot of explicit encoder and denoiser weights (used for before/after
/// comparisons where the weights differ from a model's own).
pub fn snapshot(
    encoder: &TextEncoder,
    encoder_params: &ParamStore,
    denoiser_params: &ParamStore,
    denoiser_config: &DenoiserConfig,
    config_digest: &str,
) -> Container {
    let mut c = Container::new(ContainerKind::Snapshot, DType::F64, config_digest);
    c.metadata.insert(
        "encoder_config".into(),
        serde_json::to_string(encoder.config()).expect("config serializes"),
    );
    c.metadata.insert(
        "denoiser_config".into(),
        serde_json::to_string(denoiser_config).expect("config serializes"),
    );
    c.metadata.insert("vocab".into(), encoder.vocab().to_text());
    for (n, t) in encoder_params.iter() {
        c.tensors.insert(format!("{ENCODER_PREFIX}{n}"), t.clone());
    }
    for (n, t) in denoiser_params.iter() {
        c.tensors.insert(format!("{DENOISER_PREFIX}{n}"), t.clone());
    }
    c
}

fn split_snapshot(all: &ParamStore) -> (ParamStore, ParamStore) {
    let mut enc = ParamStore::new();
    let mut den = ParamStore::new();
    for (n, t) in all.iter() {
        if let Some(rest) = n.strip_prefix(ENCODER_PREFIX) {
            enc.insert(rest, t.clone());
        } else if let Some(rest) = n.strip_prefix(DENOISER_PREFIX) {
            den.insert(rest, t.clone());
        }
    }
    (enc, den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BaseModel {
        let enc = EncoderConfig {
            width: 8,
            layers: 1,
            heads: 2,
            max_len: 12,
            mlp_ratio: 2,
        };
        let den = DenoiserConfig {
            image_size: 8,
            patch: 4,
            width: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            ..Default::default()
        };
        BaseModel::new(enc, den, default_vocabulary(), 1).unwrap()
    }

    #[test]
    fn snapshot_roundtrip() {
        let m = tiny();
        let bytes = m.to_snapshot("d").to_bytes();
        let back = BaseModel::from_snapshot(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn vocabulary_holds_initializer_words() {
        let v = default_vocabulary();
        for spec in crate::augment::default_augmentation_set() {
            for var in &spec.variants {
                for w in var.init_words.split(' ') {
                    assert!(v.id(w).is_some(), "{w}");
                }
            }
        }
        for class in world::Class::ALL {
            assert!(v.id(class.word()).is_some());
        }
    }
}
