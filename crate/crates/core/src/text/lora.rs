//! Low-rank adapters on the text encoder's linear layers.

use rand::Rng;

use super::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::params::{gaussian, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Std of the Gaussian initialization of the down-projection `A`.
pub const LORA_A_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterSet {
    rank: usize,
    scale: f64,
    targets: Vec<String>,
    params: ParamStore,
}

impl LoraAdapterSet {
    /// Rebuilds a set from stored factors named `{path}.lora_a` / `{path}.lora_b`.
    pub fn from_params(rank: usize, scale: f64, params: ParamStore) -> Result<Self> {
        let mut targets = Vec::new();
        for name in params.names() {
            if let Some(path) = name.strip_suffix(".lora_a") {
                let a = params.expect(name);
                let b = params
                    .get(&format!("{path}.lora_b"))
                    .ok_or_else(|| Error::config(format!("adapter `{path}` has no B factor")))?;
                if a.rows() != rank || b.cols() != rank {
                    return Err(Error::config(format!("adapter `{path}` does not have rank {rank}")));
                }
                targets.push(path.to_owned());
            } else if !name.ends_with(".lora_b") {
                return Err(Error::config(format!("unexpected adapter tensor `{name}`")));
            }
        }
        if targets.len() * 2 != params.len() {
            return Err(Error::config("adapter factors are not paired"));
        }
        Ok(Self {
            rank,
            scale,
            targets,
            params,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// `scale·B·A` for one target, shaped like the layer weight.
    pub fn delta(&self, path: &str) -> Option<Tensor> {
        let a = self.params.get(&format!("{path}.lora_a"))?;
        let b = self.params.get(&format!("{path}.lora_b"))?;
        let mut out = Tensor::zeros(b.rows(), a.cols());
        gemm(false, b, false, a, self.scale, &mut out);
        Some(out)
    }
}

/// The default targets: every attention projection and both MLP layers.
pub fn default_targets(encoder: &TextEncoder) -> Vec<String> {
    encoder.linear_paths()
}

/// Allocates rank-`rank` factors on `targets`; `alpha / rank` is the scale.
pub fn inject_lora(
    encoder: &TextEncoder,
    rank: usize,
    alpha: f64,
    targets: &[String],
    rng: &mut impl Rng,
) -> Result<LoraAdapterSet> {
    if rank == 0 {
        return Err(Error::config("lora rank must be positive"));
    }
    let mut params = ParamStore::new();
    for path in targets {
        let w = encoder
            .params()
            .get(&format!("{path}.weight"))
            .filter(|_| encoder.params().contains(&format!("{path}.bias")))
            .ok_or_else(|| Error::config(format!("lora target `{path}` is not a linear layer")))?;
        let (d_out, d_in) = w.shape();
        params.insert(format!("{path}.lora_a"), gaussian(rng, rank, d_in, LORA_A_STD));
        params.insert(format!("{path}.lora_b"), Tensor::zeros(d_out, rank));
    }
    LoraAdapterSet::from_params(rank, alpha / rank as f64, params)
}

/// Copy of `encoder` with `W ← W + scale·B·A` folded into every target.
pub fn merge_lora(encoder: &TextEncoder, adapters: &LoraAdapterSet) -> Result<TextEncoder> {
    if encoder.is_merged() {
        return Err(Error::AlreadyMerged);
    }
    let mut out = encoder.clone();
    for path in adapters.targets() {
        let name = format!("{path}.weight");
        let w = out
            .params_mut()
            .get_mut(&name)
            .ok_or_else(|| Error::config(format!("adapter target `{path}` does not belong to this encoder")))?;
        let a = adapters.params().expect(&format!("{path}.lora_a"));
        let b = adapters.params().expect(&format!("{path}.lora_b"));
        if (b.rows(), a.cols()) != w.shape() {
            return Err(Error::config(format!("adapter `{path}` does not match layer shape")));
        }
        gemm(false, b, false, a, adapters.scale(), w);
    }
    out.set_merged();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::text::{EncoderConfig, Vocabulary};

    fn encoder(width: usize, layers: usize) -> TextEncoder {
        let vocab = Vocabulary::from_corpus_words(["a", "photo", "of", "dog", "cat", "red"]).unwrap();
        let cfg = EncoderConfig {
            width,
            layers,
            heads: 2,
            max_len: 8,
            mlp_ratio: 2,
        };
        TextEncoder::new(cfg, vocab, &mut rng::stream(3, 0)).unwrap()
    }

    #[test]
    fn default_targets_cover_six_layers_per_block() {
        let e = encoder(8, 3);
        assert_eq!(default_targets(&e).len(), 18);
    }

    #[test]
    fn factor_shapes_follow_rank() {
        let e = encoder(64, 1);
        let set = inject_lora(&e, 4, 4.0, &["block0.attn.q".to_owned()], &mut rng::stream(0, 0)).unwrap();
        assert_eq!(set.params().expect("block0.attn.q.lora_a").shape(), (4, 64));
        assert_eq!(set.params().expect("block0.attn.q.lora_b").shape(), (64, 4));
        assert_eq!(set.scale(), 1.0);
    }

    #[test]
    fn unresolvable_target_is_config_error() {
        let e = encoder(8, 1);
        let r = inject_lora(&e, 4, 4.0, &["block9.attn.q".to_owned()], &mut rng::stream(0, 0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        let e = encoder(8, 2);
        let targets = default_targets(&e);
        let set = inject_lora(&e, 4, 4.0, &targets, &mut rng::stream(0, 0)).unwrap();
        let mut expected = 0;
        for p in &targets {
            let w = e.params().expect(&format!("{p}.weight"));
            expected += 4 * (w.rows() + w.cols());
        }
        assert_eq!(set.num_params(), expected);
    }

    #[test]
    fn zero_b_merge_is_bitwise_identity() {
        let e = encoder(8, 1);
        let set = inject_lora(&e, 4, 4.0, &default_targets(&e), &mut rng::stream(0, 0)).unwrap();
        let m = merge_lora(&e, &set).unwrap();
        assert_eq!(m.params(), e.params());
        assert!(matches!(merge_lora(&m, &set), Err(Error::AlreadyMerged)));
    }

    #[test]
    fn empty_target_list_matches_frozen() {
        let e = encoder(8, 1);
        let set = inject_lora(&e, 4, 4.0, &[], &mut rng::stream(0, 0)).unwrap();
        let p = e.tokenize("a red dog").unwrap();
        assert_eq!(e.encode(Some(&set), &p).unwrap(), e.encode(None, &p).unwrap());
    }
}
