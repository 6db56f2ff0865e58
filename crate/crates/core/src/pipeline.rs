//! Inference-time assembly: a personalized encoder plus the denoiser,
//! generating images from prompts that use the subject token.

use crate::augment::contains_aug_placeholder;
use crate::denoiser::Denoiser;
use crate::diffusion::{generate, NoiseSchedule};
use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::model::BaseModel;
use crate::persistence::{apply_checkpoint, Container};
use crate::text::{normalize, LoraAdapterSet, TextEncoder, SUBJECT_LITERAL};
use crate::trainer::TrainOutcome;

/// Rejects prompts carrying augmentation tokens unless explicitly allowed.
pub fn check_prompt_purity(prompt: &str, allow_aug_tokens: bool) -> Result<()> {
    if contains_aug_placeholder(prompt) && !allow_aug_tokens {
        return Err(Error::arg(format!(
            "prompt `{prompt}` contains an augmentation token; these only absorb training \
             transforms and would reintroduce them into the output (pass the explicit override to ablate)"
        )));
    }
    Ok(())
}

pub fn mentions_subject(prompt: &str) -> bool {
    normalize(prompt)
        .split(' ')
        .any(|w| w.strip_prefix(SUBJECT_LITERAL).is_some_and(|r| r.chars().all(|c| c.is_ascii_digit())))
}

#[derive(Debug, Clone)]
pub struct Personalized<'m> {
    pub encoder: TextEncoder,
    pub adapters: Option<LoraAdapterSet>,
    pub denoiser: &'m Denoiser,
}

impl<'m> Personalized<'m> {
    /// Assembles the base model with a personalization checkpoint.
    pub fn from_checkpoint(base: &'m BaseModel, ckpt: &Container) -> Result<Self> {
        let (encoder, adapters) = apply_checkpoint(&base.encoder, ckpt)?;
        let adapters = (!adapters.params().is_empty()).then_some(adapters);
        Ok(Self {
            encoder,
            adapters,
            denoiser: &base.denoiser,
        })
    }

    /// The live result of a training run.
    pub fn from_outcome(base: &'m BaseModel, out: &'m TrainOutcome) -> Self {
        Self {
            encoder: out.encoder.clone(),
            adapters: out.adapters.clone(),
            denoiser: out.denoiser(base),
        }
    }

    pub fn condition(&self, prompt: &str) -> Result<crate::Tensor> {
        self.encoder.encode_text(self.adapters.as_ref(), prompt)
    }

    pub fn generate(
        &self,
        prompt: &str,
        schedule: &NoiseSchedule,
        seed: u64,
        n: usize,
        allow_aug_tokens: bool,
    ) -> Result<Vec<ImageTensor>> {
        check_prompt_purity(prompt, allow_aug_tokens)?;
        let cond = self.condition(prompt)?;
        generate(self.denoiser, &cond, schedule, seed, n)
    }
}
