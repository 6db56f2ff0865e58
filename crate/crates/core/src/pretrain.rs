//! Joint pretraining of the base encoder and denoiser on sprite scenes.

use rand::Rng;

use crate::augment::{default_augmentation_set, transform_image};
use crate::diffusion::{gaussian_image, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::BaseModel;
use crate::objectives::{total_loss, LossInputs, NoisedSample, Trainable};
use crate::optim::{clip_global_norm, AdamState, AdamWConfig};
use crate::rng;
use crate::sampler::{SamplerMode, TimestepDistribution};
use crate::world::{Scene, CANVAS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Probability of keeping each optional caption attribute.
    pub caption_keep: f64,
    /// Probability of augmenting a scene and naming the augmentation in its caption.
    pub aug_prob: f64,
    pub sampler: SamplerMode,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch_size: 8,
            lr: 1e-3,
            warmup: 100,
            weight_decay: 0.01,
            clip_norm: 1.0,
            caption_keep: 0.9,
            aug_prob: 0.3,
            sampler: SamplerMode::SnrWeighted,
            seed: 0,
        }
    }
}

/// Learning rate after warmup, decaying linearly to 10% at the end.
fn schedule_lr(cfg: &PretrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps - cfg.warmup).max(1) as f64;
    let k = (step - cfg.warmup) as f64 / span;
    cfg.lr * (1.0 - 0.9 * k)
}

/// One caption/image training pair from the sprite world.
pub fn sample_pair(rng: &mut impl Rng, image_size: usize, caption_keep: f64, aug_prob: f64) -> Result<(crate::img::ImageTensor, String)> {
    if CANVAS % image_size != 0 {
        return Err(Error::config(format!("image size {image_size} does not divide the canvas {CANVAS}")));
    }
    let scene = Scene::random(rng);
    let mut img = scene.render().downsample(CANVAS / image_size)?;
    let mut caption = scene.caption_dropout(rng, caption_keep);
    if rng.gen_bool(aug_prob) {
        let specs = default_augmentation_set();
        let spec = &specs[rng.gen_range(0..specs.len())];
        let (out, tag) = transform_image(&img, spec, rng)?;
        let words = &spec.variant(&tag).expect("drawn variant exists").init_words;
        img = out;
        caption = if rng.gen_bool(0.5) {
            format!("{words} {caption}")
        } else {
            format!("{caption} {words}")
        };
    }
    Ok((img, caption))
}

/// Trains every weight of `model` on the denoising objective; `on_step`
/// receives each step's mean reconstruction loss.
pub fn pretrain(
    model: &mut BaseModel,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.warmup == 0 {
        return Err(Error::config("pretraining needs positive steps, batch size and warmup"));
    }
    let dist = TimestepDistribution::for_mode(cfg.sampler, schedule)?;
    let mut r = rng::stream(cfg.seed, 0x9e7a);
    let adam = AdamWConfig::default();
    let mut enc_opt = AdamState::default();
    let mut den_opt = AdamState::default();
    let den_cfg = *model.denoiser.config();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (img, caption) = sample_pair(&mut r, den_cfg.image_size, cfg.caption_keep, cfg.aug_prob)?;
            let prompt = model.encoder.tokenize(&caption)?;
            let t = dist.sample_one(&mut r);
            let eps = gaussian_image(&mut r, img.shape());
            batch.push(NoisedSample::new(&img, &eps, prompt, t, schedule, den_cfg.patch)?);
        }
        let inputs = LossInputs {
            batch: &batch,
            kp_prompts: &[],
            kp_targets: &[],
            lambda: 0.0,
        };
        let trainable = Trainable {
            encoder: true,
            denoiser: true,
            ..Default::default()
        };
        let (loss, mut grads) = total_loss(&model.encoder, None, &model.denoiser, &inputs, trainable)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                timesteps: batch.iter().map(|s| s.t).collect(),
                recon: loss.recon,
                kp: loss.kp,
            });
        }
        clip_global_norm(&mut [&mut grads.encoder, &mut grads.denoiser], cfg.clip_norm);
        let lr = schedule_lr(cfg, step);
        enc_opt.step(&adam, model.encoder.params_mut(), &grads.encoder, lr, cfg.weight_decay);
        den_opt.step(&adam, model.denoiser.params_mut(), &grads.denoiser, lr, cfg.weight_decay);
        on_step(step, loss.recon);
        losses.push(loss.recon);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_decay() {
        let cfg = PretrainConfig {
            steps: 110,
            warmup: 10,
            lr: 1.0,
            ..Default::default()
        };
        assert!((schedule_lr(&cfg, 0) - 0.1).abs() < 1e-12);
        assert!((schedule_lr(&cfg, 10) - 1.0).abs() < 1e-12);
        assert!((schedule_lr(&cfg, 110) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn pairs_match_image_size() {
        let mut r = rng::stream(0, 0);
        for _ in 0..30 {
            let (img, cap) = sample_pair(&mut r, 16, 0.7, 0.5).unwrap();
            assert_eq!(img.shape(), (3, 16, 16));
            assert!(cap.contains("a photo of a"));
        }
        assert!(sample_pair(&mut r, 12, 0.7, 0.5).is_err());
    }
}
