//! One-shot personalization loop and its ablation / comparison modes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{apply, default_augmentation_set, draw, register_aug_tokens, AugmentationSpec};
use crate::denoiser::Denoiser;
use crate::diffusion::{gaussian_image, NoiseSchedule};
use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::model::{self, BaseModel};
use crate::objectives::{total_loss, LossBreakdown, LossInputs, NoisedSample, RegPromptSet, Trainable};
use crate::optim::{clip_global_norm, AdamState, AdamWConfig};
use crate::params::ParamStore;
use crate::persistence::{self, Container, ContainerKind, DType};
use crate::rng::{self, RngState};
use crate::sampler::{SamplerMode, TimestepDistribution};
use crate::tensor::Tensor;
use crate::text::{default_targets, inject_lora, merge_lora, LoraAdapterSet, TextEncoder, TokenizedPrompt};

pub use crate::optim::linear_decay_lr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    TextEncoderOnly,
    FullFinetune,
    UnetOnly,
    NoAug,
    NoKpl,
    UniformT,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        Self::TextEncoderOnly,
        Self::FullFinetune,
        Self::UnetOnly,
        Self::NoAug,
        Self::NoKpl,
        Self::UniformT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::TextEncoderOnly => "text_encoder_only",
            Self::FullFinetune => "full_finetune",
            Self::UnetOnly => "unet_only",
            Self::NoAug => "no_aug",
            Self::NoKpl => "no_kpl",
            Self::UniformT => "uniform_t",
        }
    }

    /// Parameter sets updated in this mode.
    pub fn trainable(self) -> Trainable {
        match self {
            Self::FullFinetune => Trainable {
                encoder: true,
                tokens: true,
                adapters: false,
                denoiser: true,
            },
            Self::UnetOnly => Trainable {
                denoiser: true,
                ..Default::default()
            },
            _ => Trainable {
                tokens: true,
                adapters: true,
                ..Default::default()
            },
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown training mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_adapters: f64,
    pub lr_tokens: f64,
    /// Learning rate of base weights in the full / denoiser-only modes.
    pub lr_base: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lambda_kp: f64,
    pub kp_prompts: usize,
    pub sampler: SamplerMode,
    pub p_apply: f64,
    /// Insert A\* tokens for applied augmentations; off gives naive augmentation.
    pub aug_tokens: bool,
    pub augmentations: Vec<AugmentationSpec>,
    /// Prompt templates; `{}` marks where the subject token goes.
    pub templates: Vec<String>,
    /// Follow the subject token with the class word (`a photo of v* dog`).
    pub class_noun: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// `None` selects every attention projection and MLP layer.
    pub lora_targets: Option<Vec<String>>,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 250,
            batch_size: 8,
            lr_adapters: 5e-3,
            lr_tokens: 1e-2,
            lr_base: 1e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            lambda_kp: 0.1,
            kp_prompts: 4,
            sampler: SamplerMode::SnrWeighted,
            p_apply: 0.8,
            aug_tokens: true,
            augmentations: default_augmentation_set(),
            templates: vec!["a photo of {}".into(), "a photo of {} with background".into()],
            class_noun: false,
            lora_rank: 4,
            lora_alpha: 4.0,
            lora_targets: None,
            mode: TrainMode::TextEncoderOnly,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be at least 1"));
        }
        for (name, lr) in [
            ("lr_adapters", self.lr_adapters),
            ("lr_tokens", self.lr_tokens),
            ("lr_base", self.lr_base),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.lambda_kp >= 0.0) {
            return Err(Error::config("lambda_kp must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.p_apply) {
            return Err(Error::config("aug probability must lie in [0, 1]"));
        }
        if self.templates.is_empty() || self.templates.iter().any(|t| t.matches("{}").count() != 1) {
            return Err(Error::config("every prompt template needs exactly one `{}`"));
        }
        if self.lora_rank == 0 {
            return Err(Error::config("lora rank must be positive"));
        }
        Ok(())
    }

    /// Settings after the mode's ablation overrides.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        match self.mode {
            TrainMode::NoAug => c.p_apply = 0.0,
            TrainMode::NoKpl => c.lambda_kp = 0.0,
            TrainMode::UniformT => c.sampler = SamplerMode::Uniform,
            _ => {}
        }
        c
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub recon: f64,
    pub kp: f64,
    pub total: f64,
    pub lr_token: f64,
    pub t_drawn_mean: f64,
}

pub fn write_metrics_csv(rows: &[StepMetrics], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(crate::sampler::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Moving average over a trailing window of the recon loss.
pub fn recon_moving_average(rows: &[StepMetrics], window: usize) -> Vec<f64> {
    rows.windows(window)
        .map(|w| w.iter().map(|r| r.recon).sum::<f64>() / window as f64)
        .collect()
}

struct Streams {
    aug: ChaCha8Rng,
    timestep: ChaCha8Rng,
    noise: ChaCha8Rng,
    kp: ChaCha8Rng,
}

impl Streams {
    const NAMES: [&'static str; 4] = ["aug", "timestep", "noise", "kp"];

    fn new(seed: u64) -> Self {
        Self {
            aug: rng::stream(seed, 0xa0),
            timestep: rng::stream(seed, 0xa1),
            noise: rng::stream(seed, 0xa2),
            kp: rng::stream(seed, 0xa3),
        }
    }

    fn all(&self) -> [&ChaCha8Rng; 4] {
        [&self.aug, &self.timestep, &self.noise, &self.kp]
    }

    fn all_mut(&mut self) -> [&mut ChaCha8Rng; 4] {
        [&mut self.aug, &mut self.timestep, &mut self.noise, &mut self.kp]
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    /// Base encoder (possibly fine-tuned) with the learned tokens registered.
    pub encoder: TextEncoder,
    pub adapters: Option<LoraAdapterSet>,
    /// Present only when the mode updates the denoiser.
    pub denoiser: Option<Denoiser>,
    pub metrics: Vec<StepMetrics>,
}

impl TrainOutcome {
    pub fn denoiser<'a>(&'a self, base: &'a BaseModel) -> &'a Denoiser {
        self.denoiser.as_ref().unwrap_or(&base.denoiser)
    }

    /// Adapters and learned tokens as an f32 checkpoint.
    pub fn checkpoint(&self) -> Container {
        let empty;
        let adapters = match &self.adapters {
            Some(a) => a,
            None => {
                empty = LoraAdapterSet::from_params(self.config.lora_rank, 1.0, ParamStore::new())
                    .expect("empty adapter set");
                &empty
            }
        };
        let mut c = persistence::checkpoint_from(&self.encoder, adapters, &self.config.digest());
        c.metadata.insert("mode".into(), self.config.mode.name().into());
        c
    }

    /// Full snapshot of the effective weights: adapters are merged into the
    /// encoder so that the weight delta reflects their contribution.
    pub fn effective_snapshot(&self, base: &BaseModel) -> Result<Container> {
        let enc = match &self.adapters {
            Some(a) => merge_lora(&self.encoder, a)?,
            None => self.encoder.clone(),
        };
        let den = self.denoiser(base);
        Ok(model::snapshot(&enc, enc.params(), den.params(), den.config(), &self.config.digest()))
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    digest: String,
    base: &'a BaseModel,
    schedule: &'a NoiseSchedule,
    reg: &'a RegPromptSet,
    reference: ImageTensor,
    dist: TimestepDistribution,
    encoder: TextEncoder,
    adapters: Option<LoraAdapterSet>,
    denoiser: Option<Denoiser>,
    opt: BTreeMap<&'static str, AdamState>,
    streams: Streams,
    step: usize,
    metrics: Vec<StepMetrics>,
    frozen_cache: HashMap<String, (TokenizedPrompt, Tensor)>,
}

const GROUPS: [&str; 4] = ["adapters", "tokens", "encoder", "denoiser"];

impl<'a> Trainer<'a> {
    /// Sets up a run: registers V\* (and A\* when augmentations insert
    /// tokens) and attaches fresh adapters.
    pub fn new(
        cfg: &TrainConfig,
        base: &'a BaseModel,
        schedule: &'a NoiseSchedule,
        reference: &ImageTensor,
        class_word: &str,
        reg: &'a RegPromptSet,
    ) -> Result<Self> {
        cfg.validate()?;
        let digest = cfg.digest();
        let cfg = cfg.effective();
        if reference.shape() != crate::diffusion::NoisePredictor::image_shape(&base.denoiser) {
            return Err(Error::arg(format!(
                "reference image of shape {:?} does not match the model's {:?}",
                reference.shape(),
                crate::diffusion::NoisePredictor::image_shape(&base.denoiser)
            )));
        }
        let mut encoder = base.encoder.clone();
        encoder.register_subject_token(class_word)?;
        if cfg.p_apply > 0.0 && cfg.aug_tokens {
            for spec in &cfg.augmentations {
                register_aug_tokens(&mut encoder, spec)?;
            }
        }
        let trainable = cfg.mode.trainable();
        let adapters = if trainable.adapters {
            let targets = cfg.lora_targets.clone().unwrap_or_else(|| default_targets(&encoder));
            Some(inject_lora(
                &encoder,
                cfg.lora_rank,
                cfg.lora_alpha,
                &targets,
                &mut rng::stream(cfg.seed, 0x10a),
            )?)
        } else {
            None
        };
        let denoiser = trainable.denoiser.then(|| base.denoiser.clone());
        let dist = TimestepDistribution::for_mode(cfg.sampler, schedule)?;
        Ok(Self {
            streams: Streams::new(cfg.seed),
            cfg,
            digest,
            base,
            schedule,
            reg,
            reference: reference.clone(),
            dist,
            encoder,
            adapters,
            denoiser,
            opt: GROUPS.iter().map(|g| (*g, AdamState::default())).collect(),
            step: 0,
            metrics: Vec::new(),
            frozen_cache: HashMap::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn adapters(&self) -> Option<&LoraAdapterSet> {
        self.adapters.as_ref()
    }

    pub fn metrics(&self) -> &[StepMetrics] {
        &self.metrics
    }

    pub fn distribution(&self) -> &TimestepDistribution {
        &self.dist
    }

    /// Number of parameters the optimizer updates.
    pub fn trainable_params(&self) -> usize {
        let t = self.cfg.mode.trainable();
        let mut n = 0;
        if let (true, Some(a)) = (t.adapters, &self.adapters) {
            n += a.num_params();
        }
        if t.tokens {
            n += self.encoder.learned().numel();
        }
        if t.encoder {
            n += self.encoder.params().numel();
        }
        if t.denoiser {
            n += self.base.denoiser.params().numel();
        }
        n
    }

    fn denoiser(&self) -> &Denoiser {
        self.denoiser.as_ref().unwrap_or(&self.base.denoiser)
    }

    fn subject_prompt(&mut self) -> String {
        let i = self.streams.aug.gen_range(0..self.cfg.templates.len());
        let subject = if self.cfg.class_noun {
            let tok = self.encoder.registry().subject_tokens().next().expect("subject registered");
            format!("{} {}", tok.literal, tok.init_word)
        } else {
            crate::text::SUBJECT_LITERAL.to_owned()
        };
        self.cfg.templates[i].replace("{}", &subject)
    }

    fn frozen_target(&mut self, prompt: &str) -> Result<(TokenizedPrompt, Tensor)> {
        if let Some(hit) = self.frozen_cache.get(prompt) {
            return Ok(hit.clone());
        }
        let tok = self.base.encoder.tokenize(prompt)?;
        let emb = self.base.encoder.encode(None, &tok)?;
        // The online encoder tokenizes identically: plain captions never
        // contain registered tokens.
        let entry = (tok, emb);
        self.frozen_cache.insert(prompt.to_owned(), entry.clone());
        Ok(entry)
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepMetrics> {
        if self.is_done() {
            return Err(Error::arg("training already finished"));
        }
        let k = self.step;
        let shape = self.reference.shape();
        let patch = self.denoiser().config().patch;
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let prompt = self.subject_prompt();
            let spec = draw(&mut self.streams.aug, &self.cfg.augmentations, self.cfg.p_apply)?;
            let sample = apply(&self.reference, &prompt, spec, self.cfg.aug_tokens, &mut self.streams.aug)?;
            let tokens = self.encoder.tokenize(&sample.prompt)?;
            let t = self.dist.sample_one(&mut self.streams.timestep);
            let eps = gaussian_image(&mut self.streams.noise, shape);
            batch.push(NoisedSample::new(&sample.image, &eps, tokens, t, self.schedule, patch)?);
        }
        let mut kp_prompts = Vec::new();
        let mut kp_targets = Vec::new();
        if self.cfg.lambda_kp > 0.0 && self.cfg.kp_prompts > 0 {
            let drawn: Vec<String> = self
                .reg
                .sample(&mut self.streams.kp, self.cfg.kp_prompts)
                .into_iter()
                .map(str::to_owned)
                .collect();
            for p in drawn {
                let (tok, emb) = self.frozen_target(&p)?;
                kp_prompts.push(tok);
                kp_targets.push(emb);
            }
        }
        let inputs = LossInputs {
            batch: &batch,
            kp_prompts: &kp_prompts,
            kp_targets: &kp_targets,
            lambda: self.cfg.lambda_kp,
        };
        let trainable = self.cfg.mode.trainable();
        let (loss, mut grads) = total_loss(&self.encoder, self.adapters.as_ref(), self.denoiser(), &inputs, trainable)?;
        let timesteps: Vec<usize> = batch.iter().map(|s| s.t).collect();
        if !loss.is_finite() {
            return Err(nonfinite(k, timesteps, &loss));
        }
        let norm = clip_global_norm(
            &mut [&mut grads.adapters, &mut grads.tokens, &mut grads.encoder, &mut grads.denoiser],
            self.cfg.clip_norm,
        );
        if !norm.is_finite() {
            return Err(nonfinite(k, timesteps, &loss));
        }
        let lr_token = linear_decay_lr(self.cfg.lr_tokens, k, self.cfg.steps);
        let adam = AdamWConfig::default();
        let wd = self.cfg.weight_decay;
        if let Some(a) = self.adapters.as_mut().filter(|_| trainable.adapters) {
            self.opt
                .get_mut("adapters")
                .expect("group")
                .step(&adam, a.params_mut(), &grads.adapters, self.cfg.lr_adapters, wd);
        }
        if trainable.tokens {
            self.opt
                .get_mut("tokens")
                .expect("group")
                .step(&adam, self.encoder.learned_mut(), &grads.tokens, lr_token, 0.0);
        }
        if trainable.encoder {
            self.opt
                .get_mut("encoder")
                .expect("group")
                .step(&adam, self.encoder.params_mut(), &grads.encoder, self.cfg.lr_base, wd);
        }
        if let Some(d) = self.denoiser.as_mut().filter(|_| trainable.denoiser) {
            self.opt
                .get_mut("denoiser")
                .expect("group")
                .step(&adam, d.params_mut(), &grads.denoiser, self.cfg.lr_base, wd);
        }
        let row = StepMetrics {
            step: k,
            recon: loss.recon,
            kp: loss.kp,
            total: loss.total,
            lr_token,
            t_drawn_mean: timesteps.iter().sum::<usize>() as f64 / timesteps.len() as f64,
        };
        self.metrics.push(row);
        self.step += 1;
        Ok(row)
    }

    /// Runs the remaining steps and returns the outcome.
    pub fn run(mut self, mut on_step: impl FnMut(&StepMetrics)) -> Result<TrainOutcome> {
        while !self.is_done() {
            let m = self.step()?;
            on_step(&m);
        }
        Ok(self.finish())
    }

    /// Ends the run. Trained adapter factors and learned tokens are rounded
    /// to f32 so the live state equals what a checkpoint stores; untrained
    /// rows keep their initializer bits.
    pub fn finish(mut self) -> TrainOutcome {
        let round = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        let trainable = self.cfg.mode.trainable();
        if let Some(a) = self.adapters.as_mut().filter(|_| trainable.adapters) {
            a.params_mut().iter_mut().for_each(|(_, t)| round(t));
        }
        if trainable.tokens {
            self.encoder.learned_mut().iter_mut().for_each(|(_, t)| round(t));
        }
        TrainOutcome {
            config: self.cfg,
            encoder: self.encoder,
            adapters: self.adapters,
            denoiser: self.denoiser,
            metrics: self.metrics,
        }
    }

    /// Serializes everything needed to continue bitwise-identically.
    pub fn save_state(&self) -> Container {
        let mut c = Container::new(ContainerKind::TrainState, DType::F64, &self.digest);
        c.metadata.insert("step".into(), self.step.to_string());
        let rngs: Vec<RngState> = self.streams.all().iter().map(|r| RngState::capture(r)).collect();
        c.metadata
            .insert("rng".into(), serde_json::to_string(&rngs).expect("rng state serializes"));
        c.metadata
            .insert("metrics".into(), serde_json::to_string(&self.metrics).expect("metrics serialize"));
        for (name, t) in self.encoder.learned().iter() {
            c.tensors.insert(format!("learned.{name}"), t.clone());
        }
        if let Some(a) = &self.adapters {
            for (name, t) in a.params().iter() {
                c.tensors.insert(format!("adapters.{name}"), t.clone());
            }
        }
        if self.cfg.mode.trainable().encoder {
            for (name, t) in self.encoder.params().iter() {
                c.tensors.insert(format!("encoder.{name}"), t.clone());
            }
        }
        if let Some(d) = &self.denoiser {
            for (name, t) in d.params().iter() {
                c.tensors.insert(format!("denoiser.{name}"), t.clone());
            }
        }
        for (group, st) in &self.opt {
            c.metadata.insert(format!("opt.{group}.steps"), st.steps.to_string());
            for (name, t) in st.m.iter() {
                c.tensors.insert(format!("opt.{group}.m.{name}"), t.clone());
            }
            for (name, t) in st.v.iter() {
                c.tensors.insert(format!("opt.{group}.v.{name}"), t.clone());
            }
        }
        c
    }

    /// Restores a state written by [`Trainer::save_state`] into a trainer
    /// freshly built from the same inputs.
    pub fn restore_state(&mut self, c: &Container) -> Result<()> {
        c.expect_kind(ContainerKind::TrainState)?;
        if c.config_digest != self.digest {
            return Err(Error::config("training state was written by a different configuration"));
        }
        let meta = |k: &str| {
            c.meta(k)
                .ok_or_else(|| Error::config(format!("training state lacks `{k}`")))
        };
        let step: usize = meta("step")?
            .parse()
            .map_err(|_| Error::config("bad step in training state"))?;
        let rngs: Vec<RngState> =
            serde_json::from_str(meta("rng")?).map_err(|e| Error::config(format!("bad rng state: {e}")))?;
        if rngs.len() != Streams::NAMES.len() {
            return Err(Error::config("training state has the wrong number of rng streams"));
        }
        let metrics: Vec<StepMetrics> =
            serde_json::from_str(meta("metrics")?).map_err(|e| Error::config(format!("bad metrics: {e}")))?;
        let take = |prefix: &str, into: &mut ParamStore| -> Result<()> {
            for (name, t) in into.iter_mut() {
                let key = format!("{prefix}{name}");
                let v = c
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::config(format!("training state lacks `{key}`")))?;
                if v.shape() != t.shape() {
                    return Err(Error::config(format!("training state tensor `{key}` has the wrong shape")));
                }
                *t = v.clone();
            }
            Ok(())
        };
        take("learned.", self.encoder.learned_mut())?;
        if let Some(a) = self.adapters.as_mut() {
            take("adapters.", a.params_mut())?;
        }
        if self.cfg.mode.trainable().encoder {
            take("encoder.", self.encoder.params_mut())?;
        }
        if let Some(d) = self.denoiser.as_mut() {
            take("denoiser.", d.params_mut())?;
        }
        for (group, st) in self.opt.iter_mut() {
            let steps = meta(&format!("opt.{group}.steps"))?
                .parse()
                .map_err(|_| Error::config("bad optimizer step count"))?;
            let mut fresh = AdamState {
                steps,
                ..Default::default()
            };
            for (name, t) in c.tensors.iter() {
                if let Some(rest) = name.strip_prefix(&format!("opt.{group}.m.")) {
                    fresh.m.insert(rest, t.clone());
                } else if let Some(rest) = name.strip_prefix(&format!("opt.{group}.v.")) {
                    fresh.v.insert(rest, t.clone());
                }
            }
            *st = fresh;
        }
        for (r, s) in self.streams.all_mut().into_iter().zip(&rngs) {
            *r = s.restore();
        }
        self.step = step;
        self.metrics = metrics;
        Ok(())
    }
}

fn nonfinite(step: usize, timesteps: Vec<usize>, loss: &LossBreakdown) -> Error {
    Error::NonFinite {
        step,
        timesteps,
        recon: loss.recon,
        kp: loss.kp,
    }
}

/// One-shot training entry point: exactly one reference image.
pub fn train(
    cfg: &TrainConfig,
    references: &[ImageTensor],
    class_word: &str,
    reg: &RegPromptSet,
    base: &BaseModel,
    schedule: &NoiseSchedule,
) -> Result<TrainOutcome> {
    let [reference] = references else {
        return Err(Error::arg(format!(
            "one-shot training takes exactly one reference image, got {}",
            references.len()
        )));
    };
    Trainer::new(cfg, base, schedule, reference, class_word, reg)?.run(|_| {})
}

/// Runs a training job and returns full snapshots of the effective weights
/// before and after, for weight-delta analysis.
pub fn finetune_all(
    cfg: &TrainConfig,
    reference: &ImageTensor,
    class_word: &str,
    reg: &RegPromptSet,
    base: &BaseModel,
    schedule: &NoiseSchedule,
) -> Result<(Container, Container, TrainOutcome)> {
    let before = base.to_snapshot(&cfg.digest());
    let out = train(cfg, std::slice::from_ref(reference), class_word, reg, base, schedule)?;
    let after = out.effective_snapshot(base)?;
    Ok((before, after, out))
}
