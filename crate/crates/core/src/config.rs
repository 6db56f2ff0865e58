//! Flat `key=value` run configuration with `#` comments.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{default_augmentation_set, AugKind};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::text::EncoderConfig;
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    /// Augmentation kinds in use; the rest of the default set is dropped.
    pub aug_kinds: Vec<AugKind>,
    pub metrics_backend: String,
    pub metrics_seed: u64,
    /// Base model snapshot; `None` uses the bundled one.
    pub base_snapshot: Option<PathBuf>,
    /// Regularization prompt file; `None` uses the bundled one.
    pub reg_prompts: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            aug_kinds: AugKind::ALL.to_vec(),
            metrics_backend: "toy".into(),
            metrics_seed: 0,
            base_snapshot: None,
            reg_prompts: None,
            output_dir: None,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::config(format!("bad value `{v}` for `{key}`: {e}")))
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Every recognized key, in echo order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "encoder.width",
        "encoder.layers",
        "encoder.heads",
        "encoder.max_len",
        "encoder.mlp_ratio",
        "denoiser.channels",
        "denoiser.image_size",
        "denoiser.patch",
        "denoiser.width",
        "denoiser.layers",
        "denoiser.heads",
        "denoiser.mlp_ratio",
        "schedule.kind",
        "schedule.steps",
        "schedule.beta_start",
        "schedule.beta_end",
        "train.mode",
        "train.steps",
        "train.batch_size",
        "train.lr_adapters",
        "train.lr_tokens",
        "train.lr_base",
        "train.weight_decay",
        "train.clip_norm",
        "train.templates",
        "train.class_noun",
        "kp.lambda",
        "kp.prompts",
        "sampler.mode",
        "aug.p_apply",
        "aug.tokens",
        "aug.kinds",
        "lora.rank",
        "lora.alpha",
        "lora.targets",
        "pretrain.steps",
        "pretrain.batch_size",
        "pretrain.lr",
        "pretrain.warmup",
        "pretrain.caption_keep",
        "pretrain.aug_prob",
        "pretrain.sampler",
        "metrics.backend",
        "metrics.seed",
        "base.snapshot",
        "reg.prompts",
        "output.dir",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "encoder.width" => self.encoder.width = parse(key, v)?,
            "encoder.layers" => self.encoder.layers = parse(key, v)?,
            "encoder.heads" => self.encoder.heads = parse(key, v)?,
            "encoder.max_len" => self.encoder.max_len = parse(key, v)?,
            "encoder.mlp_ratio" => self.encoder.mlp_ratio = parse(key, v)?,
            "denoiser.channels" => self.denoiser.channels = parse(key, v)?,
            "denoiser.image_size" => self.denoiser.image_size = parse(key, v)?,
            "denoiser.patch" => self.denoiser.patch = parse(key, v)?,
            "denoiser.width" => self.denoiser.width = parse(key, v)?,
            "denoiser.layers" => self.denoiser.layers = parse(key, v)?,
            "denoiser.heads" => self.denoiser.heads = parse(key, v)?,
            "denoiser.mlp_ratio" => self.denoiser.mlp_ratio = parse(key, v)?,
            "schedule.kind" => self.schedule.kind = v.parse()?,
            "schedule.steps" => self.schedule.steps = parse(key, v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse(key, v)?,
            "train.mode" => self.train.mode = v.parse::<TrainMode>()?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr_adapters" => self.train.lr_adapters = parse(key, v)?,
            "train.lr_tokens" => self.train.lr_tokens = parse(key, v)?,
            "train.lr_base" => self.train.lr_base = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.templates" => {
                self.train.templates = v.split('|').map(|s| s.trim().to_owned()).collect();
            }
            "train.class_noun" => self.train.class_noun = parse(key, v)?,
            "kp.lambda" => self.train.lambda_kp = parse(key, v)?,
            "kp.prompts" => self.train.kp_prompts = parse(key, v)?,
            "sampler.mode" => self.train.sampler = v.parse()?,
            "aug.p_apply" => self.train.p_apply = parse(key, v)?,
            "aug.tokens" => self.train.aug_tokens = parse(key, v)?,
            "aug.kinds" => {
                self.aug_kinds = list(v).iter().map(|k| k.parse()).collect::<Result<_>>()?;
            }
            "lora.rank" => self.train.lora_rank = parse(key, v)?,
            "lora.alpha" => self.train.lora_alpha = parse(key, v)?,
            "lora.targets" => {
                self.train.lora_targets = if v == "default" { None } else { Some(list(v)) };
            }
            "pretrain.steps" => self.pretrain.steps = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.warmup" => self.pretrain.warmup = parse(key, v)?,
            "pretrain.caption_keep" => self.pretrain.caption_keep = parse(key, v)?,
            "pretrain.aug_prob" => self.pretrain.aug_prob = parse(key, v)?,
            "pretrain.sampler" => self.pretrain.sampler = v.parse()?,
            "metrics.backend" => {
                if v != "toy" {
                    return Err(Error::config(format!("unknown metrics backend `{v}` (available: toy)")));
                }
                self.metrics_backend = v.to_owned();
            }
            "metrics.seed" => self.metrics_seed = parse(key, v)?,
            "base.snapshot" => self.base_snapshot = opt_path(v),
            "reg.prompts" => self.reg_prompts = opt_path(v),
            "output.dir" => self.output_dir = opt_path(v),
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "seed" => self.seed.to_string(),
            "encoder.width" => self.encoder.width.to_string(),
            "encoder.layers" => self.encoder.layers.to_string(),
            "encoder.heads" => self.encoder.heads.to_string(),
            "encoder.max_len" => self.encoder.max_len.to_string(),
            "encoder.mlp_ratio" => self.encoder.mlp_ratio.to_string(),
            "denoiser.channels" => self.denoiser.channels.to_string(),
            "denoiser.image_size" => self.denoiser.image_size.to_string(),
            "denoiser.patch" => self.denoiser.patch.to_string(),
            "denoiser.width" => self.denoiser.width.to_string(),
            "denoiser.layers" => self.denoiser.layers.to_string(),
            "denoiser.heads" => self.denoiser.heads.to_string(),
            "denoiser.mlp_ratio" => self.denoiser.mlp_ratio.to_string(),
            "schedule.kind" => match self.schedule.kind {
                ScheduleKind::Linear => "linear".into(),
                ScheduleKind::Cosine => "cosine".into(),
            },
            "schedule.steps" => self.schedule.steps.to_string(),
            "schedule.beta_start" => self.schedule.beta_start.to_string(),
            "schedule.beta_end" => self.schedule.beta_end.to_string(),
            "train.mode" => t.mode.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr_adapters" => t.lr_adapters.to_string(),
            "train.lr_tokens" => t.lr_tokens.to_string(),
            "train.lr_base" => t.lr_base.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "train.templates" => t.templates.join(" | "),
            "train.class_noun" => t.class_noun.to_string(),
            "kp.lambda" => t.lambda_kp.to_string(),
            "kp.prompts" => t.kp_prompts.to_string(),
            "sampler.mode" => sampler_name(t.sampler).into(),
            "aug.p_apply" => t.p_apply.to_string(),
            "aug.tokens" => t.aug_tokens.to_string(),
            "aug.kinds" => self.aug_kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
            "lora.rank" => t.lora_rank.to_string(),
            "lora.alpha" => t.lora_alpha.to_string(),
            "lora.targets" => t.lora_targets.as_ref().map_or("default".into(), |v| v.join(",")),
            "pretrain.steps" => self.pretrain.steps.to_string(),
            "pretrain.batch_size" => self.pretrain.batch_size.to_string(),
            "pretrain.lr" => self.pretrain.lr.to_string(),
            "pretrain.warmup" => self.pretrain.warmup.to_string(),
            "pretrain.caption_keep" => self.pretrain.caption_keep.to_string(),
            "pretrain.aug_prob" => self.pretrain.aug_prob.to_string(),
            "pretrain.sampler" => sampler_name(self.pretrain.sampler).into(),
            "metrics.backend" => self.metrics_backend.clone(),
            "metrics.seed" => self.metrics_seed.to_string(),
            "base.snapshot" => show_path(&self.base_snapshot),
            "reg.prompts" => show_path(&self.reg_prompts),
            "output.dir" => show_path(&self.output_dir),
            _ => return None,
        })
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.finalize()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides such as those given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let p = p.as_ref();
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{p}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Propagates shared settings and validates.
    pub fn finalize(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.denoiser.cond_dim = self.encoder.width;
        self.train.augmentations = default_augmentation_set()
            .into_iter()
            .filter(|s| self.aug_kinds.contains(&s.kind))
            .collect();
        self.encoder.validate()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        self.schedule.build()?;
        Ok(self)
    }

    /// The fully resolved configuration in the same text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            s.push_str(k);
            s.push('=');
            s.push_str(&self.get(k).expect("every listed key prints"));
            s.push('\n');
        }
        s
    }
}

fn sampler_name(m: crate::sampler::SamplerMode) -> &'static str {
    match m {
        crate::sampler::SamplerMode::Uniform => "uniform",
        crate::sampler::SamplerMode::SnrWeighted => "snr_weighted",
    }
}
