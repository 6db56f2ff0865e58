//! Discrete-time diffusion: schedules, forward noising, and DDPM sampling.
//!
//! Timesteps are integers `0..T`. The forward process uses the cumulative
//! product convention `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`, and `log_snr[t]` is
//! `ln ᾱ_t − ln(1−ᾱ_t)`.

use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    log_snr: Vec<f64>,
}

/// Cosine schedule offset and per-step β cap.
const COSINE_S: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::config(format!("schedule needs at least 2 timesteps, got {steps}")));
    }
    let betas = match kind {
        ScheduleKind::Linear => {
            if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                return Err(Error::config(format!(
                    "linear schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
                )));
            }
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |i: usize| {
                let x = (i as f64 / steps as f64 + COSINE_S) / (1.0 + COSINE_S);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=steps)
                .map(|i| (1.0 - f(i) / f(i - 1)).clamp(1e-12, COSINE_MAX_BETA))
                .collect()
        }
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Builds every derived array from per-step variances.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::config("schedule needs at least 2 timesteps"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = alpha_bars.iter().map(|ab| (1.0 - ab).sqrt()).collect();
        let log_snr: Vec<f64> = alpha_bars.iter().map(|ab| ab.ln() - (1.0 - ab).ln()).collect();
        if log_snr.windows(2).any(|w| !(w[1] < w[0])) || log_snr.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(
                "schedule underflows: log-SNR is not finite and strictly decreasing",
            ));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
            log_snr,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn log_snr(&self) -> &[f64] {
        &self.log_snr
    }

    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bars[t];
        ab / (1.0 - ab)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::arg(format!("timestep {t} outside 0..{}", self.steps())));
        }
        Ok(())
    }
}

/// `√ᾱ·x0 + √(1−ᾱ)·eps` for an explicit `ᾱ ∈ [0, 1]`.
pub fn add_noise_with(x0: &ImageTensor, eps: &ImageTensor, alpha_bar: f64) -> Result<ImageTensor> {
    x0.lincomb(alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

pub fn add_noise(x0: &ImageTensor, eps: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
    s.check_t(t)?;
    add_noise_with(x0, eps, s.alpha_bars[t])
}

/// One ancestral DDPM step with explicit coefficients:
/// `(x_t − β/√(1−ᾱ)·eps) / √α + √β·z`. The noise term is omitted when
/// `z` is `None`.
pub fn ddpm_step_with(
    x_t: &ImageTensor,
    eps_pred: &ImageTensor,
    alpha: f64,
    beta: f64,
    alpha_bar: f64,
    z: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_coef = beta / (1.0 - alpha_bar).sqrt();
    let mean = x_t.lincomb(inv_sqrt_alpha, eps_pred, -inv_sqrt_alpha * eps_coef)?;
    match z {
        Some(z) => mean.lincomb(1.0, z, beta.sqrt()),
        None => Ok(mean),
    }
}

/// Reverse step from `t` to `t−1` with the fixed variance `σ̃²_t = β_t`;
/// at `t = 0` the noise is ignored.
pub fn ddpm_step(
    x_t: &ImageTensor,
    eps_pred: &ImageTensor,
    t: usize,
    s: &NoiseSchedule,
    z: &ImageTensor,
) -> Result<ImageTensor> {
    s.check_t(t)?;
    x_t.ensure_same_shape(eps_pred)?;
    x_t.ensure_same_shape(z)?;
    let noise = (t > 0).then_some(z);
    ddpm_step_with(x_t, eps_pred, s.alphas[t], s.betas[t], s.alpha_bars[t], noise)
}

/// Anything that predicts the noise in `x_t` given a text condition.
pub trait NoisePredictor {
    /// `(channels, height, width)` of the images this predictor handles.
    fn image_shape(&self) -> (usize, usize, usize);

    fn predict(&self, x_t: &ImageTensor, t: usize, condition: &Tensor) -> Result<ImageTensor>;
}

pub fn gaussian_image(rng: &mut impl Rng, shape: (usize, usize, usize)) -> ImageTensor {
    let (c, h, w) = shape;
    let data = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
    ImageTensor::from_vec(c, h, w, data).expect("shape-consistent length")
}

/// Ancestral sampling from pure noise through `t = T−1 … 0`.
///
/// Image `i` draws from its own stream of `seed`: first the initial noise,
/// then one `z` per step with `t > 0`, in descending `t`.
pub fn generate(
    denoiser: &dyn NoisePredictor,
    condition: &Tensor,
    s: &NoiseSchedule,
    seed: u64,
    n_images: usize,
) -> Result<Vec<ImageTensor>> {
    let shape = denoiser.image_shape();
    (0..n_images)
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let mut x = gaussian_image(&mut rng, shape);
            for t in (0..s.steps()).rev() {
                let eps = denoiser.predict(&x, t, condition)?;
                let z = if t > 0 {
                    Some(gaussian_image(&mut rng, shape))
                } else {
                    None
                };
                x = ddpm_step_with(&x, &eps, s.alphas[t], s.betas[t], s.alpha_bars[t], z.as_ref())?;
            }
            Ok(x)
        })
        .collect()
}
