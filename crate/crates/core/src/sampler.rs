//! Training-timestep distributions: uniform and SNR-weighted categorical.

use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Uniform,
    SnrWeighted,
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "snr_weighted" => Ok(Self::SnrWeighted),
            other => Err(Error::config(format!("unknown sampler mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimestepDistribution {
    probs: Vec<f64>,
    cdf: Vec<f64>,
    mode: SamplerMode,
    /// Set when an SNR-weighted distribution fell back to uniform.
    degenerate: bool,
}

impl TimestepDistribution {
    /// Normalizes non-negative weights.
    pub fn from_weights(weights: &[f64], mode: SamplerMode) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::arg("timestep distribution needs at least one timestep"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::arg("timestep weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::arg("timestep weights sum to zero"));
        }
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cdf.push(acc);
        }
        Ok(Self {
            probs,
            cdf,
            mode,
            degenerate: false,
        })
    }

    pub fn uniform(steps: usize) -> Result<Self> {
        Self::from_weights(&vec![1.0; steps], SamplerMode::Uniform)
    }

    pub fn for_mode(mode: SamplerMode, s: &NoiseSchedule) -> Result<Self> {
        match mode {
            SamplerMode::Uniform => Self::uniform(s.steps()),
            SamplerMode::SnrWeighted => snr_weighted_probs(s.log_snr()),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Inverse-CDF draw; zero-probability timesteps are never returned.
    pub fn sample_one(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cdf.last().expect("non-empty");
        let u: f64 = rng.gen::<f64>() * total;
        let i = self.cdf.partition_point(|c| *c <= u);
        // u < total always, so i is in range unless rounding pushed it past
        // the end; fall back to the last positive-probability timestep.
        if i < self.len() {
            i
        } else {
            self.probs.iter().rposition(|p| *p > 0.0).expect("some positive probability")
        }
    }

    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    /// CSV with columns `t,log_snr,prob`.
    pub fn write_csv(&self, log_snr: &[f64], out: impl Write) -> Result<()> {
        if log_snr.len() != self.len() {
            return Err(Error::arg("log-SNR length differs from the distribution"));
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "log_snr", "prob"]).map_err(csv_err)?;
        for (t, (l, p)) in log_snr.iter().zip(&self.probs).enumerate() {
            w.write_record([t.to_string(), format!("{l:?}"), format!("{p:?}")])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::arg(format!("csv: {other:?}")),
    }
}

/// `p_i = (C − log_snr_i) / Σ_j (C − log_snr_j)` with `C = max log_snr`.
///
/// When every log-SNR is equal all weights vanish; the uniform
/// distribution is returned and flagged as degenerate.
pub fn snr_weighted_probs(log_snr: &[f64]) -> Result<TimestepDistribution> {
    if log_snr.is_empty() || log_snr.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("log-SNR values must be finite and non-empty"));
    }
    let c = log_snr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_snr.iter().map(|l| c - l).collect();
    if weights.iter().all(|w| *w == 0.0) {
        let mut d = TimestepDistribution::uniform(log_snr.len())?;
        d.mode = SamplerMode::SnrWeighted;
        d.degenerate = true;
        return Ok(d);
    }
    TimestepDistribution::from_weights(&weights, SamplerMode::SnrWeighted)
}
