//! How much the text condition moves the noise prediction at each timestep.

use std::io::Write;

use serde::Serialize;

use crate::diffusion::{add_noise, gaussian_image, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::rng;
use crate::sampler::{csv_err, TimestepDistribution};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCurve {
    pub timesteps: Vec<usize>,
    /// `β_t · ‖ε(x_t, y_base) − ε(x_t, y_other)‖`, averaged over images and prompts.
    pub d: Vec<f64>,
    pub base_prompt: String,
    pub other_prompts: Vec<String>,
    pub schedule_id: String,
}

#[derive(Serialize)]
struct Row {
    t: usize,
    d: f64,
    log_snr: f64,
    sampling_prob: Option<f64>,
}

impl ProbeCurve {
    pub fn spearman(&self) -> f64 {
        let t: Vec<f64> = self.timesteps.iter().map(|&t| t as f64).collect();
        spearman(&t, &self.d)
    }

    /// Columns: t, d, log_snr, sampling_prob (empty without an overlay).
    pub fn write_csv(&self, schedule: &NoiseSchedule, overlay: Option<&TimestepDistribution>, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (&t, &d) in self.timesteps.iter().zip(&self.d) {
            w.serialize(Row {
                t,
                d,
                log_snr: schedule.log_snr()[t],
                sampling_prob: overlay.map(|o| o.probs()[t]),
            })
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Noises each probe image to `x_t` with noise shared across prompts, then
/// records the β-scaled distance between predictions under `y_base` and
/// each of `y_others`.
pub fn timestep_effect_probe(
    denoiser: &dyn NoisePredictor,
    encode: &dyn Fn(&str) -> Result<Tensor>,
    y_base: &str,
    y_others: &[String],
    schedule: &NoiseSchedule,
    probe_images: &[ImageTensor],
    timesteps: &[usize],
    seed: u64,
) -> Result<ProbeCurve> {
    if y_others.is_empty() {
        return Err(Error::arg("probe needs at least one comparison prompt"));
    }
    if probe_images.is_empty() {
        return Err(Error::arg("probe needs at least one image"));
    }
    if let Some(&t) = timesteps.iter().find(|&&t| t >= schedule.steps()) {
        return Err(Error::arg(format!("timestep {t} outside the schedule")));
    }
    let base = encode(y_base)?;
    let others = y_others.iter().map(|p| encode(p)).collect::<Result<Vec<_>>>()?;
    let mut d = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        let mut r = rng::stream(seed, t as u64);
        let mut acc = 0.0;
        for img in probe_images {
            let eps = gaussian_image(&mut r, img.shape());
            let x_t = add_noise(img, &eps, t, schedule)?;
            let e_base = denoiser.predict(&x_t, t, &base)?;
            for cond in &others {
                let e = denoiser.predict(&x_t, t, cond)?;
                let dist: f64 = e_base.data().iter().zip(e.data()).map(|(a, b)| (a - b).powi(2)).sum();
                acc += dist.sqrt();
            }
        }
        d.push(schedule.betas()[t] * acc / (probe_images.len() * others.len()) as f64);
    }
    Ok(ProbeCurve {
        timesteps: timesteps.to_vec(),
        d,
        base_prompt: y_base.to_owned(),
        other_prompts: y_others.to_vec(),
        schedule_id: schedule_id(schedule),
    })
}

/// Short content hash of the schedule's betas.
pub fn schedule_id(s: &NoiseSchedule) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for b in s.betas() {
        h.update(b.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Ranks with ties sharing their average rank (1-based).
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[1.0, 4.0, 9.0, 16.0]), 1.0);
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&x, &[0.0; 4]), 0.0);
    }
}
