//! Per-token cross-attention maps of the denoiser.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::denoiser::Denoiser;
use crate::diffusion::{add_noise, gaussian_image, NoiseSchedule};
use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::rng;
use crate::sampler::csv_err;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub tokens: Vec<String>,
    /// `(patches, tokens)` head-averaged softmax weights; rows sum to 1.
    pub weights: Tensor,
    pub grid: usize,
    pub layer: usize,
    pub t: usize,
}

#[derive(Serialize)]
struct Row<'a> {
    token_index: usize,
    token: &'a str,
    row: usize,
    col: usize,
    weight: f64,
}

impl AttentionMaps {
    /// The `grid × grid` map of token `index`.
    pub fn map(&self, index: usize) -> Result<Tensor> {
        if index >= self.tokens.len() {
            return Err(Error::arg(format!(
                "token index {index} outside a {}-token prompt",
                self.tokens.len()
            )));
        }
        let mut m = Tensor::zeros(self.grid, self.grid);
        for p in 0..self.weights.rows() {
            m.set(p / self.grid, p % self.grid, self.weights.get(p, index));
        }
        Ok(m)
    }

    /// Columns: token_index, token, row, col, weight.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (k, tok) in self.tokens.iter().enumerate() {
            for p in 0..self.weights.rows() {
                w.serialize(Row {
                    token_index: k,
                    token: tok,
                    row: p / self.grid,
                    col: p % self.grid,
                    weight: self.weights.get(p, k),
                })
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One grayscale PNG per selected token, upscaled by `scale`.
    pub fn write_pngs(&self, dir: &Path, indices: &[usize], scale: usize) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::with_capacity(indices.len());
        for &k in indices {
            let m = self.map(k)?;
            let side = self.grid * scale.max(1);
            let mut img = ImageTensor::zeros(1, side, side);
            for y in 0..side {
                for x in 0..side {
                    img.set(0, y, x, m.get(y * self.grid / side, x * self.grid / side) * 2.0 - 1.0);
                }
            }
            let safe: String = self.tokens[k]
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                .collect();
            let path = dir.join(format!("attn_{k:02}_{safe}.png"));
            img.save_png(&path)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Cross-attention of `layer` for `image` noised to step `t` with noise from
/// `seed`. `tokens` labels the rows of `condition`.
pub fn export_cross_attention(
    denoiser: &Denoiser,
    condition: &Tensor,
    tokens: Vec<String>,
    image: &ImageTensor,
    schedule: &NoiseSchedule,
    t: usize,
    layer: usize,
    seed: u64,
) -> Result<AttentionMaps> {
    if tokens.len() != condition.rows() {
        return Err(Error::arg(format!(
            "{} token labels for a {}-token condition",
            tokens.len(),
            condition.rows()
        )));
    }
    if t >= schedule.steps() {
        return Err(Error::arg(format!("timestep {t} outside the schedule")));
    }
    let eps = gaussian_image(&mut rng::stream(seed, 0xa77), image.shape());
    let x_t = add_noise(image, &eps, t, schedule)?;
    let weights = denoiser.cross_attention(&x_t, t, condition, layer)?;
    let c = denoiser.config();
    Ok(AttentionMaps {
        tokens,
        weights,
        grid: c.image_size / c.patch,
        layer,
        t,
    })
}
