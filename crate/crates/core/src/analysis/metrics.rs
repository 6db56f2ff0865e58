//! Embedding-based fidelity and diversity scores.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::params::gaussian;
use crate::rng;
use crate::sampler::csv_err;
use crate::tensor::Tensor;
use crate::text::{is_placeholder, normalize, TextEncoder};

/// Maps images and text into a shared unit-norm space.
pub trait EmbeddingBackend {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>>;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn l2_normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::arg("cannot normalize a zero or non-finite embedding"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Cosine of two vectors, clamped to [−1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Deterministic backend built from the frozen base encoder.
///
/// Text: mean of the encoder's output tokens. Images: per-patch channel
/// means and standard deviations, projected by a seeded Gaussian matrix to
/// the encoder width.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    encoder: TextEncoder,
    patch: usize,
    projection: Tensor,
    image_shape: (usize, usize, usize),
}

impl ToyBackend {
    pub const NAME: &'static str = "toy";

    pub fn new(encoder: &TextEncoder, image_shape: (usize, usize, usize), patch: usize, seed: u64) -> Result<Self> {
        let (c, h, w) = image_shape;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::config(format!("patch {patch} does not tile a {h}×{w} image")));
        }
        let features = (h / patch) * (w / patch) * c * 2 + 1;
        let k = encoder.config().width;
        let projection = gaussian(&mut rng::stream(seed, 0xe1b), k, features, 1.0 / (features as f64).sqrt());
        Ok(Self {
            encoder: encoder.clone(),
            patch,
            projection,
            image_shape,
        })
    }

    fn features(&self, img: &ImageTensor) -> Vec<f64> {
        let (c, h, w) = img.shape();
        let p = self.patch;
        let mut f = Vec::with_capacity(self.projection.cols());
        for py in (0..h).step_by(p) {
            for px in (0..w).step_by(p) {
                for ch in 0..c {
                    let vals: Vec<f64> = (py..py + p)
                        .flat_map(|y| (px..px + p).map(move |x| (y, x)))
                        .map(|(y, x)| img.get(ch, y, x))
                        .collect();
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                    f.push(mean);
                    f.push(var.sqrt());
                }
            }
        }
        // Constant feature keeps blank images away from the origin.
        f.push(1.0);
        f
    }
}

impl EmbeddingBackend for ToyBackend {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dim(&self) -> usize {
        self.projection.rows()
    }

    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        if image.shape() != self.image_shape {
            return Err(Error::arg(format!(
                "backend expects images of shape {:?}, got {:?}",
                self.image_shape,
                image.shape()
            )));
        }
        let f = self.features(image);
        let v = (0..self.projection.rows())
            .map(|r| self.projection.row(r).iter().zip(&f).map(|(a, b)| a * b).sum())
            .collect();
        l2_normalize(v)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let enc = self.encoder.encode_text(None, text)?;
        let mut mean = vec![0.0; enc.cols()];
        for r in 0..enc.rows() {
            mean.iter_mut().zip(enc.row(r)).for_each(|(m, v)| *m += v);
        }
        l2_normalize(mean)
    }
}

/// The prompt with subject and augmentation placeholders removed.
pub fn strip_placeholders(prompt: &str) -> String {
    normalize(prompt)
        .split(' ')
        .filter(|w| !w.is_empty() && !is_placeholder(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Mean image/prompt cosine over `images`.
pub fn image_text_score(backend: &dyn EmbeddingBackend, images: &[ImageTensor], prompt: &str) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::arg("image_text_score needs at least one image"));
    }
    let text = backend.embed_text(&strip_placeholders(prompt))?;
    let mut total = 0.0;
    for img in images {
        total += cosine(&backend.embed_image(img)?, &text);
    }
    Ok(total / images.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seen,
    Unseen,
}

/// Mean cosine over every (generated, reference) pair.
pub fn image_image_score(
    backend: &dyn EmbeddingBackend,
    generated: &[ImageTensor],
    references: &[ImageTensor],
    split: Split,
) -> Result<f64> {
    if references.is_empty() {
        return Err(match split {
            Split::Unseen => Error::config("unseen score requested but the subject has no held-out images"),
            Split::Seen => Error::arg("seen score needs the reference image"),
        });
    }
    if generated.is_empty() {
        return Err(Error::arg("image_image_score needs at least one generated image"));
    }
    let refs = references
        .iter()
        .map(|r| backend.embed_image(r))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for g in generated {
        let e = backend.embed_image(g)?;
        total += refs.iter().map(|r| cosine(&e, r)).sum::<f64>();
    }
    Ok(total / (generated.len() * refs.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairSimilarity {
    pub i: usize,
    pub j: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityStats {
    pub pairs: Vec<PairSimilarity>,
    pub mean: f64,
    pub median: f64,
}

impl DiversityStats {
    /// Columns: i, j, similarity.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.pairs {
            w.serialize(p).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// All pairwise cosines among `images`; lower means more diverse.
pub fn diversity_stats(backend: &dyn EmbeddingBackend, images: &[ImageTensor]) -> Result<DiversityStats> {
    if images.len() < 2 {
        return Err(Error::arg(format!("diversity needs at least 2 images, got {}", images.len())));
    }
    let emb = images
        .iter()
        .map(|i| backend.embed_image(i))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::with_capacity(emb.len() * (emb.len() - 1) / 2);
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            pairs.push(PairSimilarity {
                i,
                j,
                similarity: cosine(&emb[i], &emb[j]),
            });
        }
    }
    let sims: Vec<f64> = pairs.iter().map(|p| p.similarity).collect();
    Ok(DiversityStats {
        mean: sims.iter().sum::<f64>() / sims.len() as f64,
        median: median(&sims),
        pairs,
    })
}
