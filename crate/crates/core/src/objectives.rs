//! Reconstruction and knowledge-preservation losses.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::denoiser::Denoiser;
use crate::diffusion::{add_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;
use crate::text::{is_placeholder, normalize, LoraAdapterSet, TextEncoder, TokenizedPrompt};

/// Captions for the knowledge-preservation term.
#[derive(Debug, Clone, PartialEq)]
pub struct RegPromptSet {
    prompts: Vec<String>,
}

impl RegPromptSet {
    pub fn new(prompts: Vec<String>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::config("regularization prompt set is empty"));
        }
        for p in &prompts {
            let n = normalize(p);
            if n.is_empty() {
                return Err(Error::config("regularization prompt set contains an empty line"));
            }
            if n.split(' ').any(is_placeholder) {
                return Err(Error::config(format!(
                    "regularization prompt {p:?} contains a learnable-token placeholder"
                )));
            }
        }
        Ok(Self { prompts })
    }

    /// One caption per non-blank line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// `n` distinct prompts (all of them when `n` exceeds the set).
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Vec<&str> {
        let n = n.min(self.prompts.len());
        index::sample(rng, self.prompts.len(), n)
            .into_iter()
            .map(|i| self.prompts[i].as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kp: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, kp: f64, lambda: f64) -> Self {
        Self {
            recon,
            kp,
            total: recon + lambda * kp,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.recon.is_finite() && self.kp.is_finite() && self.total.is_finite()
    }
}

/// Anything that can record a differentiable noise prediction in patch layout.
pub trait EpsModel {
    fn patch(&self) -> usize;

    fn params(&self) -> &ParamStore;

    fn eps<'a>(&'a self, g: &mut Graph<'a>, b: &mut Binder<'a>, x_t: Var, t: usize, cond: Var) -> Result<Var>;
}

impl EpsModel for Denoiser {
    fn patch(&self) -> usize {
        self.config().patch
    }

    fn params(&self) -> &ParamStore {
        Denoiser::params(self)
    }

    fn eps<'a>(&'a self, g: &mut Graph<'a>, b: &mut Binder<'a>, x_t: Var, t: usize, cond: Var) -> Result<Var> {
        Ok(self.forward(g, b, x_t, t, cond)?.eps)
    }
}

/// One training example after forward noising, in patch layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub prompt: TokenizedPrompt,
    pub t: usize,
    pub x_t: Tensor,
    pub eps: Tensor,
}

impl NoisedSample {
    pub fn new(
        x0: &ImageTensor,
        eps: &ImageTensor,
        prompt: TokenizedPrompt,
        t: usize,
        s: &NoiseSchedule,
        patch: usize,
    ) -> Result<Self> {
        let x_t = add_noise(x0, eps, t, s)?;
        Ok(Self {
            prompt,
            t,
            x_t: x_t.patchify(patch)?,
            eps: eps.patchify(patch)?,
        })
    }
}

/// Which parameter sets receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub encoder: bool,
    pub tokens: bool,
    pub adapters: bool,
    pub denoiser: bool,
}

/// Gradients split by owner; sets that were not trainable come back empty.
#[derive(Debug, Clone, Default)]
pub struct LossGrads {
    pub encoder: ParamStore,
    pub tokens: ParamStore,
    pub adapters: ParamStore,
    pub denoiser: ParamStore,
}

pub struct LossInputs<'s> {
    pub batch: &'s [NoisedSample],
    pub kp_prompts: &'s [TokenizedPrompt],
    /// Frozen-encoder embeddings of `kp_prompts`.
    pub kp_targets: &'s [Tensor],
    pub lambda: f64,
}

/// Records `mean_b ‖eps_b − ε̂_b‖²` for the batch.
fn recon_graph<'a>(
    g: &mut Graph<'a>,
    encoder: &'a TextEncoder,
    enc: &mut crate::text::EncoderBinding<'a>,
    denoiser: &'a dyn EpsModel,
    den: &mut Binder<'a>,
    batch: &[NoisedSample],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::arg("reconstruction loss needs a non-empty batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        if s.x_t.shape() != s.eps.shape() {
            return Err(Error::arg("noised sample and its noise differ in shape"));
        }
        let cond = encoder.forward(g, enc, &s.prompt)?;
        let x = g.constant(s.x_t.clone());
        let pred = denoiser.eps(g, den, x, s.t, cond)?;
        let target = g.constant(s.eps.clone());
        let diff = g.sub(pred, target);
        terms.push(g.sum_sq(diff));
    }
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t);
    }
    Ok(g.scale(acc, 1.0 / batch.len() as f64))
}

/// Records `1 − s̄`, where `s̄` averages per-position cosines over positions,
/// then over prompts. Positions where either side is (near) zero are left
/// out of the average; prompts with no usable position are left out too.
pub fn kp_graph(g: &mut Graph<'_>, frozen: &[Tensor], online: &[Var]) -> Result<Var> {
    if frozen.len() != online.len() {
        return Err(Error::arg("frozen and online embedding counts differ"));
    }
    let mut means = Vec::new();
    for (f, o) in frozen.iter().zip(online) {
        if f.shape() != g.value(*o).shape() {
            return Err(Error::arg(format!(
                "embedding shapes differ: frozen {:?}, online {:?}",
                f.shape(),
                g.value(*o).shape()
            )));
        }
        let valid = (0..f.rows())
            .filter(|&r| {
                let nf = f.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                let no = g.value(*o).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                nf >= crate::autograd::COSINE_EPS && no >= crate::autograd::COSINE_EPS
            })
            .count();
        if valid == 0 {
            continue;
        }
        let fv = g.constant(f.clone());
        let cos = g.cosine_rows(fv, *o);
        let s = g.sum(cos);
        means.push(g.scale(s, 1.0 / valid as f64));
    }
    if means.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut acc = means[0];
    for m in &means[1..] {
        acc = g.add(acc, *m);
    }
    let mean = g.scale(acc, 1.0 / means.len() as f64);
    Ok(g.affine(mean, -1.0, 1.0))
}

/// Value-only knowledge-preservation loss between two sets of embeddings.
pub fn kp_loss(frozen: &[Tensor], online: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = online.iter().map(|o| g.constant(o.clone())).collect();
    let kp = kp_graph(&mut g, frozen, &vars)?;
    Ok(g.value(kp).item().clamp(0.0, 2.0))
}

/// Knowledge-preservation loss between a frozen encoder and an online one.
pub fn kp_loss_encoders(
    frozen: &TextEncoder,
    online: &TextEncoder,
    adapters: Option<&LoraAdapterSet>,
    prompts: &[&str],
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::arg("knowledge-preservation loss needs at least one prompt"));
    }
    let mut f = Vec::with_capacity(prompts.len());
    let mut o = Vec::with_capacity(prompts.len());
    for p in prompts {
        f.push(frozen.encode_text(None, p)?);
        o.push(online.encode_text(adapters, p)?);
    }
    kp_loss(&f, &o)
}

/// Records `recon + λ·kp` and returns its parts and gradients.
pub fn total_loss(
    encoder: &TextEncoder,
    adapters: Option<&LoraAdapterSet>,
    denoiser: &dyn EpsModel,
    inputs: &LossInputs<'_>,
    trainable: Trainable,
) -> Result<(LossBreakdown, LossGrads)> {
    if !(inputs.lambda >= 0.0) {
        return Err(Error::config(format!("lambda must be non-negative, got {}", inputs.lambda)));
    }
    if inputs.kp_prompts.len() != inputs.kp_targets.len() {
        return Err(Error::arg("every regularization prompt needs a frozen target"));
    }
    let mut g = Graph::new();
    let mut enc = encoder.bind(trainable.encoder, trainable.tokens, adapters.map(|a| (a, trainable.adapters)));
    let mut den = Binder::new(denoiser.params(), trainable.denoiser);
    let recon = recon_graph(&mut g, encoder, &mut enc, denoiser, &mut den, inputs.batch)?;
    let mut total = recon;
    let mut kp_value = 0.0;
    if !inputs.kp_prompts.is_empty() {
        let online = inputs
            .kp_prompts
            .iter()
            .map(|p| encoder.forward(&mut g, &mut enc, p))
            .collect::<Result<Vec<_>>>()?;
        let kp = kp_graph(&mut g, inputs.kp_targets, &online)?;
        kp_value = g.value(kp).item().clamp(0.0, 2.0);
        if inputs.lambda > 0.0 {
            let weighted = g.scale(kp, inputs.lambda);
            total = g.add(recon, weighted);
        }
    }
    let breakdown = LossBreakdown::new(g.value(recon).item(), kp_value, inputs.lambda);
    let any = trainable.encoder || trainable.tokens || trainable.adapters || trainable.denoiser;
    let mut grads = LossGrads::default();
    if any && breakdown.is_finite() {
        let gr = g.backward(total);
        if trainable.encoder {
            grads.encoder = enc.base.grads(&gr);
        }
        if trainable.tokens {
            grads.tokens = enc.learned.grads(&gr);
        }
        if let (true, Some(l)) = (trainable.adapters, &enc.lora) {
            grads.adapters = l.params.grads(&gr);
        }
        if trainable.denoiser {
            grads.denoiser = den.grads(&gr);
        }
    }
    Ok((breakdown, grads))
}
