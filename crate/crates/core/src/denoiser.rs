//! Patch-transformer noise predictor with text cross-attention.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::nn::{self, init_layer_norm, init_linear};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the text embeddings attended to.
    pub cond_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            image_size: 16,
            patch: 4,
            width: 128,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            cond_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.image_size,
            self.patch,
            self.width,
            self.layers,
            self.mlp_ratio,
            self.cond_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::config("denoiser dimensions must be positive"));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "denoiser width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
}

/// Output of one recorded forward pass.
pub struct DenoiserOutput {
    /// Predicted noise in patch layout, `(patches, patch_dim)`.
    pub eps: Var,
    /// Per block, per head cross-attention probabilities `(patches, tokens)`.
    pub cross_attention: Vec<Vec<Var>>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let mut p = ParamStore::new();
        init_linear(&mut p, rng, "patch_in", config.patch_dim(), w);
        p.insert("pos", crate::params::gaussian(rng, config.patches(), w, nn::INIT_STD));
        init_linear(&mut p, rng, "time.fc1", w, w);
        init_linear(&mut p, rng, "time.fc2", w, w);
        for i in 0..config.layers {
            let b = format!("block{i}");
            init_linear(&mut p, rng, &format!("{b}.time"), w, w);
            init_layer_norm(&mut p, &format!("{b}.ln1"), w);
            for proj in ["q", "k", "v", "out"] {
                init_linear(&mut p, rng, &format!("{b}.attn.{proj}"), w, w);
            }
            init_layer_norm(&mut p, &format!("{b}.ln2"), w);
            init_linear(&mut p, rng, &format!("{b}.xattn.q"), w, w);
            init_linear(&mut p, rng, &format!("{b}.xattn.k"), config.cond_dim, w);
            init_linear(&mut p, rng, &format!("{b}.xattn.v"), config.cond_dim, w);
            init_linear(&mut p, rng, &format!("{b}.xattn.out"), w, w);
            init_layer_norm(&mut p, &format!("{b}.ln3"), w);
            init_linear(&mut p, rng, &format!("{b}.mlp.fc1"), w, w * config.mlp_ratio);
            init_linear(&mut p, rng, &format!("{b}.mlp.fc2"), w * config.mlp_ratio, w);
        }
        init_layer_norm(&mut p, "final_ln", w);
        init_linear(&mut p, rng, "patch_out", w, config.patch_dim());
        Ok(Self { config, params: p })
    }

    /// Rebuilds a denoiser from stored weights, checking every shape.
    pub fn from_parts(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, &mut crate::rng::stream(0, 0))?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::config(format!(
                        "denoiser parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("denoiser parameter `{name}` missing"))),
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::config("denoiser weights contain unexpected tensors"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn arch_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        hex::encode(h.finalize())
    }

    /// Records a forward pass on a patchified `x_t` of shape `(patches, patch_dim)`.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        b: &mut Binder<'a>,
        x_patches: Var,
        t: usize,
        cond: Var,
    ) -> Result<DenoiserOutput> {
        let c = &self.config;
        let xs = g.value(x_patches).shape();
        if xs != (c.patches(), c.patch_dim()) {
            return Err(Error::arg(format!(
                "denoiser input has shape {xs:?}, expected {:?}",
                (c.patches(), c.patch_dim())
            )));
        }
        let cs = g.value(cond).shape();
        if cs.0 == 0 || cs.1 != c.cond_dim {
            return Err(Error::arg(format!(
                "condition has shape {cs:?}, expected (len, {})",
                c.cond_dim
            )));
        }
        let freq = g.constant(nn::sinusoidal(t, c.width, 10_000.0));
        let temb = nn::linear(g, b, None, "time.fc1", freq);
        let temb = g.silu(temb);
        let temb = nn::linear(g, b, None, "time.fc2", temb);
        let temb_act = g.silu(temb);

        let mut h = nn::linear(g, b, None, "patch_in", x_patches);
        let pos = b.var(g, "pos");
        h = g.add(h, pos);
        h = g.add_row(h, temb);
        let mut cross = Vec::with_capacity(c.layers);
        for i in 0..c.layers {
            let shift = nn::linear(g, b, None, &format!("block{i}.time"), temb_act);
            h = g.add_row(h, shift);

            let x = nn::layer_norm(g, b, &format!("block{i}.ln1"), h);
            let q = nn::linear(g, b, None, &format!("block{i}.attn.q"), x);
            let k = nn::linear(g, b, None, &format!("block{i}.attn.k"), x);
            let v = nn::linear(g, b, None, &format!("block{i}.attn.v"), x);
            let (a, _) = nn::attention(g, q, k, v, c.heads);
            let o = nn::linear(g, b, None, &format!("block{i}.attn.out"), a);
            h = g.add(h, o);

            let x = nn::layer_norm(g, b, &format!("block{i}.ln2"), h);
            let q = nn::linear(g, b, None, &format!("block{i}.xattn.q"), x);
            let k = nn::linear(g, b, None, &format!("block{i}.xattn.k"), cond);
            let v = nn::linear(g, b, None, &format!("block{i}.xattn.v"), cond);
            let (a, probs) = nn::attention(g, q, k, v, c.heads);
            cross.push(probs);
            let o = nn::linear(g, b, None, &format!("block{i}.xattn.out"), a);
            h = g.add(h, o);

            let x = nn::layer_norm(g, b, &format!("block{i}.ln3"), h);
            let m = nn::linear(g, b, None, &format!("block{i}.mlp.fc1"), x);
            let m = g.silu(m);
            let m = nn::linear(g, b, None, &format!("block{i}.mlp.fc2"), m);
            h = g.add(h, m);
        }
        let h = nn::layer_norm(g, b, "final_ln", h);
        let eps = nn::linear(g, b, None, "patch_out", h);
        Ok(DenoiserOutput {
            eps,
            cross_attention: cross,
        })
    }

    /// Head-averaged cross-attention `(patches, tokens)` of block `layer`.
    pub fn cross_attention(&self, x_t: &ImageTensor, t: usize, condition: &Tensor, layer: usize) -> Result<Tensor> {
        if layer >= self.config.layers {
            return Err(Error::arg(format!(
                "layer {layer} outside 0..{}",
                self.config.layers
            )));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let x = g.constant(x_t.patchify(self.config.patch)?);
        let cond = g.constant(condition.clone());
        let out = self.forward(&mut g, &mut b, x, t, cond)?;
        let heads = &out.cross_attention[layer];
        let mut avg = Tensor::zeros(self.config.patches(), condition.rows());
        for p in heads {
            avg.add_assign(g.value(*p));
        }
        Ok(avg.scale(1.0 / heads.len() as f64))
    }
}

impl NoisePredictor for Denoiser {
    fn image_shape(&self) -> (usize, usize, usize) {
        let c = &self.config;
        (c.channels, c.image_size, c.image_size)
    }

    fn predict(&self, x_t: &ImageTensor, t: usize, condition: &Tensor) -> Result<ImageTensor> {
        if x_t.shape() != self.image_shape() {
            return Err(Error::arg(format!(
                "image of shape {:?} given to a denoiser for {:?}",
                x_t.shape(),
                self.image_shape()
            )));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let x = g.constant(x_t.patchify(self.config.patch)?);
        let cond = g.constant(condition.clone());
        let out = self.forward(&mut g, &mut b, x, t, cond)?;
        let c = &self.config;
        ImageTensor::unpatchify(g.value(out.eps), c.channels, c.image_size, c.image_size, c.patch)
    }
}
