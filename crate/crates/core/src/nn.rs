//! Layer building blocks shared by the text encoder and the denoiser.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{gaussian, Binder, ParamStore};
use crate::tensor::Tensor;

/// Std of the Gaussian used for freshly initialized weight matrices.
pub const INIT_STD: f64 = 0.02;

pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, path: &str, d_in: usize, d_out: usize) {
    store.insert(format!("{path}.weight"), gaussian(rng, d_out, d_in, INIT_STD));
    store.insert(format!("{path}.bias"), Tensor::zeros(1, d_out));
}

pub fn init_layer_norm(store: &mut ParamStore, path: &str, width: usize) {
    store.insert(format!("{path}.gamma"), Tensor::full(1, width, 1.0));
    store.insert(format!("{path}.beta"), Tensor::zeros(1, width));
}

/// Low-rank factors bound for one forward pass.
pub struct LoraBinding<'a> {
    pub params: Binder<'a>,
    pub scale: f64,
}

impl LoraBinding<'_> {
    fn covers(&self, path: &str) -> bool {
        self.params.store().contains(&format!("{path}.lora_a"))
    }
}

/// `x·Wᵀ + b`, plus `scale·(x·Aᵀ)·Bᵀ` when `lora` carries factors for `path`.
pub fn linear<'a>(
    g: &mut Graph<'a>,
    params: &mut Binder<'a>,
    lora: Option<&mut LoraBinding<'a>>,
    path: &str,
    x: Var,
) -> Var {
    let w = params.var(g, &format!("{path}.weight"));
    let b = params.var(g, &format!("{path}.bias"));
    let y = g.matmul_t(x, w);
    let y = g.add_row(y, b);
    match lora {
        Some(l) if l.covers(path) => {
            let a = l.params.var(g, &format!("{path}.lora_a"));
            let bb = l.params.var(g, &format!("{path}.lora_b"));
            let down = g.matmul_t(x, a);
            let up = g.matmul_t(down, bb);
            let up = g.scale(up, l.scale);
            g.add(y, up)
        }
        _ => y,
    }
}

pub fn layer_norm<'a>(g: &mut Graph<'a>, params: &mut Binder<'a>, path: &str, x: Var) -> Var {
    let gamma = params.var(g, &format!("{path}.gamma"));
    let beta = params.var(g, &format!("{path}.beta"));
    g.layer_norm(x, gamma, beta)
}

/// Multi-head scaled dot-product attention over already projected
/// `q (n, w)`, `k (m, w)`, `v (m, w)`. Returns the concatenated head outputs
/// and each head's `(n, m)` attention probabilities.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, heads: usize) -> (Var, Vec<Var>) {
    let width = g.value(q).cols();
    assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
    let dh = width / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, lo, hi), g.slice_cols(k, lo, hi), g.slice_cols(v, lo, hi))
        };
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, inv);
        let p = g.softmax_rows(scores);
        outs.push(g.matmul(p, vh));
        probs.push(p);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    (out, probs)
}

/// Sinusoidal features of an integer position, `(1, dim)`.
pub fn sinusoidal(position: usize, dim: usize, max_period: f64) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(1, dim);
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        let arg = position as f64 * freq;
        out.set(0, i, arg.sin());
        out.set(0, half + i, arg.cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rows_are_distributions() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_vec(2, 4, vec![0.1, 0.2, 0.3, 0.4, -1.0, 0.0, 1.0, 2.0]));
        let kv = g.constant(Tensor::from_vec(3, 4, (0..12).map(|i| i as f64 / 10.0).collect()));
        let (out, probs) = attention(&mut g, q, kv, kv, 2);
        assert_eq!(g.value(out).shape(), (2, 4));
        for p in probs {
            for r in 0..2 {
                let s: f64 = g.value(p).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sinusoidal_position_zero() {
        let e = sinusoidal(0, 6, 10_000.0);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
