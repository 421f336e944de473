use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng)?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Per-feature affine layer norm; gamma starts at ones and beta at zeros.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, Some(gamma), Some(beta), LAYER_NORM_EPS)
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least two dims".into()));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

/// Scaled dot-product attention of query tokens over key/value tokens, split
/// into `heads` independent heads and mixed by an output projection.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadCrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadCrossAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadCrossAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            dim,
            heads,
        })
    }

    /// `queries: [nq, dim]`, `kv: [nk, dim]` → `[nq, dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, queries: Var, kv: Var) -> Result<Var> {
        for x in [queries, kv] {
            if g.value(x).cols() != self.dim {
                return Err(Error::shape(
                    "cross_attention",
                    format!("tokens {:?} for model dim {}", g.value(x).shape(), self.dim),
                ));
            }
        }
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, kv)?;
        let v = self.v.forward(g, kv)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let merged = g.attention(q, k, v, self.heads, scale)?;
        self.out.forward(g, merged)
    }
}
