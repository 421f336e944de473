use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::{noise_with, DiffusionSchedule, Denoiser};
use crate::error::{Error, Result};
use crate::nncore::{Axis, Graph, LayerNorm, Linear, ParamStore, Real, Tensor, Var};

pub const TIME_EMB_DIM: usize = 64;

/// Sinusoidal embedding of the diffusion step: `dim/2` sines then `dim/2`
/// cosines at geometrically spaced frequencies.
pub fn timestep_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let step = if half > 1 { (10000f64).ln() / (half - 1) as f64 } else { 0.0 };
    let freqs: Vec<f64> = (0..half).map(|i| (-(i as f64) * step).exp() * k as f64).collect();
    freqs.iter().map(|f| f.sin()).chain(freqs.iter().map(|f| f.cos())).collect()
}

/// Feed-forward residual noise predictor over
/// `A_k ⊕ condition ⊕ step embedding`.
#[derive(Debug, Clone)]
pub struct ResidualDenoiser {
    pub action_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    input: Linear,
    blocks: Vec<(LayerNorm, Linear, Linear)>,
    out_ln: LayerNorm,
    out: Linear,
}

impl ResidualDenoiser {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        action_dim: usize,
        cond_dim: usize,
        hidden: usize,
        n_blocks: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if action_dim == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("denoiser dims must be positive".into()));
        }
        let input = Linear::new(store, &format!("{prefix}.in"), action_dim + cond_dim + TIME_EMB_DIM, hidden, rng)?;
        let blocks = (0..n_blocks)
            .map(|i| {
                Ok((
                    LayerNorm::new(store, &format!("{prefix}.block{i}.ln"), hidden)?,
                    Linear::new(store, &format!("{prefix}.block{i}.fc0"), hidden, hidden, rng)?,
                    Linear::new(store, &format!("{prefix}.block{i}.fc1"), hidden, hidden, rng)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(ResidualDenoiser {
            action_dim,
            cond_dim,
            hidden,
            input,
            blocks,
            out_ln: LayerNorm::new(store, &format!("{prefix}.out_ln"), hidden)?,
            out: Linear::new(store, &format!("{prefix}.out"), hidden, action_dim, rng)?,
        })
    }

    /// `a_k: [B, A]`, `cond: [B, C]`, `kemb: [B, E]` → predicted noise `[B, A]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, a_k: Var, cond: Var, kemb: Var) -> Result<Var> {
        let b = g.value(a_k).rows();
        for (v, cols, what) in [(a_k, self.action_dim, "noisy actions"), (cond, self.cond_dim, "condition"), (kemb, TIME_EMB_DIM, "step embedding")] {
            let s = g.value(v).shape();
            if s != [b, cols] {
                return Err(Error::shape("denoiser", format!("{what} {s:?}, expected [{b}, {cols}]")));
            }
        }
        let x = g.concat(&[a_k, cond, kemb], Axis::Cols)?;
        let h = self.input.forward(g, x)?;
        let mut h = g.relu(h);
        for (ln, fc0, fc1) in &self.blocks {
            let z = ln.forward(g, h)?;
            let z = fc0.forward(g, z)?;
            let z = g.relu(z);
            let z = fc1.forward(g, z)?;
            h = g.add(h, z)?;
        }
        let z = self.out_ln.forward(g, h)?;
        self.out.forward(g, z)
    }
}

/// Per-sample diffusion steps (uniform over `1..=K`) and standard normal noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub ks: Vec<usize>,
    /// `[B, A]` row-major.
    pub eps: Vec<f64>,
}

pub fn draw_noise(rng: &mut impl Rng, batch: usize, action_dim: usize, schedule: &DiffusionSchedule) -> NoiseDraw {
    let ks = (0..batch).map(|_| rng.gen_range(1..=schedule.k)).collect();
    let eps = (0..batch * action_dim).map(|_| StandardNormal.sample(rng)).collect();
    NoiseDraw { ks, eps }
}

/// Noisy sequences `A_k` for every row of `a0` (`[B, A]` row-major).
pub fn noisy_batch(a0: &[f64], action_dim: usize, draw: &NoiseDraw, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    if a0.len() != draw.eps.len() || a0.len() != draw.ks.len() * action_dim {
        return Err(Error::LengthMismatch {
            context: "action batch".into(),
            expected: draw.ks.len() * action_dim,
            actual: a0.len(),
        });
    }
    let mut out = Vec::with_capacity(a0.len());
    for (i, &k) in draw.ks.iter().enumerate() {
        let r = i * action_dim..(i + 1) * action_dim;
        out.extend(noise_with(&a0[r.clone()], schedule.alpha_bar(k), &draw.eps[r])?);
    }
    Ok(out)
}

fn embeddings(ks: &[usize]) -> Vec<f64> {
    ks.iter().flat_map(|&k| timestep_embedding(k, TIME_EMB_DIM)).collect()
}

/// Noise-prediction loss in a graph: squared error summed over the action
/// dims, averaged over the batch. `cond` may carry gradients into an encoder.
pub fn denoise_loss<T: Real>(
    g: &mut Graph<'_, T>,
    den: &ResidualDenoiser,
    a0: &[f64],
    cond: Var,
    draw: &NoiseDraw,
    schedule: &DiffusionSchedule,
) -> Result<Var> {
    let (b, a) = (draw.ks.len(), den.action_dim);
    let ak = noisy_batch(a0, a, draw, schedule)?;
    let ak = g.constant(Tensor::from_f64(&[b, a], &ak)?);
    let kemb = g.constant(Tensor::from_f64(&[b, TIME_EMB_DIM], &embeddings(&draw.ks))?);
    let eps = g.constant(Tensor::from_f64(&[b, a], &draw.eps)?);
    let pred = den.forward(g, ak, cond, kemb)?;
    let mse = g.mse(pred, eps)?;
    Ok(g.scale(mse, a as f64))
}

/// The same loss for any [`Denoiser`], evaluated sample by sample. `conds`
/// holds one condition row per sample.
pub fn training_loss<D: Denoiser + ?Sized>(
    den: &D,
    a0: &[f64],
    conds: &[f64],
    action_dim: usize,
    draw: &NoiseDraw,
    schedule: &DiffusionSchedule,
) -> Result<f64> {
    let b = draw.ks.len();
    if b == 0 || conds.len() % b != 0 {
        return Err(Error::InvalidArgument("condition rows do not match the batch".into()));
    }
    let c = conds.len() / b;
    let ak = noisy_batch(a0, action_dim, draw, schedule)?;
    let mut total = 0.0;
    for i in 0..b {
        let r = i * action_dim..(i + 1) * action_dim;
        let pred = den.predict_noise(&ak[r.clone()], &conds[i * c..(i + 1) * c], draw.ks[i])?;
        total += pred.iter().zip(&draw.eps[r]).map(|(p, e)| (p - e) * (p - e)).sum::<f64>();
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite diffusion loss {loss}")));
    }
    Ok(loss)
}

/// A [`ResidualDenoiser`] paired with its parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundDenoiser<'a, T> {
    pub net: &'a ResidualDenoiser,
    pub store: &'a ParamStore<T>,
}

impl<T: Real> Denoiser for BoundDenoiser<'_, T> {
    fn predict_noise(&self, a_k: &[f64], cond: &[f64], k: usize) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(self.store);
        let x = g.constant(Tensor::from_f64(&[1, a_k.len()], a_k)?);
        let c = g.constant(Tensor::from_f64(&[1, cond.len()], cond)?);
        let e = g.constant(Tensor::from_f64(&[1, TIME_EMB_DIM], &timestep_embedding(k, TIME_EMB_DIM))?);
        let y = self.net.forward(&mut g, x, c, e)?;
        Ok(g.value(y).to_f64_vec())
    }
}
