use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    SquaredCosine,
    Linear,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::SquaredCosine => "squared_cosine",
            ScheduleKind::Linear => "linear",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_cosine" => Ok(ScheduleKind::SquaredCosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::UnknownSchedule(other.to_string())),
        }
    }
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

/// Cumulative signal coefficients `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_K`; index 0 is
/// clean data.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub k: usize,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step `α_k = ᾱ_k / ᾱ_{k-1}` for `k ≥ 1`.
    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha_bar[k] / self.alpha_bar[k - 1]
    }

    /// Coefficients of `A_{prev} = a·(A_k − g·ε) + s·ε` for a deterministic
    /// jump from `k` to `prev`, returned as `(a, g, s)`. Expanding the update
    /// through the clean-sample estimate gives `a = √(ᾱ_prev/ᾱ_k)`,
    /// `g = √(1−ᾱ_k)` and `s = √(1−ᾱ_prev)`.
    pub fn ddim_coefficients(&self, k: usize, prev: usize) -> (f64, f64, f64) {
        let (ak, ap) = (self.alpha_bar[k], self.alpha_bar[prev]);
        ((ap / ak).sqrt(), (1.0 - ak).sqrt(), (1.0 - ap).sqrt())
    }
}

pub fn make_schedule(k: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("schedule needs K >= 2, got {k}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::SquaredCosine => {
            let f = |t: f64| (((t / k as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=k).map(|i| (1.0 - f(i as f64) / f(i as f64 - 1.0)).min(MAX_BETA)).collect()
        }
        ScheduleKind::Linear => {
            // the usual 1e-4..0.02 over 1000 steps, rescaled to K steps
            let scale = 1000.0 / k as f64;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            (0..k)
                .map(|i| (lo + (hi - lo) * i as f64 / (k - 1) as f64).min(MAX_BETA))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(k + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(DiffusionSchedule { kind, k, alpha_bar })
}

/// `√ᾱ·A0 + √(1−ᾱ)·ε`.
pub fn noise_with(a0: &[f64], alpha_bar: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if a0.len() != eps.len() {
        return Err(Error::LengthMismatch {
            context: "noise".into(),
            expected: a0.len(),
            actual: eps.len(),
        });
    }
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(a0.iter().zip(eps).map(|(a, e)| s * a + n * e).collect())
}

pub fn forward_noise(a0: &[f64], k: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    if k > schedule.k {
        return Err(Error::InvalidArgument(format!("step {k} beyond K={}", schedule.k)));
    }
    noise_with(a0, schedule.alpha_bar(k), eps)
}

/// Noise predictor `ε_θ(A_k, cond, k)` for a single flattened sequence.
pub trait Denoiser {
    fn predict_noise(&self, a_k: &[f64], cond: &[f64], k: usize) -> Result<Vec<f64>>;
}

/// Strided inference steps `1 + j·⌊K/n⌋` for `j = n−1 … 0`, highest first.
pub fn ddim_timesteps(schedule: &DiffusionSchedule, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > schedule.k {
        return Err(Error::InvalidArgument(format!(
            "inference steps must be in 1..={}, got {n_steps}",
            schedule.k
        )));
    }
    let ratio = schedule.k / n_steps;
    Ok((0..n_steps).rev().map(|j| 1 + j * ratio).collect())
}

pub fn initial_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Unclipped iterates of the deterministic sampler from `start` over the
/// descending steps `ks`, finishing at step 0. Element 0 is `start`.
pub fn ddim_trajectory<D: Denoiser + ?Sized>(
    start: Vec<f64>,
    cond: &[f64],
    denoiser: &D,
    schedule: &DiffusionSchedule,
    ks: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if ks.is_empty() || ks.windows(2).any(|w| w[0] <= w[1]) || ks.iter().any(|&k| k == 0 || k > schedule.k) {
        return Err(Error::InvalidArgument(format!("invalid step subset {ks:?}")));
    }
    let mut out = vec![start];
    for (i, &k) in ks.iter().enumerate() {
        let prev = ks.get(i + 1).copied().unwrap_or(0);
        let a = out.last().expect("non-empty");
        let eps = denoiser.predict_noise(a, cond, k)?;
        if eps.len() != a.len() {
            return Err(Error::LengthMismatch {
                context: "predicted noise".into(),
                expected: a.len(),
                actual: eps.len(),
            });
        }
        let (ab_k, ab_p) = (schedule.alpha_bar(k), schedule.alpha_bar(prev));
        let (sk, nk) = (ab_k.sqrt(), (1.0 - ab_k).sqrt());
        let (sp, np) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
        let next: Vec<f64> = a
            .iter()
            .zip(&eps)
            .map(|(&x, &e)| {
                let x0 = (x - nk * e) / sk;
                sp * x0 + np * e
            })
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler iterate at step {k}")));
        }
        out.push(next);
    }
    Ok(out)
}

/// Seeded Gaussian start, `n_steps` strided deterministic updates, then
/// clipping to `[-1, 1]`.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    cond: &[f64],
    len: usize,
    denoiser: &D,
    schedule: &DiffusionSchedule,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let ks = ddim_timesteps(schedule, n_steps)?;
    let traj = ddim_trajectory(initial_noise(len, seed), cond, denoiser, schedule, &ks)?;
    Ok(traj
        .last()
        .expect("non-empty")
        .iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect())
}
