use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::denoiser::{BoundDenoiser, ResidualDenoiser};
use super::schedule::{ddim_sample, DiffusionSchedule, Denoiser};
use super::train::{frame_features, PolicyConfig, POLICY_CHECKPOINT_KIND};
use crate::corrnet::{CorrNet, EncoderConfig, FrameTensors};
use crate::error::{Error, Result};
use crate::nncore::{Checkpoint, ParamStore};
use crate::obsbuild::{Normalizer, Observation, Stream};
use crate::toyenv::{self, EnvState, ToyHandModel, ARM_DIM, HAND_DIM};

/// Maps one observation to its conditioning features.
pub trait FrameEncoder {
    fn encode(&self, obs: &Observation) -> Result<Vec<f64>>;
}

/// The correspondence encoder as a [`FrameEncoder`] on raw observations.
#[derive(Debug, Clone, Copy)]
pub struct CorrFrameEncoder<'a> {
    pub net: &'a CorrNet,
    pub store: &'a ParamStore<f32>,
    pub normalizer: &'a Normalizer,
}

impl FrameEncoder for CorrFrameEncoder<'_> {
    fn encode(&self, obs: &Observation) -> Result<Vec<f64>> {
        let f = FrameTensors::<f32>::from_observation(obs, self.normalizer)?;
        frame_features(self.net, self.store, &f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub n_obs_steps: usize,
    pub n_action_steps: usize,
    pub inference_steps: usize,
    pub max_steps: usize,
    pub sampler_seed: u64,
}

impl RolloutConfig {
    pub fn from_policy(p: &PolicyConfig, max_steps: usize, sampler_seed: u64) -> Self {
        RolloutConfig {
            horizon: p.horizon,
            n_obs_steps: p.n_obs_steps,
            n_action_steps: p.n_action_steps,
            inference_steps: p.inference_steps,
            max_steps,
            sampler_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub env_seed: u64,
    pub success: bool,
    pub steps: usize,
    /// `states[0]` is the reset state; one more per executed action.
    pub states: Vec<EnvState>,
    /// Executed `(arm, hand)` targets.
    pub actions: Vec<([f64; 3], [f64; 2])>,
    /// Seconds since the start of the rollout after each executed step.
    pub wall_clock: Vec<f64>,
}

impl RolloutRecord {
    pub fn final_distance(&self) -> f64 {
        self.states.last().map(|s| s.goal_distance()).unwrap_or(f64::NAN)
    }

    /// Executed steps per wall-clock second.
    pub fn step_rate(&self) -> f64 {
        match self.wall_clock.last() {
            Some(&t) if t > 0.0 => self.steps as f64 / t,
            _ => 0.0,
        }
    }
}

/// Receding-horizon loop: condition on the last `n_obs_steps` frames (the
/// first frame repeated at the start), sample `horizon` actions, execute the
/// first `n_action_steps`, repeat until success or `max_steps`.
pub fn rollout_policy<E: FrameEncoder + ?Sized, D: Denoiser + ?Sized>(
    model: &ToyHandModel,
    env_seed: u64,
    encoder: &E,
    denoiser: &D,
    schedule: &DiffusionSchedule,
    normalizer: &Normalizer,
    cfg: &RolloutConfig,
) -> Result<RolloutRecord> {
    if cfg.n_obs_steps == 0 || cfg.n_action_steps == 0 || cfg.n_action_steps > cfg.horizon {
        return Err(Error::InvalidArgument("invalid rollout step counts".into()));
    }
    let start = Instant::now();
    let mut plan_rng = ChaCha8Rng::seed_from_u64(cfg.sampler_seed);
    let mut state = toyenv::reset(env_seed);
    let mut rec = RolloutRecord {
        env_seed,
        success: false,
        steps: 0,
        states: vec![state.clone()],
        actions: Vec::new(),
        wall_clock: Vec::new(),
    };
    let first = encoder.encode(&toyenv::render_observation_only(model, &state)?)?;
    let mut history: VecDeque<Vec<f64>> = std::iter::repeat_n(first, cfg.n_obs_steps).collect();
    let width = ARM_DIM + HAND_DIM;
    'outer: while !toyenv::success(&state) && state.step < cfg.max_steps {
        let cond: Vec<f64> = history.iter().flatten().copied().collect();
        let plan = ddim_sample(&cond, cfg.horizon * width, denoiser, schedule, cfg.inference_steps, plan_rng.gen())?;
        for row in plan.chunks(width).take(cfg.n_action_steps) {
            let arm = normalizer.denormalize(&row[..ARM_DIM], Stream::ArmAction)?;
            let hand = normalizer.denormalize(&row[ARM_DIM..], Stream::HandAction)?;
            if arm.iter().chain(&hand).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("policy action at step {}", state.step)));
            }
            state = toyenv::step(model, &state, &arm, &hand)?;
            rec.actions.push(([arm[0], arm[1], arm[2]], [hand[0], hand[1]]));
            rec.states.push(state.clone());
            rec.steps = state.step;
            let done = toyenv::success(&state) || state.step >= cfg.max_steps;
            if !done {
                history.pop_front();
                history.push_back(encoder.encode(&toyenv::render_observation_only(model, &state)?)?);
            }
            rec.wall_clock.push(start.elapsed().as_secs_f64());
            if done {
                break 'outer;
            }
        }
    }
    rec.success = toyenv::success(&state);
    Ok(rec)
}

/// A trained policy loaded for evaluation.
#[derive(Debug, Clone)]
pub struct PolicyRuntime {
    pub corr: CorrNet,
    pub den: ResidualDenoiser,
    pub store: ParamStore<f32>,
    pub config: PolicyConfig,
    pub schedule: DiffusionSchedule,
    pub normalizer: Normalizer,
    pub manifest: serde_json::Value,
}

impl PolicyRuntime {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.manifest;
        if m["kind"] != POLICY_CHECKPOINT_KIND {
            return Err(Error::Format(format!("not a policy checkpoint (kind {})", m["kind"])));
        }
        let missing = |f: &str| Error::Format(format!("policy checkpoint manifest lacks `{f}`"));
        let enc: EncoderConfig = serde_json::from_value(m["encoder"].clone())?;
        let config: PolicyConfig = serde_json::from_value(m["policy"].clone())?;
        config.validate()?;
        let da = m["da"].as_u64().ok_or_else(|| missing("da"))? as usize;
        let dh = m["dh"].as_u64().ok_or_else(|| missing("dh"))? as usize;
        let normalizer = Normalizer::from_json(&m["normalizer"])?;
        let mut store = ParamStore::new();
        // values are overwritten below; the seed only fixes shapes
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let corr = CorrNet::new(&mut store, "corr", enc, da, dh, &mut rng)?;
        let den = ResidualDenoiser::new(
            &mut store,
            "policy.den",
            config.horizon * (da + dh),
            config.n_obs_steps * corr.config.feature_dim(),
            config.hidden,
            config.blocks,
            &mut rng,
        )?;
        ckpt.load_params(&mut store)?;
        let schedule = config.make_schedule()?;
        Ok(PolicyRuntime {
            corr,
            den,
            store,
            config,
            schedule,
            normalizer,
            manifest: m.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn encoder(&self) -> CorrFrameEncoder<'_> {
        CorrFrameEncoder {
            net: &self.corr,
            store: &self.store,
            normalizer: &self.normalizer,
        }
    }

    pub fn denoiser(&self) -> BoundDenoiser<'_, f32> {
        BoundDenoiser {
            net: &self.den,
            store: &self.store,
        }
    }

    pub fn rollout(&self, model: &ToyHandModel, env_seed: u64, max_steps: usize, sampler_seed: u64) -> Result<RolloutRecord> {
        let cfg = RolloutConfig::from_policy(&self.config, max_steps, sampler_seed);
        rollout_policy(model, env_seed, &self.encoder(), &self.denoiser(), &self.schedule, &self.normalizer, &cfg)
    }
}
