use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corrnet::{EncoderConfig, PretrainOptions};
use crate::diffpolicy::{PolicyConfig, PolicyTrainOptions, ScheduleKind};
use crate::error::{Error, Result};
use crate::nncore::AdamWConfig;
use crate::pcgeom::Aabb;

/// Every tunable of the pipeline in one flat JSON document. Missing keys take
/// their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_points: usize,
    pub d: usize,
    pub heads: usize,
    pub state_dim: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub theta: f64,

    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub inference_steps: usize,
    pub horizon: usize,
    pub n_obs_steps: usize,
    pub n_action_steps: usize,
    pub hidden: usize,
    pub blocks: usize,

    pub weight_decay: f64,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    /// Frames drawn per pretraining epoch; 0 uses every training frame.
    pub frames_per_epoch: usize,
    /// The last this many episodes are held out during pretraining.
    pub val_episodes: usize,
    /// Every this many held-out frames is evaluated.
    pub val_stride: usize,

    pub policy_lr: f64,
    pub policy_epochs: usize,
    pub policy_batch_size: usize,
    pub encoder_lr_scale: f64,
    pub finetune_every: usize,
    pub finetune_batches: usize,
    pub finetune_batch_size: usize,

    pub expert_max_steps: usize,
    /// Std (m) of the perturbation added to executed expert arm targets.
    pub expert_noise: f64,
    /// Workspace box every generated point must lie in; `null` disables it.
    pub crop: Option<[[f64; 2]; 3]>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let pol = PolicyConfig::default();
        RunConfig {
            n_points: enc.n_points,
            d: enc.d,
            heads: enc.heads,
            state_dim: enc.state_dim,
            lambda: enc.lambda,
            gamma: enc.gamma,
            theta: enc.theta,
            schedule: pol.schedule,
            diffusion_steps: pol.diffusion_steps,
            inference_steps: pol.inference_steps,
            horizon: pol.horizon,
            n_obs_steps: pol.n_obs_steps,
            n_action_steps: pol.n_action_steps,
            hidden: pol.hidden,
            blocks: pol.blocks,
            weight_decay: AdamWConfig::default().weight_decay,
            pretrain_lr: 1e-3,
            pretrain_epochs: 10,
            pretrain_batch_size: 8,
            frames_per_epoch: 200,
            val_episodes: 5,
            val_stride: 4,
            policy_lr: 1e-3,
            policy_epochs: 100,
            policy_batch_size: 64,
            encoder_lr_scale: 0.1,
            finetune_every: 50,
            finetune_batches: 8,
            finetune_batch_size: 4,
            expert_max_steps: 200,
            expert_noise: 0.005,
            crop: Some([[-1.2, 1.2], [-1.2, 1.2], [-0.05, 0.05]]),
        }
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let s = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json_str(&s).map_err(|e| match e {
                    Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.policy().validate()?;
        let positive = [
            ("pretrain_batch_size", self.pretrain_batch_size),
            ("policy_batch_size", self.policy_batch_size),
            ("val_stride", self.val_stride),
            ("expert_max_steps", self.expert_max_steps),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("config `{k}` must be positive")));
        }
        for (k, v) in [
            ("pretrain_lr", self.pretrain_lr),
            ("policy_lr", self.policy_lr),
            ("weight_decay", self.weight_decay),
            ("encoder_lr_scale", self.encoder_lr_scale),
            ("expert_noise", self.expert_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("config `{k}` must be finite and >= 0")));
            }
        }
        if let Some(b) = self.crop {
            Aabb::new(b)?;
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            n_points: self.n_points,
            d: self.d,
            heads: self.heads,
            state_dim: self.state_dim,
            lambda: self.lambda,
            gamma: self.gamma,
            theta: self.theta,
            horizon: self.horizon,
        }
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            schedule: self.schedule,
            diffusion_steps: self.diffusion_steps,
            inference_steps: self.inference_steps,
            horizon: self.horizon,
            n_obs_steps: self.n_obs_steps,
            n_action_steps: self.n_action_steps,
            hidden: self.hidden,
            blocks: self.blocks,
        }
    }

    fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn pretrain_options(&self, seed: u64) -> PretrainOptions {
        PretrainOptions {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            frames_per_epoch: self.frames_per_epoch,
            adamw: self.adamw(self.pretrain_lr),
            seed,
        }
    }

    pub fn policy_options(&self, seed: u64, freeze_encoder: bool) -> PolicyTrainOptions {
        PolicyTrainOptions {
            epochs: self.policy_epochs,
            batch_size: self.policy_batch_size,
            adamw: self.adamw(self.policy_lr),
            encoder_lr_scale: self.encoder_lr_scale,
            finetune_every: self.finetune_every,
            finetune_batches: self.finetune_batches,
            finetune_batch_size: self.finetune_batch_size,
            freeze_encoder,
            seed,
        }
    }
}
