//! Conditional diffusion over action sequences: noise schedules, the
//! deterministic strided sampler, a residual noise predictor and
//! receding-horizon execution in the toy environment.

mod denoiser;
mod rollout;
mod schedule;
mod train;


pub use denoiser::{
    denoise_loss, draw_noise, noisy_batch, timestep_embedding, training_loss, BoundDenoiser, NoiseDraw,
    ResidualDenoiser, TIME_EMB_DIM,
};
pub use rollout::{rollout_policy, CorrFrameEncoder, FrameEncoder, PolicyRuntime, RolloutConfig, RolloutRecord};
pub use schedule::{
    ddim_sample, ddim_timesteps, ddim_trajectory, forward_noise, initial_noise, make_schedule, noise_with, Denoiser,
    DiffusionSchedule, ScheduleKind,
};
pub use train::{
    frame_features, interleave_actions, train_policy, PolicyConfig, PolicyDataset, PolicyEpoch, PolicySample,
    PolicyState, PolicyTrainOptions, POLICY_CHECKPOINT_KIND,
};
