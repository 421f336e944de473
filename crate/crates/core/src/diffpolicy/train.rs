use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::denoiser::{denoise_loss, draw_noise, ResidualDenoiser};
use super::schedule::{make_schedule, DiffusionSchedule, ScheduleKind};
use crate::corrnet::{action_chunk, frame_tensors, CorrNet, EncoderConfig, FrameTensors};
use crate::error::{Error, Result};
use crate::nncore::{component_rng, cosine_lr, AdamW, AdamWConfig, Axis, Checkpoint, Graph, ParamStore, RngStream, Tensor};
use crate::obsbuild::{EpisodePack, Normalizer};

pub const POLICY_CHECKPOINT_KIND: &str = "policy";
const ENCODER_PREFIX: &str = "corr.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub inference_steps: usize,
    pub horizon: usize,
    pub n_obs_steps: usize,
    pub n_action_steps: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            schedule: ScheduleKind::SquaredCosine,
            diffusion_steps: 100,
            inference_steps: 10,
            horizon: 12,
            n_obs_steps: 4,
            n_action_steps: 6,
            hidden: 512,
            blocks: 2,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.horizon == 0 || self.n_obs_steps == 0 || self.hidden == 0 {
            return bad("horizon, n_obs_steps and hidden must be positive".into());
        }
        if self.n_action_steps == 0 || self.n_action_steps > self.horizon {
            return bad(format!("n_action_steps must be in 1..={}", self.horizon));
        }
        if self.diffusion_steps < 2 || self.inference_steps == 0 || self.inference_steps > self.diffusion_steps {
            return bad("need diffusion_steps >= 2 and 1 <= inference_steps <= diffusion_steps".into());
        }
        Ok(())
    }

    pub fn make_schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.diffusion_steps, self.schedule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    /// Learning-rate multiplier for encoder parameters.
    pub encoder_lr_scale: f64,
    /// Every this many epochs, run `finetune_batches` joint steps through the
    /// encoder and recompute the feature bank; 0 disables fine-tuning.
    pub finetune_every: usize,
    pub finetune_batches: usize,
    pub finetune_batch_size: usize,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for PolicyTrainOptions {
    fn default() -> Self {
        PolicyTrainOptions {
            epochs: 100,
            batch_size: 64,
            adamw: AdamWConfig::default(),
            encoder_lr_scale: 0.1,
            finetune_every: 50,
            finetune_batches: 8,
            finetune_batch_size: 4,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

/// History frame indices and flattened `H × (Da + Dh)` target.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub frames: Vec<usize>,
    pub target: Vec<f64>,
}

/// Normalized frames of every episode plus one training sample per step.
#[derive(Debug, Clone)]
pub struct PolicyDataset {
    pub frames: Vec<FrameTensors<f32>>,
    pub samples: Vec<PolicySample>,
    pub action_dim: usize,
}

/// Interleaves per-step arm and hand rows: `[arm_0, hand_0, arm_1, …]`.
pub fn interleave_actions(arm: &[f64], hand: &[f64], da: usize, dh: usize) -> Vec<f64> {
    arm.chunks(da).zip(hand.chunks(dh)).flat_map(|(a, h)| a.iter().chain(h).copied()).collect()
}

impl PolicyDataset {
    /// History for step `t` is `t−n_obs+1 ..= t`, clamped at the episode start.
    pub fn build(packs: &[EpisodePack], norm: &Normalizer, config: &PolicyConfig) -> Result<Self> {
        let mut frames = Vec::new();
        let mut samples = Vec::new();
        let mut action_dim = 0;
        for pack in packs {
            let (da, dh) = (pack.header.da, pack.header.dh);
            action_dim = config.horizon * (da + dh);
            let base = frames.len();
            for t in 0..pack.steps() {
                frames.push(frame_tensors(pack, t, norm)?);
            }
            for t in 0..pack.steps() {
                let hist = (0..config.n_obs_steps)
                    .map(|j| base + (t + j + 1).saturating_sub(config.n_obs_steps))
                    .collect();
                let (arm, hand) = action_chunk(pack, t, config.horizon, norm)?;
                samples.push(PolicySample {
                    frames: hist,
                    target: interleave_actions(&arm, &hand, da, dh),
                });
            }
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no episode steps to train on".into()));
        }
        Ok(PolicyDataset {
            frames,
            samples,
            action_dim,
        })
    }
}

/// One row of the policy training log; epoch 0 is the untrained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEpoch {
    pub epoch: usize,
    pub loss: f64,
}

/// Encoder plus denoiser sharing one parameter store (`corr.*`, `policy.*`).
#[derive(Debug, Clone)]
pub struct PolicyState {
    pub corr: CorrNet,
    pub den: ResidualDenoiser,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub config: PolicyConfig,
    pub schedule: DiffusionSchedule,
    pub epoch: usize,
    pub history: Vec<PolicyEpoch>,
}

/// Frame features `[1, F]` from the encoder, forward only.
pub fn frame_features(corr: &CorrNet, store: &ParamStore<f32>, f: &FrameTensors<f32>) -> Result<Vec<f64>> {
    let mut g = Graph::with_params(store);
    let v = live_features(&mut g, corr, f)?;
    Ok(g.value(v).to_f64_vec())
}

fn live_features(g: &mut Graph<'_, f32>, corr: &CorrNet, f: &FrameTensors<f32>) -> Result<crate::nncore::Var> {
    let o = g.constant(f.obj.clone());
    let h = g.constant(f.hand.clone());
    let a = g.constant(f.arm.clone());
    let s = g.constant(f.hand_state.clone());
    let fv = corr.features(g, o, h, a, s)?;
    corr.condition(g, &fv)
}

impl PolicyState {
    /// Random encoder unless `encoder` (a pretraining checkpoint) is given.
    pub fn new(
        enc: EncoderConfig,
        da: usize,
        dh: usize,
        config: PolicyConfig,
        opts: &PolicyTrainOptions,
        encoder: Option<&Checkpoint>,
    ) -> Result<Self> {
        config.validate()?;
        if enc.horizon != config.horizon {
            return Err(Error::InvalidArgument(format!(
                "encoder horizon {} differs from policy horizon {}",
                enc.horizon, config.horizon
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = component_rng(opts.seed, RngStream::CorrInit);
        let corr = CorrNet::new(&mut store, "corr", enc, da, dh, &mut rng)?;
        if let Some(ckpt) = encoder {
            ckpt.load_params(&mut store)?;
        }
        let mut rng = component_rng(opts.seed, RngStream::PolicyInit);
        let cond_dim = config.n_obs_steps * corr.config.feature_dim();
        let den = ResidualDenoiser::new(
            &mut store,
            "policy.den",
            config.horizon * (da + dh),
            cond_dim,
            config.hidden,
            config.blocks,
            &mut rng,
        )?;
        if opts.freeze_encoder {
            store.set_frozen_prefix(ENCODER_PREFIX, true);
        }
        let mut opt = AdamW::new(opts.adamw);
        opt.set_lr_scale_prefix(&store, ENCODER_PREFIX, opts.encoder_lr_scale);
        let schedule = config.make_schedule()?;
        Ok(PolicyState {
            corr,
            den,
            store,
            opt,
            config,
            schedule,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self, normalizer: &Normalizer, opts: &PolicyTrainOptions, pretrained: bool) -> Checkpoint {
        let manifest = json!({
            "kind": POLICY_CHECKPOINT_KIND,
            "encoder": self.corr.config,
            "da": self.corr.da,
            "dh": self.corr.dh,
            "policy": self.config,
            "schedule": {"kind": self.schedule.kind, "K": self.schedule.k},
            "pretrained_encoder": pretrained,
            "epoch": self.epoch,
            "options": opts,
            "history": self.history,
            "normalizer": normalizer.to_json(),
        });
        Checkpoint::from_store(manifest, &self.store, None)
    }

    pub fn feature_bank(&self, data: &PolicyDataset) -> Result<Vec<Vec<f64>>> {
        data.frames.iter().map(|f| frame_features(&self.corr, &self.store, f)).collect()
    }

    fn gather(&self, data: &PolicyDataset, bank: &[Vec<f64>], idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut cond = Vec::new();
        let mut a0 = Vec::new();
        for &i in idx {
            let s = &data.samples[i];
            for &f in &s.frames {
                cond.extend_from_slice(&bank[f]);
            }
            a0.extend_from_slice(&s.target);
        }
        (cond, a0)
    }

    fn cond_dim(&self) -> usize {
        self.config.n_obs_steps * self.corr.config.feature_dim()
    }

    /// Mean loss over all samples with fixed noise, no parameter change.
    pub fn evaluate(&self, data: &PolicyDataset, bank: &[Vec<f64>], seed: u64) -> Result<f64> {
        let mut rng = component_rng(seed, RngStream::PolicyTrain);
        let idx: Vec<usize> = (0..data.samples.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(256) {
            let (cond, a0) = self.gather(data, bank, chunk);
            let draw = draw_noise(&mut rng, chunk.len(), data.action_dim, &self.schedule);
            let mut g = Graph::with_params(&self.store);
            let c = g.constant(Tensor::from_f64(&[chunk.len(), self.cond_dim()], &cond)?);
            let l = denoise_loss(&mut g, &self.den, &a0, c, &draw, &self.schedule)?;
            total += g.value(l).data()[0] as f64 * chunk.len() as f64;
        }
        Ok(total / data.samples.len() as f64)
    }

    fn finetune(&mut self, data: &PolicyDataset, bank: &[Vec<f64>], opts: &PolicyTrainOptions, rng: &mut impl Rng) -> Result<()> {
        let fdim = self.corr.config.feature_dim();
        for _ in 0..opts.finetune_batches {
            let idx: Vec<usize> = (0..opts.finetune_batch_size)
                .map(|_| rng.gen_range(0..data.samples.len()))
                .collect();
            let draw = draw_noise(rng, idx.len(), data.action_dim, &self.schedule);
            let mut a0 = Vec::new();
            let grads = {
                let mut g = Graph::with_params(&self.store);
                let mut rows = Vec::new();
                for &i in &idx {
                    let s = &data.samples[i];
                    let (last, older) = s.frames.split_last().expect("n_obs_steps >= 1");
                    let mut parts = Vec::new();
                    if !older.is_empty() {
                        let mut past = Vec::with_capacity(older.len() * fdim);
                        for &f in older {
                            past.extend_from_slice(&bank[f]);
                        }
                        parts.push(g.constant(Tensor::from_f64(&[1, past.len()], &past)?));
                    }
                    // gradients reach the encoder through the newest frame only
                    parts.push(live_features(&mut g, &self.corr, &data.frames[*last])?);
                    rows.push(g.concat(&parts, Axis::Cols)?);
                    a0.extend_from_slice(&s.target);
                }
                let cond = g.concat(&rows, Axis::Rows)?;
                let l = denoise_loss(&mut g, &self.den, &a0, cond, &draw, &self.schedule)?;
                check_loss(g.value(l).data()[0] as f64)?;
                g.backward(l)?;
                g.param_grads()
            };
            self.opt.step(&mut self.store, &grads)?;
        }
        Ok(())
    }
}

fn check_loss(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite policy loss {v}")))
    }
}

/// Trains until `opts.epochs` under a cosine learning-rate decay. Denoiser
/// steps read encoder features from a bank that is recomputed after each
/// fine-tuning round. Every epoch's randomness derives from `(seed, epoch)`.
pub fn train_policy(
    state: &mut PolicyState,
    data: &PolicyDataset,
    opts: &PolicyTrainOptions,
    mut on_epoch: impl FnMut(&PolicyEpoch) -> Result<()>,
) -> Result<()> {
    if opts.batch_size == 0 || (opts.finetune_every > 0 && opts.finetune_batch_size == 0) {
        return Err(Error::InvalidArgument("batch sizes must be positive".into()));
    }
    if data.action_dim != state.den.action_dim {
        return Err(Error::ShapeMismatch(format!(
            "dataset action length {} but the denoiser expects {}",
            data.action_dim, state.den.action_dim
        )));
    }
    let finetune = !opts.freeze_encoder && opts.finetune_every > 0 && opts.finetune_batches > 0;
    let mut bank = state.feature_bank(data)?;
    if state.epoch == 0 && state.history.is_empty() {
        let row = PolicyEpoch {
            epoch: 0,
            loss: state.evaluate(data, &bank, opts.seed)?,
        };
        state.history.push(row.clone());
        on_epoch(&row)?;
    }
    let cond_dim = state.cond_dim();
    while state.epoch < opts.epochs {
        let epoch = state.epoch + 1;
        let mut rng = component_rng(opts.seed.wrapping_add(epoch as u64), RngStream::PolicyTrain);
        state.opt.config.lr = cosine_lr(opts.adamw.lr, epoch, opts.epochs);
        let mut order: Vec<usize> = (0..data.samples.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let (cond, a0) = state.gather(data, &bank, batch);
            let draw = draw_noise(&mut rng, batch.len(), data.action_dim, &state.schedule);
            let grads = {
                let mut g = Graph::with_params(&state.store);
                let c = g.constant(Tensor::from_f64(&[batch.len(), cond_dim], &cond)?);
                let l = denoise_loss(&mut g, &state.den, &a0, c, &draw, &state.schedule)?;
                total += check_loss(g.value(l).data()[0] as f64)? * batch.len() as f64;
                g.backward(l)?;
                g.param_grads()
            };
            state.opt.step(&mut state.store, &grads)?;
        }
        // never right before the end, so the denoiser last trains on features
        // from the final encoder
        if finetune && epoch % opts.finetune_every == 0 && epoch < opts.epochs {
            state.finetune(data, &bank, opts, &mut rng)?;
            bank = state.feature_bank(data)?;
        }
        state.epoch = epoch;
        let row = PolicyEpoch {
            epoch,
            loss: total / data.samples.len() as f64,
        };
        state.history.push(row.clone());
        on_epoch(&row)?;
    }
    Ok(())
}
