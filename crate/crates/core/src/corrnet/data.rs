use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::nncore::{Real, Tensor};
use crate::obsbuild::{EpisodePack, Normalizer, Observation, Stream};
use crate::pcgeom::ground_truth_contact;

/// Neighbors used for object normals when building contact targets.
pub const NORMAL_K: usize = 10;

/// One normalized frame as network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensors<T> {
    /// `[N, 3]`
    pub obj: Tensor<T>,
    /// `[N, 3]`
    pub hand: Tensor<T>,
    /// `[1, Da]`
    pub arm: Tensor<T>,
    /// `[1, Dh]`
    pub hand_state: Tensor<T>,
}

impl<T: Real> FrameTensors<T> {
    pub fn from_observation(obs: &Observation, norm: &Normalizer) -> Result<Self> {
        let flat = |pc: &crate::pcgeom::PointSet| -> Vec<f64> { pc.points().iter().flatten().copied().collect() };
        let obj = norm.normalize(&flat(&obs.obj_pc), Stream::ObjPc)?;
        let hand = norm.normalize(&flat(&obs.hand_pc), Stream::HandPc)?;
        let arm = norm.normalize(&obs.arm_state, Stream::ArmState)?;
        let hs = norm.normalize(&obs.hand_state, Stream::HandState)?;
        Ok(FrameTensors {
            obj: Tensor::from_f64(&[obs.obj_pc.len(), 3], &obj)?,
            hand: Tensor::from_f64(&[obs.hand_pc.len(), 3], &hand)?,
            arm: Tensor::from_f64(&[1, arm.len()], &arm)?,
            hand_state: Tensor::from_f64(&[1, hs.len()], &hs)?,
        })
    }

    pub fn cast<U: Real>(&self) -> FrameTensors<U> {
        FrameTensors {
            obj: self.obj.cast(),
            hand: self.hand.cast(),
            arm: self.arm.cast(),
            hand_state: self.hand_state.cast(),
        }
    }
}

pub fn frame_tensors<T: Real>(pack: &EpisodePack, t: usize, norm: &Normalizer) -> Result<FrameTensors<T>> {
    FrameTensors::from_observation(&pack.observation(t)?, norm)
}

/// Normalized arm and hand actions for steps `t..t + horizon`, flattened
/// row-major; steps past the end repeat the last recorded action.
pub fn action_chunk(pack: &EpisodePack, t: usize, horizon: usize, norm: &Normalizer) -> Result<(Vec<f64>, Vec<f64>)> {
    let steps = pack.steps();
    if t >= steps {
        return Err(Error::InvalidArgument(format!("step {t} out of range for {steps} steps")));
    }
    let mut arm = Vec::with_capacity(horizon * pack.header.da);
    let mut hand = Vec::with_capacity(horizon * pack.header.dh);
    for k in 0..horizon {
        let s = (t + k).min(steps - 1);
        arm.extend(pack.arm_action_at(s)?);
        hand.extend(pack.hand_action_at(s)?);
    }
    Ok((norm.normalize(&arm, Stream::ArmAction)?, norm.normalize(&hand, Stream::HandAction)?))
}

/// Inputs and targets for one pretraining frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSample<T> {
    pub frame: FrameTensors<T>,
    /// `[N, 1]` ground-truth contact map.
    pub contact: Tensor<T>,
    /// `[1, H·Da]`
    pub arm_seq: Tensor<T>,
    /// `[1, H·Dh]`
    pub hand_seq: Tensor<T>,
}

impl<T: Real> PretrainSample<T> {
    pub fn cast<U: Real>(&self) -> PretrainSample<U> {
        PretrainSample {
            frame: self.frame.cast(),
            contact: self.contact.cast(),
            arm_seq: self.arm_seq.cast(),
            hand_seq: self.hand_seq.cast(),
        }
    }
}

/// Every `stride`-th step across the episodes, in order, as a pretraining
/// sample. Contact targets come from the unnormalized clouds.
pub fn pretrain_samples<T: Real>(
    packs: &[EpisodePack],
    norm: &Normalizer,
    config: &EncoderConfig,
    stride: usize,
) -> Result<Vec<PretrainSample<T>>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("sample stride must be positive".into()));
    }
    let frames = packs.iter().flat_map(|p| (0..p.steps()).map(move |t| (p, t)));
    let mut out = Vec::new();
    for (pack, t) in frames.step_by(stride) {
        let obs = pack.observation(t)?;
        let c = ground_truth_contact(&obs.obj_pc, &obs.hand_pc, NORMAL_K, config.gamma, config.theta)?;
        let (arm, hand) = action_chunk(pack, t, config.horizon, norm)?;
        out.push(PretrainSample {
            frame: FrameTensors::from_observation(&obs, norm)?,
            contact: Tensor::from_f64(&[c.len(), 1], c.values())?,
            arm_seq: Tensor::from_f64(&[1, arm.len()], &arm)?,
            hand_seq: Tensor::from_f64(&[1, hand.len()], &hand)?,
        });
    }
    Ok(out)
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
