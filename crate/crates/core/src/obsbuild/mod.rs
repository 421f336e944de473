//! Interaction-aware observations, min-max normalization and episode files.

mod episode;
mod normalizer;

pub use episode::{read_episode, write_episode, EpisodeHeader, EpisodePack, EPISODE_MAGIC, EPISODE_VERSION, STREAM_ORDER};
pub use normalizer::{fit_normalizer, Normalizer, Range, Stream};

use crate::error::{Error, Result};
use crate::pcgeom::PointSet;
use crate::se3kin::{fk_pointcloud, pose_apply, JointVector, KinematicChain, Pose};

/// One time step as seen by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub obj_pc: PointSet,
    pub hand_pc: PointSet,
    pub arm_state: Vec<f64>,
    pub hand_state: Vec<f64>,
}

/// Where the hand cloud comes from: which links count as the hand and their
/// canonical surface samples.
#[derive(Debug, Clone, Copy)]
pub struct HandSpec<'a> {
    pub chain: &'a KinematicChain,
    pub link_samples: &'a [PointSet],
    pub hand_links: &'a [usize],
    pub n_points: usize,
}

/// Object cloud = `obj_pose` applied to the centered canonical cloud; hand cloud
/// = point-cloud FK over the hand links only. Both must end up with exactly
/// `n_points` points.
pub fn build_observation(
    canonical_obj: &PointSet,
    obj_pose: &Pose,
    hand: HandSpec<'_>,
    q_arm: &[f64],
    q_hand: &[f64],
) -> Result<Observation> {
    if q_arm.len() + q_hand.len() != hand.chain.num_joints() {
        return Err(Error::LengthMismatch {
            context: "arm + hand joints".into(),
            expected: hand.chain.num_joints(),
            actual: q_arm.len() + q_hand.len(),
        });
    }
    let values: Vec<f64> = q_arm.iter().chain(q_hand).copied().collect();
    let q = JointVector::new(hand.chain, &values)?;
    let obj_pc = pose_apply(obj_pose, canonical_obj)?;
    let hand_pc = fk_pointcloud(hand.chain, &q, hand.link_samples, Some(hand.hand_links), hand.n_points)?;
    for (name, pc) in [("object cloud", &obj_pc), ("hand cloud", &hand_pc)] {
        if pc.len() != hand.n_points {
            return Err(Error::LengthMismatch {
                context: name.into(),
                expected: hand.n_points,
                actual: pc.len(),
            });
        }
    }
    let n_arm = q_arm.len();
    Ok(Observation {
        obj_pc,
        hand_pc,
        arm_state: q.values()[..n_arm].to_vec(),
        hand_state: q.values()[n_arm..].to_vec(),
    })
}
