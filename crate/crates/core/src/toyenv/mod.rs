//! Deterministic planar pushing: a disc on a table, a palm on an x/y/yaw
//! gantry and two revolute fingers, with a scripted expert.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nncore::{component_rng, RngStream};
use crate::obsbuild::{build_observation, EpisodeHeader, EpisodePack, HandSpec, Observation};
use crate::pcgeom::{aligned_distance, contact_map, estimate_normals, ContactMap, NormalSet, PointSet};
use crate::se3kin::{
    posed_link_cloud, sample_chain_surfaces, sample_link_surface, Geometry, Joint, JointType, JointVector,
    KinematicChain, Link, Pose, Shape,
};

pub const TASK_NAME: &str = "planar-push";
pub const DT: f64 = 0.2;
pub const ARM_DIM: usize = 3;
pub const HAND_DIM: usize = 2;
pub const HAND_LINKS: [usize; 2] = [4, 5];

pub const DISC_RADIUS: f64 = 0.05;
pub const DISC_HEIGHT: f64 = 0.02;
pub const GOAL: [f64; 2] = [0.0, 0.0];
pub const SUCCESS_RADIUS: f64 = 0.02;
/// Start region of the disc centre: x range, y range.
pub const START_RECT: [[f64; 2]; 2] = [[-0.1, 0.1], [0.10, 0.20]];
pub const START_YAW: f64 = FRAC_PI_6;
pub const WORKSPACE: [[f64; 2]; 2] = [[-0.5, 0.5], [-0.5, 0.5]];

pub const HOME_ARM: [f64; 3] = [0.0, 0.35, -FRAC_PI_2];
pub const MAX_LINEAR_STEP: f64 = 0.01;
pub const MAX_ANGULAR_STEP: f64 = 0.15;

pub const FINGER_RADIUS: f64 = 0.01;
pub const FINGER_LENGTH: f64 = 0.06;
pub const FINGER_OFFSET: f64 = 0.045;

pub const CONTACT_GAMMA: f64 = 1.0;
pub const CONTACT_THETA: f64 = 10.0;
const NORMAL_K: usize = 10;
const SURFACE_SEED: u64 = 0x5eed_d15c;
const PUSH_ITERATIONS: usize = 8;

// Expert geometry: palm-to-disc-centre distance just short of fingertip
// contact, and the stand-off used while lining up.
const PUSH_OFFSET: f64 = 0.098;
const APPROACH_OFFSET: f64 = 0.17;
const MAX_INTRUSION: f64 = 0.02;
/// Yaw noise (rad) per metre of x/y noise when recording perturbed demos.
pub const YAW_NOISE_RATIO: f64 = 5.0;

/// Kinematics, surface samples and canonical object cloud.
#[derive(Debug, Clone)]
pub struct ToyHandModel {
    pub chain: KinematicChain,
    pub link_samples: Vec<PointSet>,
    pub object_cloud: PointSet,
    pub object_normals: NormalSet,
    pub n_points: usize,
}

fn link(name: &str, shape: Shape) -> Link {
    Link {
        name: name.into(),
        geometry: Geometry::new(shape),
    }
}

fn joint(kind: JointType, axis: [f64; 3], parent: usize, origin: Pose, limits: [f64; 2]) -> Joint {
    Joint {
        kind,
        axis,
        parent,
        origin,
        limits,
    }
}

impl ToyHandModel {
    pub fn new(n_points: usize) -> Result<Self> {
        if n_points < NORMAL_K {
            return Err(Error::InvalidArgument(format!("need at least {NORMAL_K} points, got {n_points}")));
        }
        let finger_geom = Geometry::new(Shape::Cylinder {
            radius: FINGER_RADIUS,
            height: FINGER_LENGTH,
        })
        .with_origin(Pose {
            translation: [FINGER_LENGTH / 2.0, 0.0, 0.0],
            // cylinder axis (z) onto the finger direction (x)
            ..Pose::from_axis_angle([0.0, 1.0, 0.0], FRAC_PI_2)
        });
        let finger = |name: &str| Link {
            name: name.into(),
            geometry: finger_geom.clone(),
        };
        let links = vec![
            link("base", Shape::Box { size: [0.02, 0.02, 0.02] }),
            link("carriage_x", Shape::Box { size: [0.02, 0.02, 0.02] }),
            link("carriage_y", Shape::Box { size: [0.02, 0.02, 0.02] }),
            link("palm", Shape::Box { size: [0.02, 0.11, 0.02] }),
            finger("finger_a"),
            finger("finger_b"),
        ];
        let id = Pose::identity();
        let joints = vec![
            joint(JointType::Prismatic, [1.0, 0.0, 0.0], 0, id, [-1.0, 1.0]),
            joint(JointType::Prismatic, [0.0, 1.0, 0.0], 1, id, [-1.0, 1.0]),
            joint(JointType::Revolute, [0.0, 0.0, 1.0], 2, id, [-PI, PI]),
            joint(
                JointType::Revolute,
                [0.0, 0.0, 1.0],
                3,
                Pose::from_translation([0.0, FINGER_OFFSET, 0.0]),
                [-0.8, 0.8],
            ),
            joint(
                JointType::Revolute,
                [0.0, 0.0, 1.0],
                3,
                Pose::from_translation([0.0, -FINGER_OFFSET, 0.0]),
                [-0.8, 0.8],
            ),
        ];
        let chain = KinematicChain::new(links, joints)?;
        let link_samples = sample_chain_surfaces(&chain, n_points, SURFACE_SEED)?;
        let disc = link(
            "disc",
            Shape::Cylinder {
                radius: DISC_RADIUS,
                height: DISC_HEIGHT,
            },
        );
        let raw = sample_link_surface(&disc, n_points, SURFACE_SEED ^ 0xd15c)?;
        let c = raw.centroid().expect("non-empty");
        let object_cloud = PointSet::new(
            raw.points()
                .iter()
                .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
                .collect(),
        )?;
        let object_normals = estimate_normals(&object_cloud, NORMAL_K)?;
        Ok(ToyHandModel {
            chain,
            link_samples,
            object_cloud,
            object_normals,
            n_points,
        })
    }

    pub fn hand_spec(&self) -> HandSpec<'_> {
        HandSpec {
            chain: &self.chain,
            link_samples: &self.link_samples,
            hand_links: &HAND_LINKS,
            n_points: self.n_points,
        }
    }

    /// All finger surface samples at the given joints (before downsampling).
    pub fn finger_points(&self, q_arm: &[f64; 3], q_hand: &[f64; 2]) -> Result<Vec<[f64; 3]>> {
        let q = JointVector::new(&self.chain, &[q_arm[0], q_arm[1], q_arm[2], q_hand[0], q_hand[1]])?;
        Ok(posed_link_cloud(&self.chain, &q, &self.link_samples, Some(&HAND_LINKS))?.into_points())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// Disc centre x, y and yaw.
    pub object: [f64; 3],
    pub q_arm: [f64; 3],
    pub q_hand: [f64; 2],
    pub goal: [f64; 2],
    pub step: usize,
    pub seed: u64,
}

impl EnvState {
    pub fn object_pose(&self) -> Pose {
        Pose::planar(self.object[0], self.object[1], self.object[2], 0.0)
    }

    pub fn goal_distance(&self) -> f64 {
        (self.object[0] - self.goal[0]).hypot(self.object[1] - self.goal[1])
    }
}

/// Start state drawn from `seed`: disc uniform in the start rectangle with yaw
/// in ±π/6, arm at home, fingers at the start of their cycle.
pub fn reset(seed: u64) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rng.gen_range(START_RECT[0][0]..=START_RECT[0][1]);
    let y = rng.gen_range(START_RECT[1][0]..=START_RECT[1][1]);
    let yaw = rng.gen_range(-START_YAW..=START_YAW);
    let s = finger_profile(0);
    EnvState {
        object: [x, y, yaw],
        q_arm: HOME_ARM,
        q_hand: [-s, s],
        goal: GOAL,
        step: 0,
        seed,
    }
}

pub fn success(state: &EnvState) -> bool {
    state.goal_distance() < SUCCESS_RADIUS
}

/// Finger closure angle at step `t`.
pub fn finger_profile(t: usize) -> f64 {
    0.25 + 0.15 * (2.0 * PI * t as f64 / 16.0).sin()
}

fn rate_limit(from: f64, to: f64, max: f64) -> f64 {
    from + (to - from).clamp(-max, max)
}

fn wrap_near(angle: f64, reference: f64) -> f64 {
    reference + (angle - reference + PI).rem_euclid(2.0 * PI) - PI
}

/// Moves joints toward the absolute targets (rate limited, clamped to joint
/// limits), then resolves finger/disc penetration by translating the disc.
pub fn step(model: &ToyHandModel, state: &EnvState, arm_action: &[f64], hand_action: &[f64]) -> Result<EnvState> {
    if arm_action.len() != ARM_DIM || hand_action.len() != HAND_DIM {
        return Err(Error::LengthMismatch {
            context: "action".into(),
            expected: ARM_DIM + HAND_DIM,
            actual: arm_action.len() + hand_action.len(),
        });
    }
    if arm_action.iter().chain(hand_action).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("action".into()));
    }
    let joints = model.chain.joints();
    let mut next = state.clone();
    for i in 0..ARM_DIM {
        let max = if i < 2 { MAX_LINEAR_STEP } else { MAX_ANGULAR_STEP };
        let [lo, hi] = joints[i].limits;
        next.q_arm[i] = rate_limit(state.q_arm[i], arm_action[i], max).clamp(lo, hi);
    }
    for i in 0..HAND_DIM {
        let [lo, hi] = joints[ARM_DIM + i].limits;
        next.q_hand[i] = rate_limit(state.q_hand[i], hand_action[i], MAX_ANGULAR_STEP).clamp(lo, hi);
    }
    let pts = model.finger_points(&next.q_arm, &next.q_hand)?;
    let fallback = {
        let d = [next.object[0] - next.q_arm[0], next.object[1] - next.q_arm[1]];
        let n = d[0].hypot(d[1]);
        if n > 0.0 {
            [d[0] / n, d[1] / n]
        } else {
            [1.0, 0.0]
        }
    };
    for _ in 0..PUSH_ITERATIONS {
        let (cx, cy) = (next.object[0], next.object[1]);
        let mut deepest: Option<(f64, [f64; 2])> = None;
        for p in &pts {
            let (dx, dy) = (cx - p[0], cy - p[1]);
            let dist = dx.hypot(dy);
            let depth = DISC_RADIUS - dist;
            if depth > 0.0 && deepest.is_none_or(|(d, _)| depth > d) {
                let dir = if dist > 0.0 { [dx / dist, dy / dist] } else { fallback };
                deepest = Some((depth, dir));
            }
        }
        let Some((depth, dir)) = deepest else {
            break;
        };
        next.object[0] = (cx + depth * dir[0]).clamp(WORKSPACE[0][0], WORKSPACE[0][1]);
        next.object[1] = (cy + depth * dir[1]).clamp(WORKSPACE[1][0], WORKSPACE[1][1]);
    }
    next.step += 1;
    Ok(next)
}

/// Scripted controller: line the palm up behind the disc on the goal→disc
/// line, then advance through it toward the goal. Targets respect the rate
/// limits.
pub fn expert_action(state: &EnvState) -> ([f64; 3], [f64; 2]) {
    let s = finger_profile(state.step + 1);
    let hand = [
        rate_limit(state.q_hand[0], -s, MAX_ANGULAR_STEP),
        rate_limit(state.q_hand[1], s, MAX_ANGULAR_STEP),
    ];
    let [ox, oy, _] = state.object;
    let (gx, gy) = (ox - state.goal[0], oy - state.goal[1]);
    let dist = gx.hypot(gy);
    if dist < SUCCESS_RADIUS {
        return (state.q_arm, hand);
    }
    let u = [gx / dist, gy / dist];
    let yaw_des = wrap_near((-u[1]).atan2(-u[0]), state.q_arm[2]);
    let rel = [state.q_arm[0] - ox, state.q_arm[1] - oy];
    let along = rel[0] * u[0] + rel[1] * u[1];
    let lateral = -rel[0] * u[1] + rel[1] * u[0];
    let yaw_err = (yaw_des - state.q_arm[2]).abs();
    // looser once committed so rate limiting does not flip the decision
    let committed = along < APPROACH_OFFSET - 0.005;
    let lat_tol = if committed { 0.02 } else { 0.012 };
    let aligned = lateral.abs() < lat_tol && yaw_err < 0.12 && along > 0.06;
    let offset = if aligned {
        PUSH_OFFSET - dist.min(MAX_INTRUSION)
    } else {
        APPROACH_OFFSET
    };
    let target = [ox + u[0] * offset, oy + u[1] * offset];
    let d = [target[0] - state.q_arm[0], target[1] - state.q_arm[1]];
    let scale = (MAX_LINEAR_STEP / d[0].hypot(d[1]).max(1e-12)).min(1.0);
    let arm = [
        state.q_arm[0] + d[0] * scale,
        state.q_arm[1] + d[1] * scale,
        rate_limit(state.q_arm[2], yaw_des, MAX_ANGULAR_STEP),
    ];
    (arm, hand)
}

/// Observation at `state` plus the ground-truth contact map of the hand on the
/// object.
pub fn render_observation(model: &ToyHandModel, state: &EnvState) -> Result<(Observation, ContactMap)> {
    let obs = render_observation_only(model, state)?;
    let normals = model.object_normals.rotated(&state.object_pose());
    let d = aligned_distance(&obs.obj_pc, &normals, &obs.hand_pc, CONTACT_GAMMA)?;
    let c = contact_map(&d, CONTACT_THETA)?;
    Ok((obs, c))
}

/// [`render_observation`] without the contact map.
pub fn render_observation_only(model: &ToyHandModel, state: &EnvState) -> Result<Observation> {
    build_observation(
        &model.object_cloud,
        &state.object_pose(),
        model.hand_spec(),
        &state.q_arm,
        &state.q_hand,
    )
}

/// Runs the expert from `reset(seed)` until success or `max_steps`,
/// recording the observation and the expert's action at every step. With
/// `noise > 0` the executed arm target is perturbed by N(0, noise²) in x/y and
/// N(0, (YAW_NOISE_RATIO·noise)²) in yaw, while the clean expert action is
/// what gets recorded, so the data covers recoveries from off-line states.
/// Returns the pack and the true final state.
pub fn record_expert_episode(
    model: &ToyHandModel,
    seed: u64,
    max_steps: usize,
    noise: f64,
) -> Result<(EpisodePack, EnvState)> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("expert noise {noise}")));
    }
    let header = EpisodeHeader::new(TASK_NAME, DT, model.n_points, ARM_DIM, HAND_DIM, 0);
    let mut pack = EpisodePack::empty(header);
    let mut rng = component_rng(seed, RngStream::Data);
    let mut state = reset(seed);
    while !success(&state) && state.step < max_steps {
        let obs = render_observation_only(model, &state)?;
        let (arm, hand) = expert_action(&state);
        pack.push(&obs, &arm, &hand, &state.object_pose())?;
        let mut executed = arm;
        if noise > 0.0 {
            for (i, a) in executed.iter_mut().enumerate() {
                let std = if i < 2 { noise } else { YAW_NOISE_RATIO * noise };
                *a += std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        state = step(model, &state, &executed, &hand)?;
    }
    Ok((pack, state))
}
