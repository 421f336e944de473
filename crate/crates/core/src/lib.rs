//! Correspondence-based visuomotor policy pipeline: interaction-aware point
//! clouds from kinematics and object pose, contact/coordination pretraining of
//! a hand-object encoder, and a conditional diffusion policy evaluated in a
//! deterministic planar-push environment.

pub mod cli;
pub mod corrnet;
pub mod diffpolicy;
pub mod error;
pub mod nncore;
pub mod obsbuild;
pub mod pcgeom;
pub mod se3kin;
pub mod toyenv;

pub use error::{Error, Result};
