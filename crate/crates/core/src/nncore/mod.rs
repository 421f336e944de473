//! Small reverse-mode tensor engine: graph ops, layers, AdamW and checkpoints.

mod adamw;
mod attention;
mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod rng;
mod tensor;

pub use adamw::{cosine_lr, AdamW, AdamWConfig};
pub use checkpoint::Checkpoint;
pub use gradcheck::{gradcheck, GradCheck, GradCheckReport};
pub use graph::{Axis, Graph, Var};
pub use layers::{Linear, LayerNorm, Mlp, MultiHeadCrossAttention, LAYER_NORM_EPS};
pub use params::{Gradients, ParamId, ParamStore};
pub use rng::{component_rng, RngStream};
pub use tensor::{Real, Tensor};
