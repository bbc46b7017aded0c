//! Dense arrays, a reverse-mode tape and the Adam optimizer.

mod array;
pub mod check;
mod graph;
pub mod nn;
mod optim;

pub use array::{ConvGeom, NdArray};
pub use graph::{Gradients, Graph, Var, GROUP_NORM_EPS};
pub use optim::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_into, save_checkpoint, AdamConfig, AdamState, Bound,
    CheckpointInfo, ParamId, ParamStore, CHECKPOINT_MAGIC,
};
