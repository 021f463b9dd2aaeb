//! Dense tensors, a reverse-mode tape and the layers needed for a residual
//! CNN, written for CPU training of small models.

pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod wgts;

pub use graph::{BatchMoments, Gradients, Graph, Var};
pub use layers::LayerSpec;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::ParamStore;
pub use tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {0} is out of range")]
    BadLabel(usize),
    #[error("backward needs a scalar loss, got dims {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} references a later node")]
    GraphCycle(usize),
    #[error("bad layer: {0}")]
    BadLayer(String),
    #[error("bad weights file: {0}")]
    Format(String),
}
