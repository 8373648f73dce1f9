//! Topology-aware graph pooling networks for graph classification.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] / [`autodiff`]: dense matrices and a tape-based reverse-mode engine
//! - [`graph_io`]: TU-format datasets, node features, stratified folds
//! - [`layers`]: GCN, the topology-aware pooling layer, readout, MLP head
//! - [`model`]: the full network, ablation variants, checkpoints
//! - [`train`]: losses, Adam, fold training and cross-validation
//! - [`gradcheck`] / [`dot`]: finite-difference checks and Graphviz export

pub mod autodiff;
pub mod dot;
pub mod error;
pub mod gradcheck;
pub mod graph_io;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, Gradients, ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
