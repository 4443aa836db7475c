//! Selective state-space sequence layers and absolute camera pose regression,
//! built on a small reverse-mode autodiff engine.

pub mod encoder;
pub mod error;
pub mod gis;
pub mod gradcheck;
pub mod bench;
pub mod data;
pub mod distill;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pose;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Activation, Gradients, Graph, Var};
pub use tensor::Tensor;
