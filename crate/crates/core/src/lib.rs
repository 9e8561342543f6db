#![no_std]

extern crate alloc;

pub mod cost;
pub mod data;
pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod graph;
pub mod gru;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod query;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod transformer;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use optim::{ParamId, ParamStore};
pub use tensor::Tensor;
