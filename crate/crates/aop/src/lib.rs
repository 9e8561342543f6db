//! File formats, benchmarks and the command-line front-end for `aop-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod export;
pub mod nli;
pub mod pipeline;

pub use error::{Error, Result};
