pub mod backbone;
pub mod checkpoint;
pub mod collab;
pub mod comparer;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod ranker;
pub mod retrieval;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
