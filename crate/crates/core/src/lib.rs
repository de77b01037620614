pub mod answer_gen;
pub mod error;
pub mod exec_engine;
pub mod instruction;
pub mod nn;
pub mod perturb;
pub mod pipeline;
pub mod scene_graph;
pub mod worldgen;

pub use error::{Error, Result};
