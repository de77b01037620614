mod engine;
mod oracle;

pub use engine::*;
pub use oracle::*;
