mod dsl;
mod parser;
mod render;

pub use dsl::*;
pub use parser::*;
pub use render::*;
