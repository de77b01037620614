mod decoder;
mod score;
mod template;

pub use decoder::*;
pub use score::*;
pub use template::*;
