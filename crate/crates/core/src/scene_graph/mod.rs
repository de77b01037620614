mod embed;
mod heads;
mod matching;
mod scene;

pub use embed::*;
pub use heads::*;
pub use matching::*;
pub use scene::*;
