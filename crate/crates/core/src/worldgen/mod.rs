mod dataset;
mod gqa;
mod sample;
mod schema;

pub use dataset::*;
pub use gqa::*;
pub use sample::*;
pub use schema::*;
