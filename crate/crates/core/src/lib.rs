pub mod analysis;
pub mod data;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod numkern;
pub mod pipeline;
pub mod trainer;
pub mod treecrf;

pub use error::{Error, Result};
