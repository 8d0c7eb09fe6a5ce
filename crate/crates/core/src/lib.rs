pub mod backbone;
pub mod error;
pub mod gla;
pub mod harness;
pub mod model;
pub mod nn;
pub mod projection;
pub mod synthdata;

pub use error::{Error, Result};
