pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod streaming;
pub mod train;

pub use error::{Error, Result};
