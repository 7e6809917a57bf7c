pub mod agents;
pub mod alpha;
pub mod backends;
pub mod config;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod grabcut;
pub mod imaging;
pub mod mask;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
