//! Neural implicit reconstruction of biventricular heart shapes from sparse,
//! labeled slice data.

pub mod error;
pub mod acquisition;
pub mod anatomy;
pub mod geom;
pub mod harness;
pub mod inference;
pub mod kv;
pub mod metrics;
pub mod netcore;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
