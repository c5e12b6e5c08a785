//! Laboratory for random walks in random environments on ℤ^d.

pub mod ballisticity;
pub mod environment;
pub mod error;
pub mod lattice;
pub mod limits;
pub mod linsolve;
pub mod oracle;
pub mod regeneration;
pub mod renormalization;
pub mod rng;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
