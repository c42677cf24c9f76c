//! Random walks in balanced random environments on Z^d.

pub mod clt_harness;
pub mod coarse_grain;
pub mod environment;
pub mod error;
pub mod exact_solver;
pub mod green_analysis;
pub mod lattice;
pub mod linalg;
pub mod multiscale;
pub mod rng;
pub mod stats;
pub mod walk_engine;

pub use error::{Result, RwreError};
pub use lattice::{Ball, Site};
