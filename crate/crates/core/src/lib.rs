pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod exprlang;
pub mod geometry;
pub mod quad;
pub mod stats;
pub mod cellsolve;
pub mod sparse;
pub mod effective;
pub mod msint;
pub mod macroscale;
pub mod dns;
pub mod suite;
