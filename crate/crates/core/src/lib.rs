pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod planner;
pub mod losses;
pub mod sigreg;
pub mod train;
pub mod worldmodel;

pub use error::{Error, Result};
