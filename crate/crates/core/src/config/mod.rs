//! Configuration text: flat `section.key = value` lines and the run-level
//! config that bundles every module's settings.

mod flat;
mod run;

pub use flat::{from_flat_text, to_flat_text};
pub use run::{DatasetConfig, EvalConfig, RunConfig, MAX_SEED};
