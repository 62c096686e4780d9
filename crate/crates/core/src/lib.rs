//! FDR-controlled selection of data-driven subgroups in matched
//! observational studies under the Rosenbaum sensitivity model.

pub mod calibration;
pub mod error;
pub mod evaluate;
pub mod glm;
pub mod group_agg;
pub mod io;
pub mod ingest_match;
pub mod model;
pub mod partition;
pub mod pvalues;
pub mod rng;
pub mod screening;
pub mod select;
pub mod simulate;
pub mod stats;
pub mod unit_stats;

pub use error::{Error, Result};
