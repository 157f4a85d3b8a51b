//! Teacher-label aggregation for histology tiles, with the evaluation,
//! counting and tumor-microenvironment analytics built around it.

pub mod aggregator;
pub mod config;
pub mod counting;
pub mod error;
pub mod io;
pub mod metrics;
pub mod postprocess;
pub mod raster;
pub mod synth;
pub mod taxonomy;
pub mod tiling;
pub mod tme;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use taxonomy::{ClassId, ClassMap, Hierarchy, Taxonomy};
