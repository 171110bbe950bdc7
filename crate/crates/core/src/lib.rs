//! Benchmark campaign toolkit: parameter grids and templated job scripts,
//! scheduler adapters, DAG workflows with file-based status, timers,
//! FAIR result records and a cloud cost model.

pub mod clock;
pub mod coordinator;
pub mod cost;
pub mod error;
pub mod generator;
pub mod model;
pub mod scheduler;
pub mod status;
pub mod results;
pub mod sysinfo;
pub mod template;
pub mod timers;

pub use error::{Error, ErrorClass, Result};

/// Version recorded in manifests and result records.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
