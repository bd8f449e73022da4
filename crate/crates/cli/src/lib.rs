//! Run-spec ingestion and the `enumerate`, `evaluate`, `search` and `report`
//! workflows behind the `wsc` binary.

pub mod error;
pub mod run;
pub mod spec;

pub use error::{CliError, CliResult};
pub use run::{RunReport, TOOL_VERSION};
pub use spec::{Overrides, RunSpec};
