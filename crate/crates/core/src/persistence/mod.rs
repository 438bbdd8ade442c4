//! Event log, replay, reporting and run configuration.

pub mod config;
pub mod events;
pub mod log;
pub mod replay;
pub mod report;

pub use config::load_config;
pub use events::{EventBody, EventKind, LogHeader, PoolEntry, RunEvent, Strategy, SCHEMA, SCHEMA_VERSION};
pub use log::{parse_log, read_log, write_log, EventLogWriter, Recorder};
pub use replay::{replay, Replayed};
pub use report::{FinalInfo, RunReport, TraceSummary, TreeCounts};
