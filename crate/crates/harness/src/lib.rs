//! IO, configuration, parallel execution and the scripted experiments built
//! on `aetransfer-core`.

pub mod dataset;
pub mod config;
pub mod experiment;
pub mod report;
pub mod store;
