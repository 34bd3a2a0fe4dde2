//! Library half of the `effconf` command: config files, report formats, the
//! check suites and the benchmark harness. `main.rs` only parses arguments.

pub mod bench;
pub mod config;
pub mod report;
pub mod suites;
