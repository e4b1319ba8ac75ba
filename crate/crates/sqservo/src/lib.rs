//! File formats, experiment runners and CSV traces around `sqservo-core`.

pub mod config;
pub mod experiments;
pub mod io;
pub mod trace;
