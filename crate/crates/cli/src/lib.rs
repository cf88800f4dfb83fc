//! Pipeline stages, configuration and the feed server behind the `feedkit`
//! binary.

pub mod config;
pub mod serve;
pub mod stages;
