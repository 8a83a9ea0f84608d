//! Command implementations behind the `promptseg` binary: batch evaluation,
//! fusion and statistics reports, and the annotation service.

pub mod config;
pub mod demo;
pub mod evaluate;
pub mod fuse;
pub mod manifest;
pub mod report;
pub mod service;
pub mod stub;
