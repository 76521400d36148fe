//! IO, file formats, task orchestration, and reporting for the coral
//! operator-learning pipeline. The numerical core lives in `coral-core`;
//! this crate adds everything that touches the filesystem plus the
//! evaluation protocols, and backs the `coral` binary.

pub mod config;
pub mod container;
pub mod pipeline;
pub mod report;
