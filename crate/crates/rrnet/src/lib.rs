//! File formats, dataset plumbing, evaluation reports and the `rrnet`
//! command-line tool around [`rrnet_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod manifest;
pub mod pnm;
pub mod report;
pub mod selfcheck;
