//! Slice-level numerical routines behind the graph ops.

pub mod conv;
pub mod norm;
pub mod pool;
