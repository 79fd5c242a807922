//! Dual-level alignment objectives for teacher-guided sentence embeddings.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod seed;
pub mod teacher;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
