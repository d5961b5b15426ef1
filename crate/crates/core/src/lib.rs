pub mod checkpoint;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod ot;
pub mod topic;
pub mod trainer;

pub use error::{Error, Result};
