pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod kv;
pub mod mdp;
pub mod model;
pub mod networks;
pub mod policy_opt;
pub mod reward;
pub mod tensor;
pub mod training;

pub use error::{FbError, Result};
