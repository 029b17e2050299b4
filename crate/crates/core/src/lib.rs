pub mod covariance;
pub mod error;
pub mod linalg;
pub mod merge;
pub mod pipeline;
pub mod purify;
pub mod rank_alloc;
pub mod recipe;
pub mod rng;
pub mod tensor_store;
pub mod workbench;

pub use error::{Error, ErrorClass, Result};
