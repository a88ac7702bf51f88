pub mod blocks;
pub mod commands;
pub mod data;
pub mod error;
pub mod estimator;
pub mod maxseq;
pub mod memtrack;
pub mod miniseq;
pub mod model;
pub mod optim;
pub mod recompute;
pub mod seqpar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
