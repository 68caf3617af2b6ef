pub mod adacof;
pub mod arch;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod compressor;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod nn;
pub mod sparse_opt;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
