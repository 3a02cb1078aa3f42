pub mod autograd;
pub mod bench;
pub mod cli;
pub mod cma;
pub mod config;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod model;
pub mod params;
pub mod resample;
pub mod sample;
pub mod synth;
pub mod tensor;
pub mod tensor_io;
pub mod training;
pub mod transfer;
pub mod viz;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/cost-volumes.md")]
    pub mod cost_volumes {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    pub mod aggregation {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    pub mod decoding {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/benchmarking.md")]
    pub mod benchmarking {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    pub mod command_line {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    pub mod file_formats {}
}
