pub mod asr;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod ctc;
pub mod encoders;
pub mod error;
pub mod extractor;
pub mod layers;
pub mod pipeline;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
