//! Dialogue section classification and summarization with LoRA-adapted
//! transformers, beam search tuning and ensembling.

pub mod corpus;
pub mod decode;
pub mod ensemble;
pub mod error;
pub mod hpo;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tokenizer;

pub use error::{Error, Result};
