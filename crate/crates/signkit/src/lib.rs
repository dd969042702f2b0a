//! Sign-language pose modeling toolkit: pose corpora and synthesis, masked
//! pose reconstruction, sign-text contrastive alignment, and downstream
//! recognition, translation, and retrieval pipelines.

pub mod checkpoint;
pub mod config;
pub mod cslr;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod islr;
pub mod masking;
pub mod metrics;
pub mod objectives;
pub mod pose_data;
pub mod slrt;
pub mod slt;
pub mod synthetic;
pub mod task;
pub mod text;
pub mod train;

pub use error::{Error, Result};
