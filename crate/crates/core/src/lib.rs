//! Late-interaction passage retrieval with self-guided weak supervision for
//! open-domain question answering.

pub mod bm25;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod index;
pub mod reader;
pub mod scoring;
pub mod supervision;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
