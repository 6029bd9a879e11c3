//! Measuring the linguistic influence of documents.
//!
//! Words that undergo semantic or lexical innovation are detected from
//! contextual embeddings and frequency series. Their adoption events form
//! cascades, and a discrete-time Hawkes process attributes each adoption to
//! the documents that came before it. The fitted excitation weights are the
//! influence scores, which are then checked against later citations.

pub mod cascade;
pub mod change;
pub mod citation;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod fixture;
pub mod hawkes;
pub mod influence;
pub mod io;
pub mod optimize;
pub mod pipeline;
pub mod sense;
pub mod stats;
pub mod store;

pub use error::{Error, Result};
pub use exec::Execution;
