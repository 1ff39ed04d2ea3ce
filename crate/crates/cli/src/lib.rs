//! Library surface of the pipeline binary: configuration loading and the
//! stage implementations, exposed for integration tests.

pub mod config;
pub mod pipeline;
