//! Library side of the `cpn` binary: file formats and matcher selection.

pub mod descriptors;
pub mod matchers;
pub mod run_config;
