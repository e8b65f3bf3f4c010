//! Failure diagnosis for distributed training jobs from their plain-text
//! logs: parse into templates, drop events that successful jobs also show,
//! then compare nodes against each other and iterations against their
//! predecessors.

pub mod drain;
pub mod filter;
pub mod library;
pub mod model;
pub mod pattern;
pub mod pipeline;
pub mod report;
pub mod spatial;
pub mod synth;
pub mod temporal;

#[cfg(test)]
mod testutil;
