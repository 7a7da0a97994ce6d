//! Runtime and evaluation harness for search agents that decompose a
//! question into sub-queries and retrieve them in parallel.
//!
//! - [`tags`]: transcript grammar, sub-query splitting and format checks
//! - [`retrieval`]: tf-idf index, remote retriever client, parallel fan-out
//! - [`policy`]: generation contract, scripted and remote policies
//! - [`rollout`]: the multi-turn episode loop and trace files
//! - [`rewards`]: outcome, decomposition, search-count and format rewards
//! - [`datasets`]: question files and parallel/sequential subset rules
//! - [`evaluation`]: metrics, aggregation, replay and reports
//! - [`cli`]: command implementations behind the `parsearch` binary

pub mod cli;
pub mod datasets;
pub mod evaluation;
pub mod policy;
pub mod retrieval;
pub mod rewards;
pub mod rollout;
pub mod tags;
