//! Hierarchical user memory, a tool-calling recommendation agent, ranking
//! rewards and a verifiable GRPO objective.

pub mod agent;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod evaluator;
pub mod gateway;
pub mod grpo;
pub mod indexer;
pub mod memory;
pub mod pipeline;
pub mod retriever;
pub mod reward;
pub mod seed;
