pub mod corpus;
pub mod metrics;
pub mod retrieval;
pub mod prompts;
pub mod llm;
pub mod executor;
pub mod instruction;
pub mod fir;
pub mod difficulty;
pub mod config;
pub mod cli;
