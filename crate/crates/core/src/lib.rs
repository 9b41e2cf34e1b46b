//! Cross-task in-context learning.
//!
//! Given a query on a target task and a corpus of source-task datasets, the
//! engine picks the closest source demonstrations, rewrites them into the
//! target task's shape with a staged LLM protocol, composes a few-shot
//! prompt and scores the answer.

pub mod corpus;
pub mod embedding;
pub mod llm;
pub mod prompts;
pub mod selection;
pub mod adaptation;
pub mod composer;
pub mod evaluation;
pub mod pipeline;
pub mod runner;
