//! IO, backends, pipeline orchestration and the command-line front end for
//! the `cocoa-core` model.

#![forbid(unsafe_code)]

pub mod cli;
pub mod config;
pub mod corpus;
pub mod export;
pub mod generator;
pub mod jsonl;
pub mod mock;
pub mod openai;
pub mod pipeline;
pub mod retrieval;

pub use cocoa_core as core;
