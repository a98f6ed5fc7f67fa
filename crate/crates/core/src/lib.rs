//! Pure building blocks for a two-stage knowledge-induction RAG pipeline.
//!
//! Everything in this crate is `no_std` + `alloc`: domain types, the BM25
//! scorer, prompt rendering and output parsing, QA metrics, training-sample
//! assembly and the numeric loss lab. IO, HTTP, orchestration and the CLI
//! live in the `cocoa` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bm25;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod synthesis;

pub use model::{
    Branch, CandidateAnswer, Decision, InducedKnowledge, KnowledgeSource, ParseMode, Passage,
    PipelineRecord, Query, RecordMeta, Transcript, VariantId,
};
