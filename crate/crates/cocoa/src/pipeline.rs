//! Staged reasoning pipeline: per-branch candidate and induction calls, a
//! decision call over both branches, plus the single-pass baselines.
//!
//! A query never aborts a batch. When a stage fails, the record keeps every
//! transcript and branch produced so far and `meta.error` says which stage
//! failed; such records are reported as failed by evaluation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use cocoa_core::model::flags;
use cocoa_core::prompt::{parse_stage_output, render_decision, render_prompt, DecisionLayout, PromptBindings, PromptError, StageId};
use cocoa_core::{
    Branch, CandidateAnswer, Decision, InducedKnowledge, KnowledgeSource, ParseMode, Passage, PipelineRecord, Query, Transcript,
    VariantId,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{
    Gateway, GenerateError, GenerationRequest, RoleTag, DEFAULT_CONCURRENCY, DEFAULT_MAX_TOKENS, DEFAULT_UNIFIED_MAX_TOKENS,
};
use crate::retrieval::{RetrievalError, Retriever};

pub const DEFAULT_K: usize = 5;
pub const INDUCTION_WORD_LIMIT: usize = 200;
pub const MERGED_PASSAGE_ID: &str = "internal_knowledge";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0} empty")]
    EmptyStage(StageId),
    #[error("{stage}: {source}")]
    Generate {
        stage: StageId,
        #[source]
        source: GenerateError,
    },
    #[error("{stage}: {source}")]
    Prompt {
        stage: StageId,
        #[source]
        source: PromptError,
    },
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("retrieval returned no passages")]
    NoPassages,
    #[error("variant {0} needs a retriever but none is configured")]
    NoRetriever(VariantId),
    #[error("invalid query: {0}")]
    Query(String),
    #[error("{0}")]
    Branch(String),
}

impl PipelineError {
    pub fn is_unreachable(&self) -> bool {
        match self {
            PipelineError::Generate { source, .. } => source.is_unreachable(),
            PipelineError::Retrieval(RetrievalError::Timeout | RetrievalError::Transport(_)) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k: usize,
    pub variant: VariantId,
    /// Queries processed in parallel by [`Pipeline::run_batch`].
    pub concurrency_limit: usize,
    /// Run the internal and external branches of one query on two threads.
    pub stage_branches_concurrent: bool,
    pub task_instruction: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub unified_max_tokens: u32,
    pub stop_sequences: Vec<String>,
    /// Drop wall-clock timing so identical runs serialize identically.
    pub canonical: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            variant: VariantId::CocoaZero,
            concurrency_limit: DEFAULT_CONCURRENCY,
            stage_branches_concurrent: true,
            task_instruction: None,
            model_name: "default".into(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            unified_max_tokens: DEFAULT_UNIFIED_MAX_TOKENS,
            stop_sequences: Vec::new(),
            canonical: false,
        }
    }
}

/// Transcripts and flags accumulated while running stages.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    pub transcripts: Vec<Transcript>,
    pub flags: Vec<&'static str>,
}

impl Trace {
    fn extend(&mut self, other: Trace) {
        self.transcripts.extend(other.transcripts);
        self.flags.extend(other.flags);
    }
}

fn role_for(stage: StageId) -> RoleTag {
    match stage {
        StageId::InternalCandidate | StageId::InternalInduction => RoleTag::InternalAgent,
        StageId::ExternalCandidate | StageId::ExternalInduction => RoleTag::ExternalAgent,
        StageId::Unified => RoleTag::Unified,
        StageId::Decision | StageId::ZeroShot | StageId::StandardRag | StageId::Cot | StageId::MergeContext => {
            RoleTag::DecisionAgent
        }
    }
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub struct Pipeline<'a> {
    gateway: &'a Gateway,
    retriever: Option<&'a Retriever>,
    config: PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(gateway: &'a Gateway, retriever: Option<&'a Retriever>, config: PipelineConfig) -> Self {
        Self { gateway, retriever, config }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn bindings(&self, query: &Query) -> PromptBindings {
        PromptBindings::question(query.text.clone()).with_task_instruction(self.config.task_instruction.clone())
    }

    fn render(&self, stage: StageId, bindings: &PromptBindings) -> Result<String, PipelineError> {
        render_prompt(stage, bindings).map_err(|source| PipelineError::Prompt { stage, source })
    }

    /// One generator call; always leaves exactly one transcript in `trace`.
    fn call(&self, stage: StageId, prompt: String, trace: &mut Trace) -> Result<String, PipelineError> {
        let request = GenerationRequest {
            prompt,
            temperature: self.config.temperature,
            max_tokens: if stage == StageId::Unified { self.config.unified_max_tokens } else { self.config.max_tokens },
            stop_sequences: self.config.stop_sequences.clone(),
            model_name: self.config.model_name.clone(),
            role_tag: role_for(stage),
        };
        let outcome = self.gateway.generate(&request);
        let (output, prompt_tokens, completion_tokens) = match &outcome {
            Ok(r) => (r.text.clone(), r.prompt_tokens, r.completion_tokens),
            Err(_) => (String::new(), 0, 0),
        };
        trace.transcripts.push(Transcript {
            stage,
            prompt: request.prompt,
            output,
            prompt_tokens,
            completion_tokens,
        });
        match outcome {
            Ok(r) => Ok(r.text),
            Err(GenerateError::EmptyOutput(_)) => Err(PipelineError::EmptyStage(stage)),
            Err(source) => Err(PipelineError::Generate { stage, source }),
        }
    }

    fn answer_of(stage: StageId, output: &str) -> Result<(String, ParseMode, Option<String>), PipelineError> {
        let parsed = parse_stage_output(stage, output).map_err(|_| PipelineError::EmptyStage(stage))?;
        let answer = parsed.answer.filter(|a| !a.is_empty()).ok_or(PipelineError::EmptyStage(stage))?;
        Ok((answer, parsed.parse_mode, parsed.thinking.filter(|t| !t.is_empty())))
    }

    /// Induction output: the Background/Summary section, or the whole output
    /// (flagged) when the section is missing.
    fn knowledge_of(stage: StageId, output: &str, trace: &mut Trace) -> Result<String, PipelineError> {
        let parsed = parse_stage_output(stage, output).map_err(|_| PipelineError::EmptyStage(stage))?;
        let internal = stage == StageId::InternalInduction;
        let section = if internal { parsed.background } else { parsed.summary };
        let text = match section.filter(|s| !s.is_empty()) {
            Some(s) => s,
            None => {
                trace.flags.push(if internal { flags::INTERNAL_INDUCTION_FALLBACK } else { flags::EXTERNAL_INDUCTION_FALLBACK });
                output.trim().to_string()
            }
        };
        if word_count(&text) > INDUCTION_WORD_LIMIT {
            trace.flags.push(if internal { flags::INTERNAL_OVER_200_WORDS } else { flags::EXTERNAL_OVER_200_WORDS });
        }
        Ok(text)
    }

    fn retrieve(&self, query: &Query, variant: VariantId) -> Result<Vec<Passage>, PipelineError> {
        let retriever = self.retriever.ok_or(PipelineError::NoRetriever(variant))?;
        let ranked = retriever.search(&query.text, self.config.k)?;
        if ranked.is_empty() {
            return Err(PipelineError::NoPassages);
        }
        Ok(ranked.passages())
    }

    pub fn run_internal_branch(&self, query: &Query, trace: &mut Trace) -> Result<Branch, PipelineError> {
        let stage = StageId::InternalCandidate;
        let output = self.call(stage, self.render(stage, &self.bindings(query))?, trace)?;
        let (answer, _, _) = Self::answer_of(stage, &output)?;

        let stage = StageId::InternalInduction;
        let mut b = self.bindings(query);
        b.candidate_internal = Some(answer.clone());
        let output = self.call(stage, self.render(stage, &b)?, trace)?;
        let knowledge = Self::knowledge_of(stage, &output, trace)?;
        branch(Some(answer), knowledge, KnowledgeSource::Internal)
    }

    pub fn run_external_branch(&self, query: &Query, passages: &[Passage], trace: &mut Trace) -> Result<Branch, PipelineError> {
        if passages.is_empty() {
            return Err(PipelineError::NoPassages);
        }
        let stage = StageId::ExternalCandidate;
        let b = self.bindings(query).with_passages(passages.to_vec());
        let output = self.call(stage, self.render(stage, &b)?, trace)?;
        let (answer, _, _) = Self::answer_of(stage, &output)?;

        let stage = StageId::ExternalInduction;
        let mut b = self.bindings(query).with_passages(passages.to_vec());
        b.candidate_external = Some(answer.clone());
        let output = self.call(stage, self.render(stage, &b)?, trace)?;
        let knowledge = Self::knowledge_of(stage, &output, trace)?;
        branch(Some(answer), knowledge, KnowledgeSource::External)
    }

    pub fn run_decision(
        &self,
        query: &Query,
        internal: Option<&Branch>,
        external: Option<&Branch>,
        thinking: bool,
        trace: &mut Trace,
    ) -> Result<(Decision, ParseMode), PipelineError> {
        let stage = StageId::Decision;
        let layout = DecisionLayout { internal: internal.is_some(), external: external.is_some(), thinking };
        let mut b = self.bindings(query);
        for (slot_candidate, slot_knowledge, br) in [
            (&mut b.candidate_internal, &mut b.induction_internal, internal),
            (&mut b.candidate_external, &mut b.induction_external, external),
        ] {
            if let Some(br) = br {
                let candidate = br.candidate.as_ref().ok_or_else(|| PipelineError::Branch("decision needs branch candidates".into()))?;
                *slot_candidate = Some(candidate.text.clone());
                *slot_knowledge = Some(br.knowledge.text.clone());
            }
        }
        let prompt = render_decision(layout, &b).map_err(|source| PipelineError::Prompt { stage, source })?;
        let output = self.call(stage, prompt, trace)?;
        let (answer, mode, cot) = Self::answer_of(stage, &output)?;
        let cot = if thinking { cot } else { None };
        if mode == ParseMode::Fallback {
            trace.flags.push(flags::DECISION_FALLBACK);
        } else if thinking && cot.is_none() {
            trace.flags.push(flags::DECISION_MISSING_THINKING);
        }
        Ok((Decision { cot: cot.unwrap_or_default(), answer }, mode))
    }

    pub fn run_cocoa_zero(&self, query: &Query) -> PipelineRecord {
        self.run_variant(query, VariantId::CocoaZero)
    }

    pub fn run_unified(&self, query: &Query) -> PipelineRecord {
        self.run_variant(query, VariantId::Unified)
    }

    /// Runs the configured variant.
    pub fn run_query(&self, query: &Query) -> PipelineRecord {
        self.run_variant(query, self.config.variant)
    }

    pub fn run_variant(&self, query: &Query, variant: VariantId) -> PipelineRecord {
        let start = Instant::now();
        let mut record = PipelineRecord::new(query.clone(), variant);
        record.meta.k = self.config.k;
        let mut trace = Trace::default();
        let outcome = match query.check() {
            Ok(()) => self.fill(&mut record, &mut trace),
            Err(e) => Err(PipelineError::Query(e.to_string())),
        };
        for t in &trace.transcripts {
            record.meta.prompt_tokens += t.prompt_tokens;
            record.meta.completion_tokens += t.completion_tokens;
        }
        record.transcripts = trace.transcripts;
        for f in trace.flags {
            record.push_flag(f);
        }
        if let Err(e) = outcome {
            log::warn!("query {} ({variant}) failed: {e}", query.id);
            record.meta.error = Some(e.to_string());
        }
        record.meta.elapsed_ms = Some(start.elapsed().as_millis() as u64);
        if self.config.canonical {
            record.canonicalize();
        }
        record
    }

    fn fill(&self, rec: &mut PipelineRecord, trace: &mut Trace) -> Result<(), PipelineError> {
        let query = rec.query.clone();
        let variant = rec.variant;
        match variant {
            VariantId::CocoaZero | VariantId::NoThink => {
                self.both_branches(rec, trace)?;
                self.decide(rec, variant != VariantId::NoThink, trace)
            }
            VariantId::NoInternal => {
                rec.retrieved = self.retrieve(&query, variant)?;
                rec.external = Some(self.run_external_branch(&query, &rec.retrieved, trace)?);
                self.decide(rec, true, trace)
            }
            VariantId::NoExternal => {
                rec.internal = Some(self.run_internal_branch(&query, trace)?);
                self.decide(rec, true, trace)
            }
            VariantId::ZeroShot | VariantId::Cot | VariantId::StandardRag => {
                let (stage, b) = match variant {
                    VariantId::ZeroShot => (StageId::ZeroShot, self.bindings(&query)),
                    VariantId::Cot => (StageId::Cot, self.bindings(&query)),
                    _ => {
                        rec.retrieved = self.retrieve(&query, variant)?;
                        (StageId::StandardRag, self.bindings(&query).with_passages(rec.retrieved.clone()))
                    }
                };
                let output = self.call(stage, self.render(stage, &b)?, trace)?;
                let (answer, mode, thinking) = Self::answer_of(stage, &output)?;
                let cot = match variant {
                    VariantId::Cot => thinking.unwrap_or_else(|| output.trim().to_string()),
                    _ => String::new(),
                };
                rec.decision = Decision { cot, answer };
                rec.meta.decision_parse_mode = Some(mode);
                Ok(())
            }
            VariantId::Merge => {
                let stage = StageId::InternalInduction;
                let mut b = self.bindings(&query);
                b.candidate_internal = Some(String::new());
                let output = self.call(stage, self.render(stage, &b)?, trace)?;
                let knowledge = Self::knowledge_of(stage, &output, trace)?;
                let internal = branch(None, knowledge, KnowledgeSource::Internal)?;
                rec.retrieved = self.retrieve(&query, variant)?;
                let mut passages = rec.retrieved.clone();
                passages.push(
                    Passage::new(MERGED_PASSAGE_ID, "", internal.knowledge.text.clone())
                        .map_err(|e| PipelineError::Branch(e.to_string()))?,
                );
                rec.internal = Some(internal);

                let stage = StageId::MergeContext;
                let b = self.bindings(&query).with_passages(passages);
                let output = self.call(stage, self.render(stage, &b)?, trace)?;
                let (answer, mode, _) = Self::answer_of(stage, &output)?;
                rec.decision = Decision { cot: String::new(), answer };
                rec.meta.decision_parse_mode = Some(mode);
                Ok(())
            }
            VariantId::Unified => self.unified(rec, trace),
        }
    }

    fn decide(&self, rec: &mut PipelineRecord, thinking: bool, trace: &mut Trace) -> Result<(), PipelineError> {
        let (decision, mode) = self.run_decision(&rec.query, rec.internal.as_ref(), rec.external.as_ref(), thinking, trace)?;
        rec.decision = decision;
        rec.meta.decision_parse_mode = Some(mode);
        Ok(())
    }

    /// Internal and external branches, optionally on two threads. Transcripts
    /// are always ordered internal first, then external. On failure the
    /// branches that did complete are kept on the record.
    fn both_branches(&self, rec: &mut PipelineRecord, trace: &mut Trace) -> Result<(), PipelineError> {
        let query = rec.query.clone();
        let variant = rec.variant;
        let mut internal_trace = Trace::default();
        let mut external_trace = Trace::default();
        let external_side = |t: &mut Trace| -> ExternalSide {
            let passages = self.retrieve(&query, variant)?;
            let branch = self.run_external_branch(&query, &passages, t);
            Ok((passages, branch))
        };
        let (internal, external) = if self.config.stage_branches_concurrent {
            std::thread::scope(|s| {
                let handle = s.spawn(|| self.run_internal_branch(&query, &mut internal_trace));
                let external = external_side(&mut external_trace);
                let internal = handle
                    .join()
                    .unwrap_or_else(|_| Err(PipelineError::Branch("internal branch panicked".into())));
                (internal, external)
            })
        } else {
            let internal = self.run_internal_branch(&query, &mut internal_trace);
            (internal, external_side(&mut external_trace))
        };
        trace.extend(internal_trace);
        trace.extend(external_trace);

        rec.internal = internal.as_ref().ok().cloned();
        let external = match external {
            Ok((passages, branch)) => {
                rec.retrieved = passages;
                rec.external = branch.as_ref().ok().cloned();
                branch
            }
            Err(e) => Err(e),
        };
        internal?;
        external?;
        Ok(())
    }

    fn unified(&self, rec: &mut PipelineRecord, trace: &mut Trace) -> Result<(), PipelineError> {
        let query = rec.query.clone();
        rec.retrieved = self.retrieve(&query, rec.variant)?;
        let stage = StageId::Unified;
        let b = self.bindings(&query).with_passages(rec.retrieved.clone());
        let output = self.call(stage, self.render(stage, &b)?, trace)?;
        let parsed = parse_stage_output(stage, &output).map_err(|_| PipelineError::EmptyStage(stage))?;
        let answer = parsed.answer.filter(|a| !a.is_empty()).ok_or(PipelineError::EmptyStage(stage))?;
        match parsed.background.filter(|s| !s.is_empty()) {
            Some(s) => rec.internal = Some(branch(None, s, KnowledgeSource::Internal)?),
            None => trace.flags.push(flags::UNIFIED_MISSING_INTERNAL),
        }
        match parsed.summary.filter(|s| !s.is_empty()) {
            Some(s) => rec.external = Some(branch(None, s, KnowledgeSource::External)?),
            None => trace.flags.push(flags::UNIFIED_MISSING_EXTERNAL),
        }
        let cot = parsed.thinking.filter(|s| !s.is_empty()).unwrap_or_else(|| {
            trace.flags.push(flags::UNIFIED_MISSING_THINKING);
            String::new()
        });
        if parsed.parse_mode == ParseMode::Fallback {
            trace.flags.push(flags::UNIFIED_ANSWER_FALLBACK);
        }
        rec.decision = Decision { cot, answer };
        rec.meta.decision_parse_mode = Some(parsed.parse_mode);
        Ok(())
    }

    /// Runs every query, at most `concurrency_limit` at a time. Output order
    /// matches input order.
    pub fn run_batch(&self, queries: &[Query]) -> Vec<PipelineRecord> {
        let workers = self.config.concurrency_limit.clamp(1, queries.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<PipelineRecord>>> = Mutex::new(vec![None; queries.len()]);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(q) = queries.get(i) else { break };
                    let record = self.run_query(q);
                    slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(record);
                });
            }
        });
        slots
            .into_inner()
            .unwrap_or_else(|e| e.into_inner())
            .into_iter()
            .map(|r| r.expect("every query produces a record"))
            .collect()
    }
}

type ExternalSide = Result<(Vec<Passage>, Result<Branch, PipelineError>), PipelineError>;

fn branch(candidate: Option<String>, knowledge: String, source: KnowledgeSource) -> Result<Branch, PipelineError> {
    let bad = |e: cocoa_core::model::ModelError| PipelineError::Branch(e.to_string());
    Ok(Branch {
        candidate: candidate.map(|c| CandidateAnswer::new(c, source)).transpose().map_err(bad)?,
        knowledge: InducedKnowledge::new(knowledge, source).map_err(bad)?,
    })
}
