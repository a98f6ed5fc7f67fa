//! Long-chain SFT targets and DPO preference pairs built from pipeline
//! records.
//!
//! The input side of every sample is the unified prompt over the query and
//! its retrieved passages; the target concatenates internal knowledge,
//! external knowledge, reasoning and answer in the unified tag layout.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{exact_match, MetricError};
use crate::model::{PipelineRecord, VariantId};
use crate::prompt::{
    format_unified_output, parse_stage_output, render_prompt, PromptBindings, PromptError, StageId,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthesisError {
    #[error("record for `{id}` is {found}, expected {expected}")]
    WrongVariant { id: String, expected: VariantId, found: VariantId },
    #[error("record for `{id}` is incomplete: {missing}")]
    Incomplete { id: String, missing: &'static str },
    #[error("query id mismatch: `{0}` vs `{1}`")]
    QueryMismatch(String, String),
    #[error("long-chain target for `{0}` does not parse back into its sections")]
    Unrecoverable(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    /// CoCoA-zero answer does not contain a gold answer.
    EmFail,
    /// Zero-shot already answers correctly; nothing to prefer.
    ZsCorrect,
    /// CoCoA-zero answer is wrong, so there is no positive response.
    CocoaIncorrect,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::EmFail => "em_fail",
            Rejection::ZsCorrect => "zs_correct",
            Rejection::CocoaIncorrect => "cocoa_incorrect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict<T> {
    Accepted(T),
    Rejected(Rejection),
}

impl<T> Verdict<T> {
    pub fn accepted(self) -> Option<T> {
        match self {
            Verdict::Accepted(t) => Some(t),
            Verdict::Rejected(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub query_id: String,
    pub source_variant: VariantId,
    pub em: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSample {
    pub id: String,
    pub prompt: String,
    pub target: String,
    pub meta: SftMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoMeta {
    pub query_id: String,
    pub chosen_variant: VariantId,
    pub rejected_variant: VariantId,
    pub chosen_em: u8,
    pub rejected_em: u8,
    /// Answer extracted from the rejected completion.
    pub rejected_answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoSample {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: DpoMeta,
}

/// The four sections a long-chain target is made of.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainSections<'a> {
    pub internal: &'a str,
    pub external: &'a str,
    pub thinking: &'a str,
    pub answer: &'a str,
}

fn chain_sections(record: &PipelineRecord) -> Result<ChainSections<'_>, SynthesisError> {
    let id = || record.query.id.clone();
    if record.variant != VariantId::CocoaZero {
        return Err(SynthesisError::WrongVariant {
            id: id(),
            expected: VariantId::CocoaZero,
            found: record.variant,
        });
    }
    let incomplete = |missing| SynthesisError::Incomplete { id: id(), missing };
    if record.is_failed() {
        return Err(incomplete("record failed"));
    }
    let internal = record.internal.as_ref().ok_or_else(|| incomplete("s_in"))?;
    let external = record.external.as_ref().ok_or_else(|| incomplete("s_ex"))?;
    if record.retrieved.is_empty() {
        return Err(incomplete("retrieved passages"));
    }
    if record.decision.cot.is_empty() {
        return Err(incomplete("cot"));
    }
    if record.decision.answer.is_empty() {
        return Err(incomplete("answer"));
    }
    Ok(ChainSections {
        internal: &internal.knowledge.text,
        external: &external.knowledge.text,
        thinking: &record.decision.cot,
        answer: &record.decision.answer,
    })
}

/// Long-chain target `s_in ⊕ s_ex ⊕ cot ⊕ answer` in unified tag layout,
/// checked to parse back into exactly the same sections.
pub fn long_chain_target(id: &str, s: &ChainSections<'_>) -> Result<String, SynthesisError> {
    let target = format_unified_output(s.internal, s.external, s.thinking, s.answer);
    let parsed = parse_stage_output(StageId::Unified, &target)?;
    let same = parsed.background.as_deref() == Some(s.internal)
        && parsed.summary.as_deref() == Some(s.external)
        && parsed.thinking.as_deref() == Some(s.thinking)
        && parsed.answer.as_deref() == Some(s.answer);
    if same {
        Ok(target)
    } else {
        Err(SynthesisError::Unrecoverable(id.to_string()))
    }
}

/// Unified prompt over the record's query and retrieved passages.
pub fn training_prompt(record: &PipelineRecord, task_instruction: Option<&str>) -> Result<String, SynthesisError> {
    let bindings = PromptBindings::question(record.query.text.clone())
        .with_passages(record.retrieved.clone())
        .with_task_instruction(task_instruction.map(ToString::to_string));
    Ok(render_prompt(StageId::Unified, &bindings)?)
}

pub fn build_sft_sample<S: AsRef<str>>(
    record: &PipelineRecord,
    golds: &[S],
) -> Result<Verdict<SftSample>, SynthesisError> {
    let sections = chain_sections(record)?;
    let em = exact_match(sections.answer, golds)?;
    if em == 0 {
        return Ok(Verdict::Rejected(Rejection::EmFail));
    }
    let id = record.query.id.clone();
    Ok(Verdict::Accepted(SftSample {
        target: long_chain_target(&id, &sections)?,
        prompt: training_prompt(record, None)?,
        meta: SftMeta {
            query_id: id.clone(),
            source_variant: record.variant,
            em,
        },
        id,
    }))
}

/// Pairs a correct CoCoA-zero chain (chosen) with an incorrect zero-shot
/// completion (rejected) for the same query.
pub fn build_dpo_sample<S: AsRef<str>>(
    zero_shot: &PipelineRecord,
    cocoa: &PipelineRecord,
    golds: &[S],
) -> Result<Verdict<DpoSample>, SynthesisError> {
    if zero_shot.query.id != cocoa.query.id {
        return Err(SynthesisError::QueryMismatch(
            zero_shot.query.id.clone(),
            cocoa.query.id.clone(),
        ));
    }
    if zero_shot.variant != VariantId::ZeroShot {
        return Err(SynthesisError::WrongVariant {
            id: zero_shot.query.id.clone(),
            expected: VariantId::ZeroShot,
            found: zero_shot.variant,
        });
    }
    let sections = chain_sections(cocoa)?;
    let rejected = zero_shot
        .transcripts
        .first()
        .map(|t| t.output.clone())
        .filter(|o| !o.trim().is_empty())
        .ok_or_else(|| SynthesisError::Incomplete {
            id: zero_shot.query.id.clone(),
            missing: "zero-shot completion",
        })?;

    let chosen_em = exact_match(sections.answer, golds)?;
    if chosen_em == 0 {
        return Ok(Verdict::Rejected(Rejection::CocoaIncorrect));
    }
    let rejected_answer = zero_shot.decision.answer.clone();
    let rejected_em = exact_match(&rejected_answer, golds)?;
    if rejected_em == 1 {
        return Ok(Verdict::Rejected(Rejection::ZsCorrect));
    }
    let id = cocoa.query.id.clone();
    let chosen = long_chain_target(&id, &sections)?;
    if chosen == rejected {
        return Ok(Verdict::Rejected(Rejection::ZsCorrect));
    }
    Ok(Verdict::Accepted(DpoSample {
        prompt: training_prompt(cocoa, None)?,
        chosen,
        rejected,
        meta: DpoMeta {
            query_id: id.clone(),
            chosen_variant: VariantId::CocoaZero,
            rejected_variant: VariantId::ZeroShot,
            chosen_em,
            rejected_em,
            rejected_answer,
        },
        id,
    }))
}

/// Training settings the datasets are meant for, carried as provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparameters {
    pub dpo_beta: f64,
    pub rpo_alpha: f64,
    pub sft_learning_rate: f64,
    pub sft_epochs: u32,
    pub dpo_learning_rate: f64,
    pub batch_size: u32,
    pub gradient_accumulation: u32,
    pub max_input_length: u32,
    pub lora_r: u32,
    pub lora_alpha: u32,
    pub lora_dropout: f64,
    pub retrieval_k: usize,
}

impl Default for TrainingHyperparameters {
    fn default() -> Self {
        Self {
            dpo_beta: 0.2,
            rpo_alpha: 0.2,
            sft_learning_rate: 3e-5,
            sft_epochs: 5,
            dpo_learning_rate: 5e-6,
            batch_size: 1,
            gradient_accumulation: 4,
            max_input_length: 2048,
            lora_r: 16,
            lora_alpha: 16,
            lora_dropout: 0.05,
            retrieval_k: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sft_count: usize,
    pub dpo_count: usize,
    /// Rejections per kind, keyed `sft.em_fail`, `dpo.zs_correct`, ...
    pub rejections: BTreeMap<String, usize>,
    pub hyperparameters: TrainingHyperparameters,
}

impl DatasetManifest {
    pub fn count_rejection(&mut self, dataset: &str, reason: &str) {
        *self
            .rejections
            .entry(alloc::format!("{dataset}.{reason}"))
            .or_default() += 1;
    }
}

/// Accepted samples plus the manifest describing what was filtered out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOutput {
    pub sft: Vec<SftSample>,
    pub dpo: Vec<DpoSample>,
    pub manifest: DatasetManifest,
}

/// Builds both datasets from CoCoA-zero records and the zero-shot records of
/// the same queries. Records that failed, lack a zero-shot partner or cannot
/// be expressed as a recoverable long chain are counted, not exported.
pub fn synthesize(
    cocoa: &[PipelineRecord],
    zero_shot: &[PipelineRecord],
    hyperparameters: TrainingHyperparameters,
) -> Result<SynthesisOutput, SynthesisError> {
    let mut out = SynthesisOutput {
        manifest: DatasetManifest { hyperparameters, ..DatasetManifest::default() },
        ..SynthesisOutput::default()
    };
    let partners: BTreeMap<&str, &PipelineRecord> =
        zero_shot.iter().map(|r| (r.query.id.as_str(), r)).collect();
    for record in cocoa {
        let golds = &record.query.gold_answers;
        if golds.is_empty() {
            return Err(MetricError::MissingGolds(record.query.id.clone()).into());
        }
        if record.is_failed() {
            out.manifest.count_rejection("sft", "incomplete");
            out.manifest.count_rejection("dpo", "incomplete");
            continue;
        }
        match build_sft_sample(record, golds) {
            Ok(Verdict::Accepted(s)) => out.sft.push(s),
            Ok(Verdict::Rejected(r)) => out.manifest.count_rejection("sft", r.as_str()),
            Err(SynthesisError::Unrecoverable(_)) => out.manifest.count_rejection("sft", "unrecoverable"),
            Err(e) => return Err(e),
        }
        let Some(zs) = partners.get(record.query.id.as_str()) else {
            out.manifest.count_rejection("dpo", "missing_zero_shot");
            continue;
        };
        if zs.is_failed() {
            out.manifest.count_rejection("dpo", "incomplete");
            continue;
        }
        match build_dpo_sample(zs, record, golds) {
            Ok(Verdict::Accepted(s)) => out.dpo.push(s),
            Ok(Verdict::Rejected(r)) => out.manifest.count_rejection("dpo", r.as_str()),
            Err(SynthesisError::Unrecoverable(_)) => out.manifest.count_rejection("dpo", "unrecoverable"),
            Err(e) => return Err(e),
        }
    }
    out.manifest.sft_count = out.sft.len();
    out.manifest.dpo_count = out.dpo.len();
    Ok(out)
}
