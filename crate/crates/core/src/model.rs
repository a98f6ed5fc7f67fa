//! Domain types shared by every stage of the pipeline.
//!
//! All text is carried as UTF-8 exactly as produced; nothing here trims or
//! normalizes. Normalization only happens inside [`crate::metrics`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::StageId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("{field} must be non-empty")]
    Empty { field: &'static str },
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
}

/// A question together with its acceptable answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    #[serde(alias = "question")]
    pub text: String,
    #[serde(default, alias = "answers", alias = "golds")]
    pub gold_answers: Vec<String>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, ModelError> {
        let query = Self {
            id: id.into(),
            text: text.into(),
            gold_answers: Vec::new(),
        };
        query.check()?;
        Ok(query)
    }

    pub fn with_golds<I, S>(mut self, golds: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.gold_answers = golds.into_iter().map(Into::into).collect();
        self
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::Empty { field: "query.text" });
        }
        if self.id.is_empty() {
            return Err(ModelError::Empty { field: "query.id" });
        }
        Ok(())
    }
}

/// One retrievable unit of the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Passage {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let passage = Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        };
        passage.check()?;
        Ok(passage)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::Empty { field: "passage.id" });
        }
        if self.text.is_empty() {
            return Err(ModelError::Empty { field: "passage.text" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeSource {
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub text: String,
    pub source: KnowledgeSource,
}

impl CandidateAnswer {
    pub fn new(text: impl Into<String>, source: KnowledgeSource) -> Result<Self, ModelError> {
        let text = text.into();
        if text.is_empty() {
            return Err(ModelError::Empty { field: "candidate.text" });
        }
        Ok(Self { text, source })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InducedKnowledge {
    pub text: String,
    pub source: KnowledgeSource,
}

impl InducedKnowledge {
    pub fn new(text: impl Into<String>, source: KnowledgeSource) -> Result<Self, ModelError> {
        let text = text.into();
        if text.is_empty() {
            return Err(ModelError::Empty { field: "knowledge.text" });
        }
        Ok(Self { text, source })
    }
}

/// Output of one knowledge-induction agent. `candidate` is absent when the
/// knowledge came from single-pass unified generation or the merge probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub candidate: Option<CandidateAnswer>,
    pub knowledge: InducedKnowledge,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub cot: String,
    pub answer: String,
}

/// How a generator output was split into sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    TaggedXml,
    TaggedHash,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantId {
    CocoaZero,
    NoInternal,
    NoExternal,
    NoThink,
    ZeroShot,
    StandardRag,
    Cot,
    Merge,
    Unified,
}

impl VariantId {
    pub const ALL: [VariantId; 9] = [
        VariantId::CocoaZero,
        VariantId::NoInternal,
        VariantId::NoExternal,
        VariantId::NoThink,
        VariantId::ZeroShot,
        VariantId::StandardRag,
        VariantId::Cot,
        VariantId::Merge,
        VariantId::Unified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantId::CocoaZero => "cocoa_zero",
            VariantId::NoInternal => "no_internal",
            VariantId::NoExternal => "no_external",
            VariantId::NoThink => "no_think",
            VariantId::ZeroShot => "zero_shot",
            VariantId::StandardRag => "standard_rag",
            VariantId::Cot => "cot",
            VariantId::Merge => "merge",
            VariantId::Unified => "unified",
        }
    }

    /// Number of generator calls a successful run of this variant makes.
    pub fn expected_transcripts(self) -> usize {
        match self {
            VariantId::CocoaZero | VariantId::NoThink => 5,
            VariantId::NoInternal | VariantId::NoExternal => 3,
            VariantId::Merge => 2,
            VariantId::ZeroShot | VariantId::StandardRag | VariantId::Cot | VariantId::Unified => 1,
        }
    }

    pub fn uses_retrieval(self) -> bool {
        !matches!(
            self,
            VariantId::NoExternal | VariantId::ZeroShot | VariantId::Cot
        )
    }

    fn wants_internal(self) -> Presence {
        match self {
            VariantId::CocoaZero | VariantId::NoThink | VariantId::NoExternal => Presence::Full,
            VariantId::Merge => Presence::KnowledgeOnly,
            VariantId::Unified => Presence::Optional,
            _ => Presence::Absent,
        }
    }

    fn wants_external(self) -> Presence {
        match self {
            VariantId::CocoaZero | VariantId::NoThink | VariantId::NoInternal => Presence::Full,
            VariantId::Unified => Presence::Optional,
            _ => Presence::Absent,
        }
    }

    fn requires_cot(self) -> bool {
        matches!(
            self,
            VariantId::CocoaZero | VariantId::NoInternal | VariantId::NoExternal | VariantId::Unified
        )
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Presence {
    Full,
    KnowledgeOnly,
    Optional,
    Absent,
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VariantId::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

/// One generator call: the stage that issued it, the exact prompt and the
/// raw completion text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub stage: StageId,
    pub prompt: String,
    pub output: String,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

/// Flags recorded on a record when a stage needed lenient handling.
pub mod flags {
    pub const DECISION_FALLBACK: &str = "decision_fallback";
    pub const DECISION_MISSING_THINKING: &str = "decision_missing_thinking";
    pub const INTERNAL_INDUCTION_FALLBACK: &str = "internal_induction_fallback";
    pub const EXTERNAL_INDUCTION_FALLBACK: &str = "external_induction_fallback";
    pub const INTERNAL_OVER_200_WORDS: &str = "internal_induction_over_200_words";
    pub const EXTERNAL_OVER_200_WORDS: &str = "external_induction_over_200_words";
    pub const UNIFIED_MISSING_INTERNAL: &str = "unified_missing_internal";
    pub const UNIFIED_MISSING_EXTERNAL: &str = "unified_missing_external";
    pub const UNIFIED_MISSING_THINKING: &str = "unified_missing_thinking";
    pub const UNIFIED_ANSWER_FALLBACK: &str = "unified_answer_fallback";
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    /// Wall-clock duration; omitted in canonical output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_parse_mode: Option<ParseMode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    /// Set when the query failed part-way; the rest of the record is partial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Full trace of one query through one pipeline variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub query: Query,
    pub variant: VariantId,
    pub retrieved: Vec<Passage>,
    pub internal: Option<Branch>,
    pub external: Option<Branch>,
    pub decision: Decision,
    pub transcripts: Vec<Transcript>,
    pub meta: RecordMeta,
}

impl PipelineRecord {
    pub fn new(query: Query, variant: VariantId) -> Self {
        Self {
            query,
            variant,
            retrieved: Vec::new(),
            internal: None,
            external: None,
            decision: Decision::default(),
            transcripts: Vec::new(),
            meta: RecordMeta::default(),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.meta.error.is_some()
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.meta.flags.iter().any(|f| f == flag)
    }

    pub fn push_flag(&mut self, flag: &str) {
        if !self.has_flag(flag) {
            self.meta.flags.push(flag.to_string());
        }
    }

    /// Drops wall-clock fields so that two runs over the same inputs
    /// serialize identically.
    pub fn canonicalize(&mut self) {
        self.meta.elapsed_ms = None;
    }

    fn transcript_for(&self, stage: StageId) -> Option<&Transcript> {
        self.transcripts.iter().find(|t| t.stage == stage)
    }
}

/// Checks every record invariant and returns one message per violation.
pub fn validate_record(record: &PipelineRecord) -> Vec<String> {
    let mut out = Vec::new();
    let variant = record.variant;

    if record.query.text.trim().is_empty() {
        out.push("query.text must be non-empty".to_string());
    }
    if record.decision.answer.is_empty() {
        out.push("decision.answer must be non-empty".to_string());
    }
    let cot_excused = record.has_flag(flags::DECISION_FALLBACK)
        || record.has_flag(flags::DECISION_MISSING_THINKING)
        || record.has_flag(flags::UNIFIED_MISSING_THINKING);
    if variant.requires_cot() && record.decision.cot.is_empty() && !cot_excused {
        out.push(format!("decision.cot must be non-empty for {variant}"));
    }

    check_branch(&mut out, "internal", variant.wants_internal(), variant, record.internal.as_ref(), KnowledgeSource::Internal);
    check_branch(&mut out, "external", variant.wants_external(), variant, record.external.as_ref(), KnowledgeSource::External);

    if variant.uses_retrieval() {
        if record.retrieved.is_empty() && !record.is_failed() {
            out.push(format!("retrieved passages required for {variant}"));
        }
    } else if !record.retrieved.is_empty() {
        out.push(format!("retrieved must be empty for {variant}"));
    }
    for (i, p) in record.retrieved.iter().enumerate() {
        if record.retrieved[..i].iter().any(|q| q.id == p.id) {
            out.push(format!("retrieved contains duplicate passage id `{}`", p.id));
        }
    }

    let expected = variant.expected_transcripts();
    if !record.is_failed() && record.transcripts.len() != expected {
        out.push(format!(
            "transcripts: expected {expected} entries for {variant}, found {}",
            record.transcripts.len()
        ));
    }

    check_provenance(&mut out, record);
    out
}

fn check_branch(
    out: &mut Vec<String>,
    name: &str,
    presence: Presence,
    variant: VariantId,
    branch: Option<&Branch>,
    source: KnowledgeSource,
) {
    match (presence, branch) {
        (Presence::Full | Presence::KnowledgeOnly, None) => {
            out.push(format!("{name} branch required for {variant}"));
        }
        (Presence::Absent, Some(_)) => {
            out.push(format!("{name} branch must be absent for {variant}"));
        }
        _ => {}
    }
    let Some(branch) = branch else { return };
    match (&branch.candidate, presence) {
        (None, Presence::Full) => out.push(format!("{name}.candidate required for {variant}")),
        (Some(c), _) => {
            if c.text.is_empty() {
                out.push(format!("{name}.candidate.text must be non-empty"));
            }
            if c.source != source {
                out.push(format!("{name}.candidate.source must be {source:?}"));
            }
        }
        _ => {}
    }
    if branch.knowledge.text.is_empty() {
        out.push(format!("{name}.knowledge.text must be non-empty"));
    }
    if branch.knowledge.source != source {
        out.push(format!("{name}.knowledge.source must be {source:?}"));
    }
}

/// Every stage output must be a verbatim slice of the transcript it came from.
fn check_provenance(out: &mut Vec<String>, record: &PipelineRecord) {
    let mut expect = |field: &str, value: &str, stage: StageId| {
        if value.is_empty() {
            return;
        }
        match record.transcript_for(stage) {
            Some(t) if t.output.contains(value) => {}
            Some(_) => out.push(format!("{field} is not a substring of the {stage} output")),
            None => out.push(format!("{field} has no {stage} transcript")),
        }
    };
    let unified = record.variant == VariantId::Unified;
    if let Some(b) = &record.internal {
        if let Some(c) = &b.candidate {
            expect("internal.candidate", &c.text, StageId::InternalCandidate);
        }
        let stage = if unified { StageId::Unified } else { StageId::InternalInduction };
        expect("internal.knowledge", &b.knowledge.text, stage);
    }
    if let Some(b) = &record.external {
        if let Some(c) = &b.candidate {
            expect("external.candidate", &c.text, StageId::ExternalCandidate);
        }
        let stage = if unified { StageId::Unified } else { StageId::ExternalInduction };
        expect("external.knowledge", &b.knowledge.text, stage);
    }
    if let Some(last) = record.transcripts.last() {
        if !record.is_failed() {
            for (field, value) in [("decision.answer", &record.decision.answer), ("decision.cot", &record.decision.cot)] {
                if !value.is_empty() && !last.output.contains(value.as_str()) {
                    out.push(format!("{field} is not a substring of the {} output", last.stage));
                }
            }
        }
    }
}
