//! Prompt templates, passage formatting and generator-output parsing.
//!
//! Templates are stored verbatim under `templates/`, one file per
//! [`StageId`], and compiled in with `include_str!`. Rendering substitutes
//! `{placeholder}` tokens in a single left-to-right pass, so bound text that
//! happens to contain braces is never re-expanded.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ParseMode, Passage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    InternalCandidate,
    InternalInduction,
    ExternalCandidate,
    ExternalInduction,
    Decision,
    Unified,
    ZeroShot,
    StandardRag,
    Cot,
    MergeContext,
}

impl StageId {
    pub const ALL: [StageId; 10] = [
        StageId::InternalCandidate,
        StageId::InternalInduction,
        StageId::ExternalCandidate,
        StageId::ExternalInduction,
        StageId::Decision,
        StageId::Unified,
        StageId::ZeroShot,
        StageId::StandardRag,
        StageId::Cot,
        StageId::MergeContext,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::InternalCandidate => "internal_candidate",
            StageId::InternalInduction => "internal_induction",
            StageId::ExternalCandidate => "external_candidate",
            StageId::ExternalInduction => "external_induction",
            StageId::Decision => "decision",
            StageId::Unified => "unified",
            StageId::ZeroShot => "zero_shot",
            StageId::StandardRag => "standard_rag",
            StageId::Cot => "cot",
            StageId::MergeContext => "merge_context",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            StageId::InternalCandidate => include_str!("../templates/internal_candidate.txt"),
            StageId::InternalInduction => include_str!("../templates/internal_induction.txt"),
            StageId::ExternalCandidate => include_str!("../templates/external_candidate.txt"),
            StageId::ExternalInduction => include_str!("../templates/external_induction.txt"),
            StageId::Decision => include_str!("../templates/decision.txt"),
            StageId::Unified => include_str!("../templates/unified.txt"),
            StageId::ZeroShot => include_str!("../templates/zero_shot.txt"),
            StageId::StandardRag => include_str!("../templates/standard_rag.txt"),
            StageId::Cot => include_str!("../templates/cot.txt"),
            StageId::MergeContext => include_str!("../templates/merge_context.txt"),
        }
    }

    /// Whether the stage's output is expected to carry a final answer.
    pub fn yields_answer(self) -> bool {
        !matches!(self, StageId::InternalInduction | StageId::ExternalInduction)
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("missing binding for {{{placeholder}}} in {stage} prompt")]
    MissingBinding { stage: StageId, placeholder: &'static str },
    #[error("binding `{field}` is not used by the {stage} prompt")]
    ExtraBinding { stage: StageId, field: &'static str },
    #[error("cannot format an empty passage list")]
    NoPassages,
    #[error("generator output is empty")]
    EmptyOutput,
}

/// Values substituted into a template.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptBindings {
    pub question: String,
    pub passages: Option<Vec<Passage>>,
    pub candidate_internal: Option<String>,
    pub candidate_external: Option<String>,
    pub induction_internal: Option<String>,
    pub induction_external: Option<String>,
    /// Task-specific instruction placed on the line before the question.
    pub task_instruction: Option<String>,
}

impl PromptBindings {
    pub fn question(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            ..Self::default()
        }
    }

    pub fn with_passages(mut self, passages: Vec<Passage>) -> Self {
        self.passages = Some(passages);
        self
    }

    pub fn with_task_instruction(mut self, instruction: Option<String>) -> Self {
        self.task_instruction = instruction;
        self
    }

    fn question_text(&self) -> String {
        match &self.task_instruction {
            Some(instr) => format!("{instr}\n{}", self.question),
            None => self.question.clone(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    Question,
    Passages,
    CandidateInternal,
    CandidateExternal,
    InductionInternal,
    InductionExternal,
}

impl Field {
    fn name(self) -> &'static str {
        match self {
            Field::Question => "question",
            Field::Passages => "passages",
            Field::CandidateInternal => "candidate_internal",
            Field::CandidateExternal => "candidate_external",
            Field::InductionInternal => "induction_internal",
            Field::InductionExternal => "induction_external",
        }
    }

    fn is_bound(self, b: &PromptBindings) -> bool {
        match self {
            Field::Question => true,
            Field::Passages => b.passages.is_some(),
            Field::CandidateInternal => b.candidate_internal.is_some(),
            Field::CandidateExternal => b.candidate_external.is_some(),
            Field::InductionInternal => b.induction_internal.is_some(),
            Field::InductionExternal => b.induction_external.is_some(),
        }
    }
}

/// Which blocks of the decision prompt are kept. The full layout is the
/// five-component prompt; ablations drop one branch or the reasoning line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionLayout {
    pub internal: bool,
    pub external: bool,
    pub thinking: bool,
}

impl DecisionLayout {
    pub const FULL: DecisionLayout = DecisionLayout {
        internal: true,
        external: true,
        thinking: true,
    };
}

impl Default for DecisionLayout {
    fn default() -> Self {
        Self::FULL
    }
}

const INTERNAL_BLOCK: &str =
    "### Internal Reasoning Path: \n{induction_in}\n\n### Internal Prediction 1: \n{answer_in}\n\n";
const EXTERNAL_BLOCK: &str =
    "### External Reasoning Path: \n{induction_ex}\n\n### External Prediction 2: \n{answer_ex}\n\n";
const THINKING_LINE: &str = "### Thingking: xxx (Please think step by step)\n";

/// Decision template with the blocks excluded by `layout` removed.
pub fn decision_template(layout: DecisionLayout) -> String {
    let mut t = StageId::Decision.template().to_string();
    if !layout.internal {
        t = t.replacen(INTERNAL_BLOCK, "", 1);
    }
    if !layout.external {
        t = t.replacen(EXTERNAL_BLOCK, "", 1);
    }
    if !layout.thinking {
        t = t.replacen(THINKING_LINE, "", 1);
    }
    t
}

fn placeholder_field(stage: StageId, name: &str) -> Option<(Field, &'static str)> {
    let field = match (stage, name) {
        (_, "question") => (Field::Question, "question"),
        (_, "passages") => (Field::Passages, "passages"),
        (StageId::InternalInduction, "answer") => (Field::CandidateInternal, "answer"),
        (StageId::ExternalInduction, "answer") => (Field::CandidateExternal, "answer"),
        (_, "induction_in") => (Field::InductionInternal, "induction_in"),
        (_, "answer_in") => (Field::CandidateInternal, "answer_in"),
        (_, "induction_ex") => (Field::InductionExternal, "induction_ex"),
        (_, "answer_ex") => (Field::CandidateExternal, "answer_ex"),
        _ => return None,
    };
    Some(field)
}

/// Renders the template of `stage` with `bindings`.
pub fn render_prompt(stage: StageId, bindings: &PromptBindings) -> Result<String, PromptError> {
    render_template(stage, stage.template(), bindings)
}

/// Renders the decision prompt with some blocks removed.
pub fn render_decision(layout: DecisionLayout, bindings: &PromptBindings) -> Result<String, PromptError> {
    render_template(StageId::Decision, &decision_template(layout), bindings)
}

fn render_template(stage: StageId, template: &str, b: &PromptBindings) -> Result<String, PromptError> {
    let segments = split_template(stage, template);
    let demanded: Vec<Field> = segments
        .iter()
        .filter_map(|s| match s {
            Segment::Slot(f, _) => Some(*f),
            Segment::Text(_) => None,
        })
        .collect();

    for field in [
        Field::Passages,
        Field::CandidateInternal,
        Field::CandidateExternal,
        Field::InductionInternal,
        Field::InductionExternal,
    ] {
        if field.is_bound(b) && !demanded.contains(&field) {
            return Err(PromptError::ExtraBinding { stage, field: field.name() });
        }
    }

    let mut out = String::with_capacity(template.len() + 256);
    for seg in segments {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Slot(field, placeholder) => {
                let missing = PromptError::MissingBinding { stage, placeholder };
                match field {
                    Field::Question => out.push_str(&b.question_text()),
                    Field::Passages => {
                        let passages = b.passages.as_ref().ok_or(missing)?;
                        out.push_str(&format_passages(passages)?);
                    }
                    Field::CandidateInternal => out.push_str(b.candidate_internal.as_ref().ok_or(missing)?),
                    Field::CandidateExternal => out.push_str(b.candidate_external.as_ref().ok_or(missing)?),
                    Field::InductionInternal => out.push_str(b.induction_internal.as_ref().ok_or(missing)?),
                    Field::InductionExternal => out.push_str(b.induction_external.as_ref().ok_or(missing)?),
                }
            }
        }
    }
    Ok(out)
}

enum Segment<'a> {
    Text(&'a str),
    Slot(Field, &'static str),
}

fn split_template(stage: StageId, template: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}').map(|c| open + c) else { break };
        match placeholder_field(stage, &rest[open + 1..close]) {
            Some((field, name)) => {
                out.push(Segment::Text(&rest[..open]));
                out.push(Segment::Slot(field, name));
                rest = &rest[close + 1..];
            }
            None => {
                out.push(Segment::Text(&rest[..=open]));
                rest = &rest[open + 1..];
            }
        }
    }
    out.push(Segment::Text(rest));
    out
}

/// Formats retrieved passages as numbered title/text line pairs separated by
/// blank lines.
pub fn format_passages(passages: &[Passage]) -> Result<String, PromptError> {
    if passages.is_empty() {
        return Err(PromptError::NoPassages);
    }
    let blocks: Vec<String> = passages
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let n = i + 1;
            format!("Passage #{n} Title: {}\nPassage #{n} Text: {}", p.title, p.text)
        })
        .collect();
    Ok(blocks.join("\n\n"))
}

/// Sections extracted from one generator output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedSections {
    pub background: Option<String>,
    pub summary: Option<String>,
    pub thinking: Option<String>,
    pub answer: Option<String>,
    pub parse_mode: ParseMode,
}

const XML_TAGS: [&str; 4] = ["Internal", "External", "Thinking", "Answer"];

#[derive(Clone, Copy)]
enum HashSection {
    Background,
    Summary,
    Thinking,
    Answer,
}

const HASH_MARKERS: [(&str, HashSection); 5] = [
    ("### Background:", HashSection::Background),
    ("### Summary:", HashSection::Summary),
    ("### Thinking:", HashSection::Thinking),
    ("### Thingking:", HashSection::Thinking),
    ("### Short Answer:", HashSection::Answer),
];

/// Splits a generator output into its sections.
///
/// Unified outputs use `<Tag> ... <\Tag>` blocks; staged outputs use
/// `### Name:` headings. When a stage that should produce an answer has no
/// recognizable answer section, the last non-empty line is taken and the
/// mode is reported as [`ParseMode::Fallback`].
pub fn parse_stage_output(stage: StageId, text: &str) -> Result<ParsedSections, PromptError> {
    if text.trim().is_empty() {
        return Err(PromptError::EmptyOutput);
    }
    let mut sections = parse_xml(text).or_else(|| parse_hash(text)).unwrap_or(ParsedSections {
        background: None,
        summary: None,
        thinking: None,
        answer: None,
        parse_mode: ParseMode::Fallback,
    });
    if stage.yields_answer() && sections.answer.is_none() {
        sections.answer = last_content_line(text);
        sections.parse_mode = ParseMode::Fallback;
    }
    Ok(sections)
}

fn closing_variants(tag: &str) -> [String; 3] {
    [format!("<\\{tag}>"), format!("<\\\\{tag}>"), format!("</{tag}>")]
}

fn parse_xml(text: &str) -> Option<ParsedSections> {
    let mut found = [None, None, None, None];
    let mut any = false;
    for (slot, tag) in found.iter_mut().zip(XML_TAGS) {
        let open = format!("<{tag}>");
        let Some(start) = text.find(&open).map(|i| i + open.len()) else { continue };
        any = true;
        let body = &text[start..];
        let close = closing_variants(tag)
            .iter()
            .filter_map(|c| body.find(c.as_str()))
            .min();
        let end = close.unwrap_or_else(|| {
            XML_TAGS
                .iter()
                .filter(|t| **t != tag)
                .filter_map(|t| body.find(&format!("<{t}>")))
                .min()
                .unwrap_or(body.len())
        });
        *slot = Some(body[..end].trim().to_string());
    }
    if !any {
        return None;
    }
    let [background, summary, thinking, answer] = found;
    Some(ParsedSections {
        background,
        summary,
        thinking,
        answer: answer.filter(|a| !a.is_empty()),
        parse_mode: ParseMode::TaggedXml,
    })
}

fn parse_hash(text: &str) -> Option<ParsedSections> {
    let mut out = ParsedSections {
        background: None,
        summary: None,
        thinking: None,
        answer: None,
        parse_mode: ParseMode::TaggedHash,
    };
    let mut any = false;
    for (marker, section) in HASH_MARKERS {
        let Some(start) = text.find(marker).map(|i| i + marker.len()) else { continue };
        let body = &text[start..];
        let end = body.find("###").unwrap_or(body.len());
        let value = body[..end].trim().to_string();
        let slot = match section {
            HashSection::Background => &mut out.background,
            HashSection::Summary => &mut out.summary,
            HashSection::Thinking => &mut out.thinking,
            HashSection::Answer => &mut out.answer,
        };
        if slot.is_none() {
            *slot = Some(value);
            any = true;
        }
    }
    if out.answer.as_deref() == Some("") {
        out.answer = None;
    }
    any.then_some(out)
}

/// Last non-empty line, ignoring lines that consist only of section tags.
fn last_content_line(text: &str) -> Option<String> {
    text.lines()
        .rev()
        .map(|line| {
            let mut l = line.to_string();
            for tag in XML_TAGS {
                l = l.replace(&format!("<{tag}>"), "");
                for c in closing_variants(tag) {
                    l = l.replace(c.as_str(), "");
                }
            }
            l.trim().to_string()
        })
        .find(|l| !l.is_empty())
}

/// Serializes the four long-chain sections in the layout requested by the
/// unified prompt's format block.
pub fn format_unified_output(internal: &str, external: &str, thinking: &str, answer: &str) -> String {
    format!(
        "<Internal>\n{internal}\n<\\Internal>\n<External>\n{external}\n<\\External>\n<Thinking>\n{thinking}\n<\\Thinking>\n<Answer>\n{answer}<\\Answer>"
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn passage(id: &str, title: &str, text: &str) -> Passage {
        Passage::new(id, title, text).unwrap()
    }

    #[test]
    fn internal_candidate_renders() {
        let out = render_prompt(StageId::InternalCandidate, &PromptBindings::question("Q?")).unwrap();
        assert_eq!(
            out,
            "### Instruction:\n Answer the question below concisely in a few words.\n\n### Input:\nQ?\n"
        );
    }

    #[test]
    fn decision_keeps_typo() {
        let b = PromptBindings {
            question: "Q?".into(),
            candidate_internal: Some("A".into()),
            candidate_external: Some("B".into()),
            induction_internal: Some("S_in".into()),
            induction_external: Some("S_ex".into()),
            ..Default::default()
        };
        let out = render_prompt(StageId::Decision, &b).unwrap();
        assert!(out.contains("### Thingking: xxx (Please think step by step)\n"));
        assert!(out.starts_with("### Internal Reasoning Path: \nS_in\n\n### Internal Prediction 1: \nA\n\n"));
    }

    #[test]
    fn missing_prediction_binding() {
        let err = render_prompt(StageId::InternalInduction, &PromptBindings::question("Q?")).unwrap_err();
        assert_eq!(
            err,
            PromptError::MissingBinding {
                stage: StageId::InternalInduction,
                placeholder: "answer"
            }
        );
        assert!(err.to_string().contains("{answer}"));
    }

    #[test]
    fn extra_binding_rejected() {
        let b = PromptBindings::question("Q?").with_passages(vec![passage("p", "T", "X")]);
        let err = render_prompt(StageId::InternalCandidate, &b).unwrap_err();
        assert!(matches!(err, PromptError::ExtraBinding { field: "passages", .. }));
    }

    #[test]
    fn bound_text_is_not_reexpanded() {
        let out = render_prompt(StageId::ZeroShot, &PromptBindings::question("what is {passages}?")).unwrap();
        assert!(out.contains("what is {passages}?"));
    }

    #[test]
    fn task_instruction_precedes_question() {
        let b = PromptBindings::question("Is water wet?").with_task_instruction(Some("Say true or false.".into()));
        let out = render_prompt(StageId::ZeroShot, &b).unwrap();
        assert!(out.contains("### Input:\nSay true or false.\nIs water wet?\n"));
    }

    #[test]
    fn passages_formatting() {
        assert_eq!(
            format_passages(&[passage("p", "T", "X")]).unwrap(),
            "Passage #1 Title: T\nPassage #1 Text: X"
        );
        assert_eq!(
            format_passages(&[passage("a", "A", "x"), passage("b", "B", "y")]).unwrap(),
            "Passage #1 Title: A\nPassage #1 Text: x\n\nPassage #2 Title: B\nPassage #2 Text: y"
        );
        assert_eq!(
            format_passages(&[passage("p", "", "X")]).unwrap(),
            "Passage #1 Title: \nPassage #1 Text: X"
        );
        assert_eq!(format_passages(&[]), Err(PromptError::NoPassages));
    }

    #[test]
    fn ablated_decision_layouts() {
        let no_internal = decision_template(DecisionLayout { internal: false, ..DecisionLayout::FULL });
        assert!(!no_internal.contains("Internal"));
        assert!(no_internal.contains("{answer_ex}"));
        let no_think = decision_template(DecisionLayout { thinking: false, ..DecisionLayout::FULL });
        assert!(!no_think.contains("Thingking"));
        assert!(no_think.ends_with("### Generate Format:\n### Short Answer: xxx (just in a few words)\n"));
    }

    #[test]
    fn parse_hash_sections() {
        let p = parse_stage_output(StageId::Decision, "### Thinking: because X\n### Short Answer: Paris").unwrap();
        assert_eq!(p.thinking.as_deref(), Some("because X"));
        assert_eq!(p.answer.as_deref(), Some("Paris"));
        assert_eq!(p.parse_mode, ParseMode::TaggedHash);

        let typo = parse_stage_output(StageId::Decision, "### Thingking: hmm\n### Short Answer: Rome\n").unwrap();
        assert_eq!(typo.thinking.as_deref(), Some("hmm"));
        assert_eq!(typo.answer.as_deref(), Some("Rome"));
    }

    #[test]
    fn parse_xml_sections() {
        let text = "<Internal>\nA\n<\\Internal>\n<External>\nB\n<\\External>\n<Thinking>\nC\n<\\Thinking>\n<Answer>\nParis<\\Answer>";
        let p = parse_stage_output(StageId::Unified, text).unwrap();
        assert_eq!(p.background.as_deref(), Some("A"));
        assert_eq!(p.summary.as_deref(), Some("B"));
        assert_eq!(p.thinking.as_deref(), Some("C"));
        assert_eq!(p.answer.as_deref(), Some("Paris"));
        assert_eq!(p.parse_mode, ParseMode::TaggedXml);
    }

    #[test]
    fn xml_accepts_other_closers_and_trailing_prose() {
        let text = "<Internal>\nA\n</Internal>\n<Answer>\nParis<\\\\Answer>\nHope this helps!";
        let p = parse_stage_output(StageId::Unified, text).unwrap();
        assert_eq!(p.background.as_deref(), Some("A"));
        assert_eq!(p.answer.as_deref(), Some("Paris"));
        assert_eq!(p.thinking, None);
    }

    #[test]
    fn fallback_last_line() {
        let p = parse_stage_output(StageId::Decision, "I think the answer is\nParis").unwrap();
        assert_eq!(p.answer.as_deref(), Some("Paris"));
        assert_eq!(p.parse_mode, ParseMode::Fallback);
        assert_eq!(parse_stage_output(StageId::Decision, " \n\t"), Err(PromptError::EmptyOutput));
    }

    #[test]
    fn induction_without_marker_is_fallback() {
        let p = parse_stage_output(StageId::InternalInduction, "Paris is a city.").unwrap();
        assert_eq!(p.parse_mode, ParseMode::Fallback);
        assert_eq!(p.background, None);
    }

    #[test]
    fn unified_missing_answer_falls_back() {
        let p = parse_stage_output(StageId::Unified, "<Internal>\nA\n<\\Internal>\nso it is Paris").unwrap();
        assert_eq!(p.parse_mode, ParseMode::Fallback);
        assert_eq!(p.answer.as_deref(), Some("so it is Paris"));
        assert_eq!(p.background.as_deref(), Some("A"));
    }

    fn section() -> impl Strategy<Value = String> {
        "[A-Za-z0-9][A-Za-z0-9 .,'\n-]{0,40}[A-Za-z0-9.]".prop_map(|s| s)
    }

    proptest! {
        #[test]
        fn unified_round_trip(a in section(), b in section(), c in section(), d in "[A-Za-z0-9][A-Za-z0-9 ]{0,20}[A-Za-z0-9]") {
            let text = format_unified_output(&a, &b, &c, &d);
            let p = parse_stage_output(StageId::Unified, &text).unwrap();
            prop_assert_eq!(p.parse_mode, ParseMode::TaggedXml);
            prop_assert_eq!(p.background.as_deref(), Some(a.as_str()));
            prop_assert_eq!(p.summary.as_deref(), Some(b.as_str()));
            prop_assert_eq!(p.thinking.as_deref(), Some(c.as_str()));
            prop_assert_eq!(p.answer.as_deref(), Some(d.as_str()));
        }
    }
}
