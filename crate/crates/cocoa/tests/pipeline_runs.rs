mod common;

use std::sync::Arc;

use cocoa::generator::{FinishReason, Gateway, GenerateError, GenerationRequest, GenerationResult, Generator, MockGenerator, RoleTag};
use cocoa::pipeline::{Pipeline, PipelineConfig};
use cocoa::retrieval::Retriever;
use cocoa_core::bm25::RetrievalIndex;
use cocoa_core::model::{flags, validate_record};
use cocoa_core::prompt::{render_prompt, PromptBindings, StageId};
use cocoa_core::{ParseMode, VariantId};
use common::*;

fn retriever(n: usize) -> Retriever {
    Retriever::Local(Arc::new(RetrievalIndex::build(&passages(n), "test", 1.2, 0.75).unwrap()))
}

fn config(variant: VariantId) -> PipelineConfig {
    PipelineConfig { variant, canonical: true, ..PipelineConfig::default() }
}

fn reply(text: &str) -> Result<GenerationResult, GenerateError> {
    Ok(GenerationResult {
        text: text.to_string(),
        prompt_tokens: 0,
        completion_tokens: 0,
        finish_reason: FinishReason::Stop,
        retries: 0,
    })
}

#[test]
fn cocoa_zero_over_twenty_queries() {
    let n = 20;
    let gw = world_gateway(n, 4);
    let r = retriever(n);
    let records = Pipeline::new(&gw, Some(&r), config(VariantId::CocoaZero)).run_batch(&queries(n));
    assert_eq!(records.len(), n);
    for (i, rec) in records.iter().enumerate() {
        assert_eq!(rec.query.id, format!("q{i:02}"), "output order follows input order");
        assert!(validate_record(rec).is_empty(), "{:?}", validate_record(rec));
        let stages: Vec<StageId> = rec.transcripts.iter().map(|t| t.stage).collect();
        assert_eq!(
            stages,
            [
                StageId::InternalCandidate,
                StageId::InternalInduction,
                StageId::ExternalCandidate,
                StageId::ExternalInduction,
                StageId::Decision
            ]
        );
        assert_eq!(rec.retrieved.len(), 5);
        assert_eq!(rec.retrieved[0].id, format!("p{i:02}"));
        assert_eq!(rec.decision.answer, final_answer(i));
        assert_eq!(rec.internal.as_ref().unwrap().candidate.as_ref().unwrap().text, internal_guess(i));
        assert_eq!(rec.meta.decision_parse_mode, Some(ParseMode::TaggedHash));
        assert!(rec.meta.flags.is_empty());
        assert!(rec.meta.prompt_tokens > 0);
    }
}

#[test]
fn every_variant_has_its_shape() {
    let n = 4;
    let gw = world_gateway(n, 2);
    let r = retriever(n);
    for variant in VariantId::ALL {
        let records = Pipeline::new(&gw, Some(&r), config(variant)).run_batch(&queries(n));
        for rec in &records {
            assert!(!rec.is_failed(), "{variant}: {:?}", rec.meta.error);
            assert_eq!(rec.transcripts.len(), variant.expected_transcripts(), "{variant}");
            assert!(validate_record(rec).is_empty(), "{variant}: {:?}", validate_record(rec));
            assert_eq!(rec.retrieved.is_empty(), !variant.uses_retrieval(), "{variant}");
        }
    }
}

#[test]
fn transcripts_carry_exact_prompts() {
    let gw = world_gateway(2, 1);
    let r = retriever(2);
    let mut cfg = config(VariantId::NoInternal);
    cfg.k = 3;
    let rec = Pipeline::new(&gw, Some(&r), cfg).run_query(&queries(2)[1]);
    let expected = render_prompt(
        StageId::ExternalCandidate,
        &PromptBindings::question(question(1)).with_passages(rec.retrieved.clone()),
    )
    .unwrap();
    assert_eq!(rec.transcripts[0].prompt, expected);
    assert_eq!(rec.retrieved.len(), 3);
    assert!(!rec.transcripts[2].prompt.contains("Internal Reasoning Path"));
}

#[test]
fn canonical_runs_are_byte_identical_across_modes() {
    let n = 6;
    let r = retriever(n);
    let serialize = |concurrent: bool, workers: usize| {
        let gw = world_gateway(n, workers);
        let mut cfg = config(VariantId::CocoaZero);
        cfg.stage_branches_concurrent = concurrent;
        cfg.concurrency_limit = workers;
        let records = Pipeline::new(&gw, Some(&r), cfg).run_batch(&queries(n));
        records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect::<String>()
    };
    let a = serialize(true, 4);
    assert_eq!(a, serialize(true, 4));
    assert_eq!(a, serialize(false, 1));
    assert!(!a.contains("elapsed_ms"));
}

#[test]
fn failed_stage_yields_partial_record() {
    let n = 10;
    let world = MockGenerator::new(world_script(n));
    let broken = question(3);
    let backend: Arc<dyn Generator> = Arc::new(move |req: &GenerationRequest| {
        if req.role_tag == RoleTag::ExternalAgent && req.prompt.contains(&broken) {
            return reply("");
        }
        world.generate(req)
    });
    let gw = Gateway::new(backend, 4);
    let r = retriever(n);
    let records = Pipeline::new(&gw, Some(&r), config(VariantId::CocoaZero)).run_batch(&queries(n));
    let failed: Vec<_> = records.iter().filter(|r| r.is_failed()).collect();
    assert_eq!(failed.len(), 1);
    let rec = failed[0];
    assert_eq!(rec.query.id, "q03");
    assert_eq!(rec.meta.error.as_deref(), Some("external_candidate empty"));
    assert!(rec.internal.is_some(), "completed internal branch is kept");
    assert!(rec.external.is_none());
    assert_eq!(rec.retrieved.len(), 5);
    assert_eq!(rec.transcripts.len(), 3);
    assert_eq!(rec.transcripts[2].stage, StageId::ExternalCandidate);
    assert!(rec.decision.answer.is_empty());
    for ok in records.iter().filter(|r| !r.is_failed()) {
        assert!(validate_record(ok).is_empty());
    }
}

#[test]
fn parse_fallbacks_and_long_inductions_are_flagged() {
    let long = "word ".repeat(230);
    let backend: Arc<dyn Generator> = Arc::new(move |req: &GenerationRequest| {
        let p = &req.prompt;
        if p.contains("choose the best prediction") {
            reply("I would go with\nVexcity0")
        } else if p.contains("Please provide background") {
            reply(&format!("### Background: {long}"))
        } else if p.contains("generate a summary") {
            reply("The passages mention Vexcity0.")
        } else {
            reply("Vexcity0")
        }
    });
    let gw = Gateway::new(backend, 2);
    let r = retriever(1);
    let rec = Pipeline::new(&gw, Some(&r), config(VariantId::CocoaZero)).run_query(&queries(1)[0]);
    assert!(!rec.is_failed());
    assert!(validate_record(&rec).is_empty(), "{:?}", validate_record(&rec));
    for f in [flags::DECISION_FALLBACK, flags::INTERNAL_OVER_200_WORDS, flags::EXTERNAL_INDUCTION_FALLBACK] {
        assert!(rec.has_flag(f), "missing {f}: {:?}", rec.meta.flags);
    }
    assert_eq!(rec.decision.answer, "Vexcity0");
    assert_eq!(rec.decision.cot, "");
    assert_eq!(rec.meta.decision_parse_mode, Some(ParseMode::Fallback));
    assert_eq!(rec.external.unwrap().knowledge.text, "The passages mention Vexcity0.");
}

#[test]
fn merge_appends_generated_passage() {
    let gw = world_gateway(3, 1);
    let r = retriever(3);
    let rec = Pipeline::new(&gw, Some(&r), config(VariantId::Merge)).run_query(&queries(3)[2]);
    assert!(validate_record(&rec).is_empty(), "{:?}", validate_record(&rec));
    let internal = rec.internal.as_ref().unwrap();
    assert!(internal.candidate.is_none());
    assert_eq!(rec.transcripts[0].stage, StageId::InternalInduction);
    assert_eq!(rec.transcripts[1].stage, StageId::MergeContext);
    let merged = &rec.transcripts[1].prompt;
    assert!(merged.contains(&format!("Passage #6 Text: {}", internal.knowledge.text)), "{merged}");
    assert!(!merged.contains("Passage #7"));
    assert_eq!(rec.decision.answer, capital(2));
}

#[test]
fn unified_sections_and_missing_ones() {
    let gw = world_gateway(2, 1);
    let r = retriever(2);
    let rec = Pipeline::new(&gw, Some(&r), config(VariantId::Unified)).run_query(&queries(2)[0]);
    assert!(rec.meta.flags.is_empty());
    assert_eq!(rec.meta.decision_parse_mode, Some(ParseMode::TaggedXml));
    assert!(rec.internal.as_ref().unwrap().knowledge.text.contains("small country"));
    assert_eq!(rec.decision.cot, format!("Both sources name {}.", capital(0)));

    let bare: Arc<dyn Generator> = Arc::new(|_: &GenerationRequest| reply("<Answer>\nVexcity0<\\Answer>"));
    let gw = Gateway::new(bare, 1);
    let rec = Pipeline::new(&gw, Some(&r), config(VariantId::Unified)).run_query(&queries(2)[0]);
    assert_eq!(rec.decision.answer, "Vexcity0");
    for f in [flags::UNIFIED_MISSING_INTERNAL, flags::UNIFIED_MISSING_EXTERNAL, flags::UNIFIED_MISSING_THINKING] {
        assert!(rec.has_flag(f), "{f}");
    }
    assert!(validate_record(&rec).is_empty(), "{:?}", validate_record(&rec));
}

#[test]
fn unified_requests_use_the_larger_budget() {
    let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
    let log = seen.clone();
    let backend: Arc<dyn Generator> = Arc::new(move |req: &GenerationRequest| {
        log.lock().unwrap().push((req.role_tag, req.max_tokens, req.temperature));
        reply("<Answer>x<\\Answer>")
    });
    let gw = Gateway::new(backend, 1);
    let r = retriever(1);
    Pipeline::new(&gw, Some(&r), config(VariantId::Unified)).run_query(&queries(1)[0]);
    Pipeline::new(&gw, Some(&r), config(VariantId::ZeroShot)).run_query(&queries(1)[0]);
    assert_eq!(*seen.lock().unwrap(), vec![(RoleTag::Unified, 2048, 0.0), (RoleTag::DecisionAgent, 1024, 0.0)]);
}

#[test]
fn missing_retriever_fails_the_record() {
    let gw = world_gateway(1, 1);
    let rec = Pipeline::new(&gw, None, config(VariantId::StandardRag)).run_query(&queries(1)[0]);
    assert!(rec.is_failed());
    assert!(rec.transcripts.is_empty());
    let rec = Pipeline::new(&gw, None, config(VariantId::NoExternal)).run_query(&queries(1)[0]);
    assert!(!rec.is_failed(), "{:?}", rec.meta.error);
}

#[test]
fn task_instruction_reaches_every_prompt() {
    let gw = world_gateway(1, 1);
    let r = retriever(1);
    let mut cfg = config(VariantId::CocoaZero);
    cfg.task_instruction = Some("Answer with a city name.".into());
    let rec = Pipeline::new(&gw, Some(&r), cfg).run_query(&queries(1)[0]);
    for t in &rec.transcripts {
        assert!(t.prompt.contains(&format!("Answer with a city name.\n{}", question(0))), "{}", t.stage);
    }
}
