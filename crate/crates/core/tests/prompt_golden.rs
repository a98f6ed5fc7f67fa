use cocoa_core::prompt::{render_prompt, PromptBindings, StageId};
use cocoa_core::Passage;

fn passages() -> Vec<Passage> {
    vec![
        Passage::new("p1", "Hamlet", "Hamlet is a tragedy written by William Shakespeare.").unwrap(),
        Passage::new("p2", "", "Shakespeare was born in Stratford-upon-Avon.").unwrap(),
    ]
}

/// Bindings exercising every placeholder a stage demands.
pub fn bindings_for(stage: StageId) -> PromptBindings {
    let base = PromptBindings::question("Who wrote Hamlet?");
    match stage {
        StageId::InternalCandidate | StageId::ZeroShot | StageId::Cot => base,
        StageId::ExternalCandidate | StageId::StandardRag | StageId::MergeContext | StageId::Unified => {
            base.with_passages(passages())
        }
        StageId::InternalInduction => PromptBindings {
            candidate_internal: Some("William Shakespeare".into()),
            ..base
        },
        StageId::ExternalInduction => PromptBindings {
            candidate_external: Some("Shakespeare".into()),
            ..base.with_passages(passages())
        },
        StageId::Decision => PromptBindings {
            candidate_internal: Some("William Shakespeare".into()),
            candidate_external: Some("Shakespeare".into()),
            induction_internal: Some("Hamlet was written by William Shakespeare around 1600.".into()),
            induction_external: Some(
                "Passage 1 states that Hamlet is a tragedy written by William Shakespeare.".into(),
            ),
            ..base
        },
    }
}

#[test]
fn every_stage_matches_its_golden_rendering() {
    for stage in StageId::ALL {
        let path = format!("{}/tests/golden/{}.txt", env!("CARGO_MANIFEST_DIR"), stage.as_str());
        let golden = std::fs::read_to_string(&path).unwrap();
        let rendered = render_prompt(stage, &bindings_for(stage)).unwrap();
        assert_eq!(rendered, golden, "stage {stage} differs from {path}");
    }
}

#[test]
fn rendering_is_stable() {
    for stage in StageId::ALL {
        let a = render_prompt(stage, &bindings_for(stage)).unwrap();
        let b = render_prompt(stage, &bindings_for(stage)).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains('\r'));
    }
}
