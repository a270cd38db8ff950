//! Coding stage over a whole corpus with the mock backend.

use std::sync::Arc;

use thematica::coding::{self, CodeKind, CodingError, CodingOptions, KindSpec};
use thematica::corpus::{self, ChunkBounds, CleaningRules, CorpusManifest, Interview};
use thematica::gateway::mock::{FaultRule, MockBackend};
use thematica::gateway::synthetic::SyntheticResponder;
use thematica::gateway::{stage, BackendFailure, Gateway, ModelProfile, RetryPolicy};

fn manifest() -> CorpusManifest {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/interviews");
    let rules = CleaningRules::default();
    let interviews = ["interview_01.txt", "interview_02.txt"]
        .iter()
        .map(|f| {
            let raw = std::fs::read_to_string(dir.join(f)).unwrap();
            Interview::from_text(f.trim_end_matches(".txt"), dir.join(f).to_str().unwrap(), raw, &rules).unwrap()
        })
        .collect();
    corpus::manifest_from_interviews(interviews, &rules, ChunkBounds::new(60, 120).unwrap()).unwrap()
}

fn setup() -> (Arc<MockBackend>, Gateway) {
    let mock = Arc::new(MockBackend::new(3).with_responder(SyntheticResponder));
    let gw = Gateway::new(mock.clone(), ModelProfile::default()).with_retry(RetryPolicy::immediate(0));
    (mock, gw)
}

#[test]
fn one_call_per_chunk_and_kind() {
    let m = manifest();
    let (mock, gw) = setup();
    let out = coding::code_corpus(&m, &KindSpec::defaults(), &gw, &CodingOptions::default()).unwrap();
    assert_eq!(mock.transmitted().len(), m.chunks.len() * 4);
    assert_eq!(out.report.pairs_succeeded, m.chunks.len() * 4);
    for kind in CodeKind::ALL {
        let codes = &out.codes[&kind];
        assert!(!codes.is_empty());
        assert!(codes.iter().all(|c| c.kind == kind && c.provenance.len() == 1));
    }
}

#[test]
fn empty_corpus_makes_no_calls() {
    let m = CorpusManifest {
        chunks: vec![],
        ..manifest()
    };
    let (mock, gw) = setup();
    let out = coding::code_corpus(&m, &KindSpec::defaults(), &gw, &CodingOptions::default()).unwrap();
    assert_eq!(mock.attempts(), 0);
    assert!(out.codes.values().all(Vec::is_empty));
}

#[test]
fn single_failure_is_tolerated_but_many_abort() {
    let m = manifest();
    let (mock, gw) = setup();
    let words: Vec<&str> = m.chunks[0].text.split(' ').collect();
    let first = (0..words.len() - 6)
        .map(|i| words[i..i + 6].join(" "))
        .find(|w| m.chunks.iter().filter(|c| c.text.contains(w.as_str())).count() == 1)
        .unwrap();
    mock.add_fault(
        FaultRule::always(BackendFailure::Http {
            status: 400,
            message: "rejected".into(),
        })
        .for_stage(stage::CODE)
        .when_prompt_contains(&first),
    );
    let out = coding::code_corpus(&m, &KindSpec::defaults(), &gw, &CodingOptions::default()).unwrap();
    assert_eq!(out.report.failures.len(), 4);

    let (mock, gw) = setup();
    mock.add_fault(FaultRule::always(BackendFailure::Transport("reset".into())));
    let err = coding::code_corpus(&m, &KindSpec::defaults(), &gw, &CodingOptions::default()).unwrap_err();
    assert!(matches!(err, CodingError::TooManyFailures { failed, total, .. } if failed == total));
}
