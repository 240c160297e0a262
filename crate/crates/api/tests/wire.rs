use coopadapt_api::{AdaptKind, EvalRequest, JobState, ProfileSpec, RunLocation};
use serde_json::json;

#[test]
fn adapt_methods_use_cli_spellings() {
    for (kind, text) in [
        (AdaptKind::Dusa, "dusa"),
        (AdaptKind::Discriminator, "discriminator"),
        (AdaptKind::SelfTrain, "self-train"),
    ] {
        assert_eq!(serde_json::to_value(kind).unwrap(), json!(text));
        assert_eq!(serde_json::from_value::<AdaptKind>(json!(text)).unwrap(), kind);
    }
}

#[test]
fn optional_fields_may_be_omitted() {
    let req: EvalRequest = serde_json::from_value(json!({
        "checkpoint": "ck",
        "dataset": "data",
        "thresholds": [0.5],
    }))
    .unwrap();
    assert_eq!((req.report, req.csv), (None, None));
    let loc: RunLocation = serde_json::from_value(json!({ "runs_root": "runs" })).unwrap();
    assert!(loc.resume.is_none());
}

#[test]
fn named_profiles_are_tagged() {
    let spec = ProfileSpec::Named("synthetic_real".into());
    let v = serde_json::to_value(&spec).unwrap();
    assert_eq!(v, json!({ "named": "synthetic_real" }));
}

#[test]
fn only_finished_states_are_terminal() {
    let terminal: Vec<_> = [
        JobState::Queued,
        JobState::Running,
        JobState::Succeeded,
        JobState::Failed,
        JobState::Cancelled,
    ]
    .into_iter()
    .filter(|s| s.is_terminal())
    .collect();
    assert_eq!(terminal, [JobState::Succeeded, JobState::Failed, JobState::Cancelled]);
}
