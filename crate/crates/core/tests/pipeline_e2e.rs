mod common;

use checklist_forge::canonical::read_records;
use checklist_forge::model::{validate_checklist, Checklist, ScoreMatrix};
use checklist_forge::pairs::PreferenceRecord;
use checklist_forge::pipeline::{Manifest, Stage};
use checklist_forge::PipelineError;

use common::*;

#[test]
fn record_then_replay_is_byte_identical() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let store = dir.path().join("store.jsonl");

    let recorded = dir.path().join("recorded");
    let p = pipeline(config(&corpus, &recorded), &record_options(&store));
    let reports = rt.block_on(p.run_all()).unwrap();
    assert!(reports.iter().all(|r| !r.skipped));

    let replayed = dir.path().join("replayed");
    let p = pipeline(config(&corpus, &replayed), &replay_options(&store));
    rt.block_on(p.run_all()).unwrap();
    assert_eq!(p.gateway().metrics().endpoint_calls, 0);
    assert_eq!(outputs(&recorded), outputs(&replayed));

    let checklists: Vec<Checklist> =
        read_records(&replayed.join("verified_checklists.jsonl")).unwrap();
    assert_eq!(checklists.len(), 10);
    assert!(checklists.iter().all(|c| validate_checklist(c).is_empty()));
    let scores: Vec<ScoreMatrix> = read_records(&replayed.join("scores.jsonl")).unwrap();
    assert_eq!(scores.len(), 10);
    let prefs: Vec<PreferenceRecord> = read_records(&replayed.join("preferences.jsonl")).unwrap();
    assert!(!prefs.is_empty() && prefs.len() <= 4);
}

#[test]
fn rerun_is_a_noop_and_config_change_reruns_only_downstream() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let store = dir.path().join("store.jsonl");
    let work = dir.path().join("work");

    let p = pipeline(config(&corpus, &work), &record_options(&store));
    rt.block_on(p.run_all()).unwrap();
    let first = outputs(&work);

    let p = pipeline(config(&corpus, &work), &replay_options(&store));
    let reports = rt.block_on(p.run_all()).unwrap();
    assert!(reports.iter().all(|r| r.skipped));
    assert_eq!(p.gateway().metrics().requests, 0);
    assert_eq!(outputs(&work), first);

    let mut changed = config(&corpus, &work);
    changed.retention_fraction = 1.0;
    let p = pipeline(changed, &replay_options(&store));
    let reports = rt.block_on(p.run_all()).unwrap();
    let ran: Vec<Stage> = reports
        .iter()
        .filter(|r| !r.skipped)
        .map(|r| r.stage)
        .collect();
    assert_eq!(ran, vec![Stage::Mine]);
    let prefs: Vec<PreferenceRecord> = read_records(&work.join("preferences.jsonl")).unwrap();
    let manifest = Manifest::load(&work.join("manifest.json")).unwrap();
    assert_eq!(
        manifest.stages["mine"].counts["retained"],
        prefs.len() as u64
    );
    assert_eq!(manifest.stages["mine"].counts["pairs"], prefs.len() as u64);
}

#[test]
fn missing_upstream_is_reported() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let p = pipeline(
        config(&corpus, &dir.path().join("w")),
        &record_options(&dir.path().join("s.jsonl")),
    );
    let err = rt.block_on(p.run_stage(Stage::Score)).unwrap_err();
    assert!(matches!(
        err,
        PipelineError::MissingUpstream {
            upstream: Stage::Verifiers,
            ..
        }
    ));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn replay_miss_fails_the_stage() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let store = dir.path().join("empty.jsonl");
    let p = pipeline(
        config(&corpus, &dir.path().join("w")),
        &replay_options(&store),
    );
    rt.block_on(p.run_stage(Stage::Ingest)).unwrap();
    let err = rt.block_on(p.run_stage(Stage::Checklists)).unwrap_err();
    assert!(matches!(err, PipelineError::ReplayIncomplete(_)), "{err}");
}

#[test]
fn checklist_evaluation_produces_a_report() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let work = dir.path().join("w");
    let mut cfg = config(&corpus, &work);
    cfg.judge_sample_count = 5;
    let p = pipeline(cfg, &record_options(&dir.path().join("s.jsonl")));
    rt.block_on(p.run_stage(Stage::Ingest)).unwrap();
    rt.block_on(p.run_stage(Stage::EvalChecklists)).unwrap();
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(work.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert_eq!(report["compared"], 10);
    let pct: f64 = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["preferred_pct"].as_f64().unwrap())
        .sum::<f64>()
        + report["tie_pct"].as_f64().unwrap();
    assert!((pct - 100.0).abs() < 1e-6);
}
