use std::path::Path;

use curate_core::jsonl;
use curate_core::pipeline::{Pipeline, PipelineError, PipelineStage, RunConfig, StageStatus};
use serde_json::json;

const KINDS: [(&str, &str); 3] = [
    ("A red poster on a wall.", "SUMMER SALE"),
    ("A book cover.", "THE QUIET RIVER"),
    ("A shop sign.", "OPEN DAILY"),
];

fn write_corpus(path: &Path, n: usize) {
    let mut out = String::new();
    for i in 0..n {
        let (caption, text) = KINDS[i % 3];
        let line = json!({
            "image_id": format!("img_{i:03}"),
            "image": format!("images/img_{i:03}.jpg"),
            "caption": caption,
            "ocr": [[[[10, 10], [90, 10], [90, 30], [10, 30]], [text, 0.95]],
                    [[[10, 40], [90, 40], [90, 60], [10, 60]], [format!("NO {i}"), 0.9]]],
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}

fn config(dir: &Path, extra: &str) -> RunConfig {
    write_corpus(&dir.join("raw.jsonl"), 12);
    let text = format!(
        r#"seed = 3
timestamp = "2026-01-01T00:00:00Z"
{extra}

[paths]
input = "raw.jsonl"
workdir = "work"

[providers.chat]
kind = "scripted"

[providers.loss]
kind = "mock"
mode = {{ kind = "copycat", p_repeat = 0.7 }}

[providers.embed]
kind = "hash"
dim = 16

[diversity]
backend = "embedding"
batch_size = 4
num_batches = 5
"#
    );
    let path = dir.join("curate.toml");
    std::fs::write(&path, text).unwrap();
    RunConfig::load(&path).unwrap()
}

#[test]
fn stages_refuse_to_run_before_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(config(dir.path(), ""), false).unwrap();
    let err = p.run(PipelineStage::GenSelfexplain).unwrap_err();
    assert!(matches!(err, PipelineError::Dependency { stage: PipelineStage::GenSelfexplain, .. }));
    assert_eq!(err.exit_code(), 1);
    assert!(!p.workdir().join("selfexplain.jsonl").exists());
}

#[test]
fn done_stages_are_skipped_and_tampering_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(config(dir.path(), ""), false).unwrap();
    let first = p.run_all(Some(PipelineStage::Score)).unwrap();
    assert!(first.iter().all(|o| !o.skipped));
    assert_eq!(p.manifest().status("score"), StageStatus::Done);

    let scored = p.workdir().join("scored.jsonl");
    let before = std::fs::read(&scored).unwrap();
    let again = p.run(PipelineStage::Score).unwrap();
    assert!(again.skipped);
    assert_eq!(std::fs::read(&scored).unwrap(), before);

    // Reopening from disk sees the same state.
    let mut reopened = Pipeline::open(config(dir.path(), ""), false).unwrap();
    assert!(reopened.run(PipelineStage::Ingest).unwrap().skipped);

    // Hand-edited output.
    let mut records = jsonl::read_records(&scored).unwrap();
    records.pop();
    jsonl::write_jsonl(&records, &scored).unwrap();
    let err = reopened.run(PipelineStage::Score).unwrap_err();
    assert!(matches!(err, PipelineError::Stage { stage: PipelineStage::Score, .. }), "{err}");

    let mut forced = Pipeline::open(config(dir.path(), ""), true).unwrap();
    let o = forced.run(PipelineStage::Score).unwrap();
    assert!(!o.skipped);
    assert_eq!(std::fs::read(&scored).unwrap(), before);
}

#[test]
fn changed_inputs_rerun_downstream_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(config(dir.path(), ""), false).unwrap();
    p.run_all(Some(PipelineStage::Enrich)).unwrap();
    write_corpus(&dir.path().join("raw.jsonl"), 9);
    let o = p.run(PipelineStage::Ingest).unwrap();
    assert!(!o.skipped);
    assert_eq!(o.count_out, 9);
    let o = p.run(PipelineStage::Enrich).unwrap();
    assert!(!o.skipped);
    assert_eq!(o.count_in, 9);
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(config(dir.path(), ""), false).unwrap();
    let outcomes = p.run_all(None).unwrap();
    let ran: Vec<PipelineStage> = outcomes.iter().map(|o| o.stage).collect();
    assert!(!ran.contains(&PipelineStage::Sweep));
    let work = p.workdir().to_path_buf();
    for f in [
        "ingest.jsonl",
        "filtered.jsonl",
        "audit.csv",
        "filter_summary.json",
        "diversity/report.json",
        "stats/taxonomy.csv",
        "output/dataset.jsonl",
        "output/report.md",
        "quarantine/ingest.jsonl",
    ] {
        assert!(work.join(f).exists(), "missing {f}");
    }
    let out = jsonl::read_records(&work.join("output/dataset.jsonl")).unwrap();
    assert!(curate_core::record::validate_dataset(&out).is_empty());
    assert!(out
        .iter()
        .flat_map(|r| r.provenance.values())
        .all(|s| s.timestamp == "2026-01-01T00:00:00Z"));
    assert!(out.iter().all(|r| !r.provenance.is_empty()));
}

#[test]
fn malformed_input_lines_are_quarantined() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let raw = dir.path().join("raw.jsonl");
    let mut text = std::fs::read_to_string(&raw).unwrap();
    text.push_str("{\"image_id\": \"broken\"\n");
    std::fs::write(&raw, text).unwrap();
    let mut p = Pipeline::open(cfg, false).unwrap();
    let o = p.run(PipelineStage::Ingest).unwrap();
    assert_eq!(o.count_out, 12);
    let q = std::fs::read_to_string(p.workdir().join("quarantine/ingest.jsonl")).unwrap();
    assert_eq!(q.lines().count(), 1);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "nonsense = 1\n").unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    assert_eq!(PipelineError::Config(err).exit_code(), 2);

    let mut cfg = config(dir.path(), "");
    cfg.filter.mifd_keep_fraction = 0.0;
    let err = Pipeline::open(cfg, false).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    std::fs::write(&path, "[paths]\ninput = \"${CURATE_SURELY_UNSET}\"\nworkdir = \"w\"\n").unwrap();
    assert!(RunConfig::load(&path).unwrap_err().contains("CURATE_SURELY_UNSET"));
}
