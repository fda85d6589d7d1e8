use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_detvlm");

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn index_sample(out: &Path) -> Output {
    run(&[
        "index",
        "--manifest",
        data("manifest.jsonl").to_str().unwrap(),
        "--ontology",
        data("vehicle_ontology.json").to_str().unwrap(),
        "--config",
        data("index.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--detector-mock",
        data("detector_mock.jsonl").to_str().unwrap(),
        "--vlm-mock",
        data("vlm_mock.jsonl").to_str().unwrap(),
    ])
}

fn query(records: &Path, q: &str) -> Output {
    run(&[
        "query",
        "--records",
        records.to_str().unwrap(),
        "--ontology",
        data("vehicle_ontology.json").to_str().unwrap(),
        "--where",
        q,
    ])
}

#[test]
fn index_query_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.jsonl");
    let o = index_sample(&records);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&records).unwrap().lines().count(), 4);

    assert_eq!(stdout(&query(&records, "exists(mask)")), "img_001\nimg_003\n");
    assert_eq!(
        stdout(&query(&records, "state(sun_visor)=lowered && !exists(cheqianzawu)")),
        "img_001\n"
    );
    assert_eq!(stdout(&query(&records, "!exists(car)")), "img_004\n");
    assert_eq!(stdout(&query(&records, "conf(chepai)>=0.95")), "img_003\n");

    let o = run(&[
        "eval",
        "--records",
        records.to_str().unwrap(),
        "--truth",
        data("truth.jsonl").to_str().unwrap(),
        "--report",
        "csv",
        "--positive",
        "sun_visor=lowered",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = stdout(&o);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("target,accuracy,precision,recall,f1"));
    assert!(csv.contains("\nmask,1.0000,1.0000,1.0000,1.0000\n"));
    assert!(csv.contains("\nsun_visor=lowered,1.0000,1.0000,1.0000,1.0000\n"));
    assert!(csv.lines().last().unwrap().starts_with("Overall,"));
}

#[test]
fn reindexing_appends_and_supersedes() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.jsonl");
    assert!(index_sample(&records).status.success());
    assert!(index_sample(&records).status.success());
    assert_eq!(std::fs::read_to_string(&records).unwrap().lines().count(), 8);
    assert_eq!(stdout(&query(&records, "exists(mask)")), "img_001\nimg_003\n");
}

#[test]
fn query_errors_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.jsonl");
    assert!(index_sample(&records).status.success());
    let o = query(&records, "state(sun_visor)=");
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte 17"));
    assert_eq!(query(&records, "exists(wheel)").status.code(), Some(1));
}

#[test]
fn missing_input_is_io_error() {
    let o = query(Path::new("/nonexistent/records.jsonl"), "exists(mask)");
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn invalid_ontology_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("o.json");
    std::fs::write(&bad, r#"{"version":"x","components":[]}"#).unwrap();
    let o = run(&[
        "query",
        "--records",
        "unused",
        "--ontology",
        bad.to_str().unwrap(),
        "--where",
        "exists(a)",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unreachable_detector_fails_every_image() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.jsonl");
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "[detector]\nretry_attempts = 1\ntimeout_secs = 2\n").unwrap();
    // Port 9 on loopback refuses connections.
    let o = run(&[
        "index",
        "--manifest",
        data("manifest.jsonl").to_str().unwrap(),
        "--ontology",
        data("vehicle_ontology.json").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        records.to_str().unwrap(),
        "--detector-url",
        "http://127.0.0.1:9",
        "--vlm-mock",
        data("vlm_mock.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&records).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().all(|l| l.contains("\"error\"")));
    // Failed images never satisfy a query, even a negated one.
    assert_eq!(stdout(&query(&records, "!exists(car)")), "");
}

#[test]
fn simulate_prints_report_and_closed_form() {
    let o = run(&[
        "simulate",
        "--det-recall",
        "0.5",
        "--vlm-sens",
        "0.5",
        "--images",
        "400",
        "--components",
        "2",
        "--seed",
        "4",
        "--report",
        "csv",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("target,accuracy,precision,recall,f1\npart_00,"));
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("closed form: fused_recall="));
    assert!(last.contains("expected=0.7500"));
    assert_eq!(run(&["simulate", "--det-recall", "1.5"]).status.code(), Some(1));
}
