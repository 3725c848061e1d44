use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn fixture() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        datapeck_fixtures::t2d::write_to(dir.path()).unwrap();
        dir
    })
    .path()
}

fn datapeck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_datapeck"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate_into(out: &Path, provider: &str) -> Output {
    let dir = fixture();
    datapeck(&[
        "generate",
        "--spec",
        p(&dir.join("study.json")),
        "--provider",
        provider,
        "--vocabulary",
        p(&dir.join("vocabulary.tsv")),
        "--out",
        p(out),
    ])
}

fn run_into(out: &Path, matrix: &Path, extra: &[&str]) -> Output {
    let (spec, codes) = (fixture().join("study.json"), fixture().join("codes.json"));
    let mut args = vec![
        "run",
        "--spec",
        p(&spec),
        "--matrix",
        p(matrix),
        "--codes",
        p(&codes),
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    datapeck(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_reproduces_bundled_matrix() {
    let out = TempDir::new().unwrap();
    let provider = format!("mock:{}", p(&fixture().join("provider.json")));
    let o = generate_into(out.path(), &provider);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let matrix = fs::read_to_string(out.path().join("suite.psv")).unwrap();
    assert_eq!(matrix, datapeck_fixtures::t2d::SUITE_PSV);
    assert_eq!(matrix.lines().count(), 61);
    let suite: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("suite.json")).unwrap()).unwrap();
    assert_eq!(suite["cases"].as_array().unwrap().len(), 60);
    let checksum = suite["generation_metadata"]["vocabulary_checksum"].as_str().unwrap();
    assert!(checksum.strip_prefix("sha256:").is_some_and(|h| h.len() == 64), "{checksum}");
}

#[test]
fn missing_spec_is_a_configuration_error() {
    let out = TempDir::new().unwrap();
    let o = datapeck(&[
        "generate",
        "--spec",
        p(&out.path().join("absent.json")),
        "--provider",
        "mock:absent.json",
        "--vocabulary",
        "absent.tsv",
        "--out",
        p(out.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("study spec"));
}

#[test]
fn empty_provider_yields_dtype_only_suite() {
    let out = TempDir::new().unwrap();
    let empty = out.path().join("empty.json");
    fs::write(
        &empty,
        r#"{"version": 1, "entries": [{"condition": "Type 2 diabetes", "region": "US", "statistics": []}]}"#,
    )
    .unwrap();
    let o = generate_into(out.path(), &format!("mock:{}", p(&empty)));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("no statistics"));
    let matrix = fs::read_to_string(out.path().join("suite.psv")).unwrap();
    let rows: Vec<&str> = matrix.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].contains("dtype_check"));
}

#[test]
fn unreachable_provider_exits_with_provider_code() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out = TempDir::new().unwrap();
    let o = generate_into(out.path(), &format!("http://127.0.0.1:{port}/"));
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(!out.path().join("suite.psv").exists());
}

#[test]
fn run_is_deterministic_and_reproduces_outcomes() {
    let matrix = fixture().join("suite.psv");
    let first = TempDir::new().unwrap();
    let second = TempDir::new().unwrap();
    for out in [&first, &second] {
        let o = run_into(out.path(), &matrix, &[]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for name in ["results.json", "coverage.json", "heatmap.csv", "heatmap_long.csv", "report.md"] {
        let a = fs::read(first.path().join(name)).unwrap();
        let b = fs::read(second.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }
    let results: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(first.path().join("results.json")).unwrap()).unwrap();
    let count = |s: &str| results.iter().filter(|r| r["status"] == s).count();
    assert_eq!(results.len(), 60);
    assert_eq!((count("Pass"), count("Fail"), count("NoReference")), (6, 49, 5));
}

#[test]
fn failing_tests_set_exit_status_on_request() {
    let out = TempDir::new().unwrap();
    let o = run_into(out.path(), &fixture().join("suite.psv"), &["--fail-on-test-failure", "--format", "html"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(out.path().join("report.html").exists());
}

#[test]
fn suite_bound_to_absent_column_is_a_mismatch() {
    let out = TempDir::new().unwrap();
    let suite = datapeck_fixtures::t2d::suite().to_json().unwrap();
    let broken = out.path().join("suite.json");
    fs::write(&broken, suite.replace("\"gender\"", "\"sex_at_birth\"")).unwrap();
    let o = datapeck(&[
        "run",
        "--spec",
        p(&fixture().join("study.json")),
        "--suite",
        p(&broken),
        "--out",
        p(out.path()),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("sex_at_birth"));
}

#[test]
fn unknown_matrix_target_has_no_reference() {
    let out = TempDir::new().unwrap();
    let bundled = fs::read_to_string(fixture().join("suite.psv")).unwrap();
    let broken: PathBuf = out.path().join("suite.psv");
    fs::write(&broken, bundled.replace("|gender|", "|sex_at_birth|")).unwrap();
    let o = run_into(out.path(), &broken, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let results = fs::read_to_string(out.path().join("results.json")).unwrap();
    let results: Vec<serde_json::Value> = serde_json::from_str(&results).unwrap();
    let female = results.iter().find(|r| r["name"] == "Female").unwrap();
    assert_eq!(female["status"], "NoReference");
}

#[test]
fn report_writes_quality_summary() {
    let dir = fixture();
    let out = TempDir::new().unwrap();
    let o = run_into(out.path(), &dir.join("suite.psv"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = datapeck(&[
        "report",
        "--spec",
        p(&dir.join("study.json")),
        "--matrix",
        p(&dir.join("suite.psv")),
        "--codes",
        p(&dir.join("codes.json")),
        "--results",
        p(&out.path().join("results.json")),
        "--annotations",
        p(&dir.join("annotations.csv")),
        "--out",
        p(out.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let quality = fs::read_to_string(out.path().join("quality.md")).unwrap();
    assert!(quality.contains("59"), "{quality}");
}
