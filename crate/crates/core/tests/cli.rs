//! End-to-end tests of the `ual` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use ual_core::engine::experiment::parse_reports_jsonl;
use ual_core::export::{self, Format};

const SMALL: &str = r#"
schema_version = 1
seeds = [1, 2]
cycles = 2
per_cycle_pool = 40
budget = 4
acquisition = "margin"
m_predict = 8

[dataset]
kind = "toy2"
n_per_class = 50
seed = 3

[train]
epochs = 15
batch_size = 32
"#;

fn ual(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ual"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_reports_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "small.cfg", SMALL);
    let o = ual(
        &["run", "--config", "small.cfg", "--seed", "7", "--out", "a"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "resolved.cfg",
        "reports.jsonl",
        "summary.csv",
        "aggregate.json",
        "timings.csv",
        "checkpoints/seed-7.ualc",
    ] {
        assert!(dir.path().join("a").join(f).exists(), "missing {f}");
    }
    let reports =
        parse_reports_jsonl(&fs::read_to_string(dir.path().join("a/reports.jsonl")).unwrap())
            .unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.seed == 7));
    // The resolved config records the seed override.
    let resolved = fs::read_to_string(dir.path().join("a/resolved.cfg")).unwrap();
    assert!(resolved.contains("seeds = [7]"), "{resolved}");

    let o = ual(
        &["run", "--config", "a/resolved.cfg", "--out", "b"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(dir.path().join("a/reports.jsonl")).unwrap(),
        fs::read(dir.path().join("b/reports.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(dir.path().join("a/summary.csv")).unwrap(),
        fs::read(dir.path().join("b/summary.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "bad.cfg",
        &SMALL.replace("budget = 4", "budget = 4\nbudjet = 5"),
    );
    let o = ual(&["run", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("budjet"), "{}", stderr(&o));

    let o = ual(&["run", "--config", "missing.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    write_config(dir.path(), "small.cfg", SMALL);
    let o = ual(
        &["run", "--config", "small.cfg", "--budget", "500"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("budget"));
    let o = ual(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn export_tabulates_a_lambda_sweep() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "small.cfg", SMALL);
    for lambda in ["0.3", "1"] {
        let out = format!("sweep/l{lambda}");
        let o = ual(
            &[
                "run",
                "--config",
                "small.cfg",
                "--lambda",
                lambda,
                "--out",
                &out,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = ual(
        &[
            "export",
            "--reports",
            "sweep",
            "--format",
            "csv",
            "--out",
            "csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ual(
        &[
            "export",
            "--reports",
            "sweep",
            "--format",
            "json",
            "--out",
            "json",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let from_csv = export::read(&dir.path().join("csv"), Format::Csv).unwrap();
    let from_json = export::read(&dir.path().join("json"), Format::Json).unwrap();
    assert_eq!(from_csv, from_json);
    // One row per (lambda, cycle).
    assert_eq!(from_csv.not_confident.len(), 4);
    assert!(from_csv.not_confident.iter().all(|r| r.runs == 2));
    assert_eq!(from_csv.learning_curve.len(), 8);
    for r in &from_csv.learning_curve {
        assert!((r.labeled_fraction - r.labeled_count as f64 / r.pool_size as f64).abs() < 1e-12);
    }
    // json -> csv -> json keeps every value.
    let again = dir.path().join("again");
    export::write(&from_json, &again, Format::Csv).unwrap();
    export::write(
        &export::read(&again, Format::Csv).unwrap(),
        &again,
        Format::Json,
    )
    .unwrap();
    assert_eq!(export::read(&again, Format::Json).unwrap(), from_json);

    fs::create_dir(dir.path().join("empty")).unwrap();
    let o = ual(&["export", "--reports", "empty"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = ual(
        &["export", "--reports", "sweep", "--format", "xml"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let o = ual(
        &[
            "gen-data",
            "--kind",
            "toy1",
            "--n-per-class",
            "30",
            "--seed",
            "2",
            "--out",
            "d/toy1.uald",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ual(
        &[
            "gen-data",
            "--kind",
            "two-moons",
            "--n",
            "60",
            "--out",
            "d/moons.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("d/moons.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
    assert_eq!(csv.lines().next().unwrap(), "x0,x1,label");
    let o = ual(
        &[
            "gen-data",
            "--kind",
            "toy2",
            "--n-per-class",
            "0",
            "--out",
            "x.uald",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));

    let cfg = SMALL
        .replace(
            "kind = \"toy2\"\nn_per_class = 50\nseed = 3",
            "kind = \"file\"\npath = \"d/toy1.uald\"",
        )
        .replace("seeds = [1, 2]", "seeds = [4]");
    write_config(dir.path(), "file.cfg", &cfg);
    let o = ual(&["run", "--config", "file.cfg", "--out", "r"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ual(
        &[
            "eval",
            "--config",
            "file.cfg",
            "--checkpoint",
            "r/checkpoints/seed-4.ualc",
            "--scores",
            "scores.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let reports =
        parse_reports_jsonl(&fs::read_to_string(dir.path().join("r/reports.jsonl")).unwrap())
            .unwrap();
    assert!((0.0..=1.0).contains(&metrics["accuracy"].as_f64().unwrap()));
    let scores = fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    // 48-sample pool minus the 4 seed labels and 2 cycles of 4 queries.
    assert_eq!(
        scores.lines().count() - 1,
        48 - reports.last().unwrap().labeled_count
    );
}

#[test]
fn vit_config_runs_end_to_end() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let cfg = root.join("vit_bars.cfg");
    let o = ual(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--cycles",
            "1",
            "--out",
            "vit",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let reports =
        parse_reports_jsonl(&fs::read_to_string(dir.path().join("vit/reports.jsonl")).unwrap())
            .unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].queried_ids.len(), 10);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        ual_core::engine::ExperimentConfig::load(&p)
            .unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

#[test]
fn serve_answers_and_checkpoints_on_interrupt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy1_session.cfg");
    let port = free_port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_ual"))
        .args([
            "serve",
            "--config",
            cfg.to_str().unwrap(),
            "--port",
            &port.to_string(),
        ])
        .args(["--checkpoint-dir", "ck"])
        .current_dir(dir.path())
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let url = format!("http://127.0.0.1:{port}");
    let client = reqwest::blocking::Client::new();
    let start = Instant::now();
    let status = loop {
        if let Ok(r) = client.get(format!("{url}/sessions/s1/status")).send() {
            let v: serde_json::Value = r.json().unwrap();
            if v["phase"] == "awaiting_labels" {
                break v;
            }
        }
        assert!(
            start.elapsed() < Duration::from_secs(60),
            "server never became ready"
        );
        std::thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(
        client
            .get(format!("{url}/sessions"))
            .send()
            .unwrap()
            .status(),
        200
    );
    assert_eq!(status["open_count"], 5);

    // A second server on the same port fails at bind time.
    let busy = ual(
        &[
            "serve",
            "--port",
            &port.to_string(),
            "--checkpoint-dir",
            "ck2",
        ],
        dir.path(),
    );
    assert_eq!(busy.status.code(), Some(1));

    Command::new("kill")
        .args(["-INT", &child.id().to_string()])
        .status()
        .unwrap();
    let code = child.wait().unwrap();
    assert!(code.success(), "{code:?}");
    assert!(dir.path().join("ck/s1.ualc").exists());
    assert!(dir.path().join("ck/s1.toml").exists());
}
