//! Annotation service over real HTTP with a blocking client.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};
use ual_core::acquisition::{
    read_scores_csv, select_queries, write_scores_csv, Method, UncertaintyScore,
};
use ual_core::engine::{run_experiment, ExperimentConfig, NoObserver, Run, SimulatedOracle};
use ual_core::service::{AppState, ServerHandle};

fn config(seed: u64, cycles: usize) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
schema_version = 1
seeds = [{seed}]
cycles = {cycles}
per_cycle_pool = 30
budget = 3
acquisition = "entropy"
m_predict = 8

[dataset]
kind = "toy1"
n_per_class = 40
seed = 5

[train]
epochs = 20
batch_size = 16
"#
    ))
    .unwrap()
}

fn spawn(checkpoints: Option<std::path::PathBuf>) -> ServerHandle {
    let state = Arc::new(AppState::new(".".into(), checkpoints));
    ServerHandle::spawn(SocketAddr::from(([127, 0, 0, 1], 0)), state).unwrap()
}

fn create(client: &Client, url: &str, cfg: &ExperimentConfig) -> String {
    let resp = client
        .post(format!("{url}/sessions"))
        .body(serde_json::to_string(cfg).unwrap())
        .send()
        .unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    resp.json::<Value>().unwrap()["session_id"]
        .as_str()
        .unwrap()
        .to_string()
}

fn status(client: &Client, url: &str, id: &str) -> Value {
    client
        .get(format!("{url}/sessions/{id}/status"))
        .send()
        .unwrap()
        .json()
        .unwrap()
}

/// Polls until the phase is one of `phases`.
fn wait_for(client: &Client, url: &str, id: &str, phases: &[&str]) -> Value {
    let start = Instant::now();
    loop {
        let st = status(client, url, id);
        let phase = st["phase"].as_str().unwrap();
        if phases.contains(&phase) {
            return st;
        }
        assert_ne!(phase, "failed", "session failed: {st}");
        assert!(
            start.elapsed() < Duration::from_secs(120),
            "timed out in phase {phase}"
        );
        std::thread::sleep(Duration::from_millis(10));
    }
}

fn tasks(client: &Client, url: &str, id: &str, limit: Option<usize>) -> Vec<Value> {
    let q = limit.map(|l| format!("?limit={l}")).unwrap_or_default();
    client
        .get(format!("{url}/sessions/{id}/tasks{q}"))
        .send()
        .unwrap()
        .json()
        .unwrap()
}

fn label(
    client: &Client,
    url: &str,
    id: &str,
    tid: &str,
    class: Value,
) -> reqwest::blocking::Response {
    client
        .post(format!("{url}/sessions/{id}/tasks/{tid}/label"))
        .json(&json!({ "class": class }))
        .send()
        .unwrap()
}

fn truth(cfg: &ExperimentConfig) -> HashMap<u64, usize> {
    let ds = cfg.dataset.load(std::path::Path::new(".")).unwrap().dataset;
    ds.sample_ids
        .iter()
        .copied()
        .zip(ds.labels.iter().copied())
        .collect()
}

/// Labels every open task with ground truth until the session is done.
fn drive_to_done(client: &Client, url: &str, id: &str, truth: &HashMap<u64, usize>) -> Value {
    loop {
        let st = wait_for(client, url, id, &["awaiting_labels", "done"]);
        if st["phase"] == "done" {
            return st;
        }
        for t in tasks(client, url, id, None) {
            let class = truth[&t["sample_id"].as_u64().unwrap()];
            let resp = label(
                client,
                url,
                id,
                t["task_id"].as_str().unwrap(),
                json!(class),
            );
            assert_eq!(resp.status(), StatusCode::OK);
        }
    }
}

#[test]
fn human_oracle_reports_match_simulated_run() {
    let cfg = config(11, 3);
    let server = spawn(None);
    let client = Client::new();
    let url = server.url();
    let id = create(&client, &url, &cfg);
    let done = drive_to_done(&client, &url, &id, &truth(&cfg));

    let loaded = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let (expected, _) =
        run_experiment(&cfg, &loaded.dataset, &loaded.input_hash, &NoObserver).unwrap();
    let expected = serde_json::to_value(&expected.runs[0].reports).unwrap();
    assert_eq!(done["reports"], expected);
    assert_eq!(done["latest_report"], expected[2]);
    assert!(tasks(&client, &url, &id, None).is_empty());
    server.stop().unwrap();
}

#[test]
fn task_listing_and_label_errors() {
    let cfg = config(3, 1);
    let server = spawn(None);
    let client = Client::new();
    let url = server.url();
    let id = create(&client, &url, &cfg);
    let st = wait_for(&client, &url, &id, &["awaiting_labels"]);
    assert_eq!(
        st["open_count"].as_u64().unwrap() + st["labeled_count"].as_u64().unwrap(),
        3
    );
    assert_eq!(st["cycle_index"], 0);

    assert!(tasks(&client, &url, &id, Some(0)).is_empty());
    let open = tasks(&client, &url, &id, None);
    assert_eq!(open.len(), 3);
    let u: Vec<f64> = open
        .iter()
        .map(|t| t["uncertainty"].as_f64().unwrap())
        .collect();
    assert!(
        u.windows(2).all(|w| w[0] >= w[1]),
        "not sorted by uncertainty: {u:?}"
    );
    assert_eq!(tasks(&client, &url, &id, Some(2)).len(), 2);
    // Listing is idempotent.
    assert_eq!(tasks(&client, &url, &id, None), open);

    // Ranking the exported scores reproduces the task order, which is also
    // the simulated run's query order.
    let scores: Vec<UncertaintyScore> = open
        .iter()
        .map(|t| UncertaintyScore {
            sample_id: t["sample_id"].as_u64().unwrap(),
            method: Method::Entropy,
            value: t["uncertainty"].as_f64().unwrap(),
        })
        .collect();
    let mut csv = Vec::new();
    write_scores_csv(&scores, &mut csv).unwrap();
    let exported = read_scores_csv(std::str::from_utf8(&csv).unwrap()).unwrap();
    let ranked = select_queries(&exported, exported.len(), 0).sample_ids;
    let listed: Vec<u64> = scores.iter().map(|s| s.sample_id).collect();
    assert_eq!(ranked, listed);
    let loaded = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let mut run = Run::start(&cfg, &loaded.dataset, 3, &loaded.input_hash).unwrap();
    let mut oracle = SimulatedOracle::new(&run.ctx.pool);
    assert_eq!(
        run.step(&mut oracle, &NoObserver).unwrap().queried_ids,
        listed
    );

    let tid = open[0]["task_id"].as_str().unwrap();
    let img = client
        .get(format!("{url}{}", open[0]["image_url"].as_str().unwrap()))
        .send()
        .unwrap();
    assert_eq!(img.status(), StatusCode::OK);
    assert_eq!(img.headers()["content-type"], "image/png");
    assert_eq!(&img.bytes().unwrap()[..4], b"\x89PNG");

    let resp = label(&client, &url, &id, tid, json!(2));
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(resp.json::<Value>().unwrap()["error"], "invalid_class");
    assert_eq!(
        label(&client, &url, &id, tid, json!(-1)).status(),
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        label(&client, &url, &id, "c9-s9", json!(0)).status(),
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        label(&client, &url, "s99", tid, json!(0)).status(),
        StatusCode::NOT_FOUND
    );

    let ok = label(&client, &url, &id, tid, json!(1));
    assert_eq!(ok.status(), StatusCode::OK);
    assert_eq!(ok.json::<Value>().unwrap()["status"], "labeled");
    let dup = label(&client, &url, &id, tid, json!(0));
    assert_eq!(dup.status(), StatusCode::CONFLICT);
    let body: Value = dup.json().unwrap();
    assert_eq!(body["error"], "already_labeled");
    assert!(body["message"].is_string());
    assert_eq!(tasks(&client, &url, &id, None).len(), 2);
    let st = status(&client, &url, &id);
    assert_eq!(
        (st["open_count"].as_u64(), st["labeled_count"].as_u64()),
        (Some(2), Some(1))
    );

    for t in tasks(&client, &url, &id, None) {
        assert_eq!(
            label(&client, &url, &id, t["task_id"].as_str().unwrap(), json!(0)).status(),
            StatusCode::OK
        );
    }
    let st = status(&client, &url, &id);
    assert!(
        ["retraining", "done"].contains(&st["phase"].as_str().unwrap()),
        "{st}"
    );
    let st = wait_for(&client, &url, &id, &["done"]);
    assert_eq!(st["reports"].as_array().unwrap().len(), 1);
    assert!(tasks(&client, &url, &id, None).is_empty());
    server.stop().unwrap();
}

#[test]
fn session_creation_and_listing() {
    let server = spawn(None);
    let client = Client::new();
    let url = server.url();
    let resp = client.get(format!("{url}/sessions")).send().unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.json::<Value>().unwrap(), json!([]));

    let bad = client
        .post(format!("{url}/sessions"))
        .body("{not json")
        .send()
        .unwrap();
    assert_eq!(bad.status(), StatusCode::BAD_REQUEST);
    assert_eq!(bad.json::<Value>().unwrap()["error"], "invalid_config");
    let mut v = serde_json::to_value(config(1, 1)).unwrap();
    v["budget"] = json!(1000);
    let bad = client
        .post(format!("{url}/sessions"))
        .body(v.to_string())
        .send()
        .unwrap();
    assert_eq!(bad.status(), StatusCode::BAD_REQUEST);
    assert!(bad.json::<Value>().unwrap()["message"]
        .as_str()
        .unwrap()
        .contains("budget"));
    let mut two = config(1, 1);
    two.seeds = vec![1, 2];
    let bad = client
        .post(format!("{url}/sessions"))
        .json(&two)
        .send()
        .unwrap();
    assert_eq!(bad.status(), StatusCode::BAD_REQUEST);

    let a = create(&client, &url, &config(1, 1));
    let b = create(&client, &url, &config(2, 1));
    assert_ne!(a, b);
    let sa = wait_for(&client, &url, &a, &["awaiting_labels"]);
    let sb = wait_for(&client, &url, &b, &["awaiting_labels"]);
    assert_eq!(
        (sa["seed"].as_u64(), sb["seed"].as_u64()),
        (Some(1), Some(2))
    );
    let list: Vec<Value> = client
        .get(format!("{url}/sessions"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!(
        status(&client, &url, "nope").get("error").unwrap(),
        "session_not_found"
    );
    server.stop().unwrap();
}

#[test]
fn restore_resumes_with_identical_open_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(21, 3);
    let truth = truth(&cfg);
    let client = Client::new();

    let server = spawn(Some(dir.path().to_path_buf()));
    let url = server.url();
    let id = create(&client, &url, &cfg);
    // Finish cycle 0, then stop while cycle 1 awaits labels.
    wait_for(&client, &url, &id, &["awaiting_labels"]);
    for t in tasks(&client, &url, &id, None) {
        label(
            &client,
            &url,
            &id,
            t["task_id"].as_str().unwrap(),
            json!(truth[&t["sample_id"].as_u64().unwrap()]),
        );
    }
    let st = loop {
        let st = wait_for(&client, &url, &id, &["awaiting_labels"]);
        if st["cycle_index"] == 1 {
            break st;
        }
        std::thread::sleep(Duration::from_millis(10));
    };
    assert_eq!(st["reports"].as_array().unwrap().len(), 1);
    let before = tasks(&client, &url, &id, None);
    server.stop().unwrap();
    assert!(dir.path().join(format!("{id}.ualc")).exists());

    let state = Arc::new(AppState::new(".".into(), Some(dir.path().to_path_buf())));
    assert_eq!(state.restore_sessions().unwrap(), vec![id.clone()]);
    let server = ServerHandle::spawn(SocketAddr::from(([127, 0, 0, 1], 0)), state).unwrap();
    let url = server.url();
    let st = wait_for(&client, &url, &id, &["awaiting_labels"]);
    assert_eq!(st["cycle_index"], 1);
    assert_eq!(tasks(&client, &url, &id, None), before);
    let done = drive_to_done(&client, &url, &id, &truth);

    let loaded = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let (expected, _) =
        run_experiment(&cfg, &loaded.dataset, &loaded.input_hash, &NoObserver).unwrap();
    assert_eq!(
        done["reports"],
        serde_json::to_value(&expected.runs[0].reports).unwrap()
    );
    // New sessions do not reuse restored ids.
    assert_ne!(create(&client, &url, &config(4, 1)), id);
    server.stop().unwrap();
}
