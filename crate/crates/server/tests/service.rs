use std::sync::Arc;

use marich_core::data::synth_blobs;
use marich_core::mathcore::argmax_label;
use marich_core::models::{init_model, save_model, Activation, Model, ModelSpec};
use marich_core::oracle::{DpConfig, LabelOracle, TargetHandle};
use marich_core::Error;
use marich_server::{spawn, AppState, RemoteTarget, RunningServer, ServerConfig, MAX_ATTEMPTS};
use reqwest::blocking::Client;
use serde_json::{json, Value};

fn fixture() -> Model {
    init_model(&ModelSpec::mlp(4, 3, vec![6], Activation::Relu), 42).unwrap()
}

fn start(cap: Option<u64>, expose_probs: bool, max_batch: usize) -> RunningServer {
    let state = AppState::new(fixture(), cap, None, expose_probs, max_batch).unwrap();
    spawn(state, "127.0.0.1:0").unwrap()
}

fn instances(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let ds = synth_blobs(3, 4, n.div_ceil(3), 2.0, 1.0, seed).unwrap();
    ds.features.row_iter().take(n).map(|r| r.to_vec()).collect()
}

fn post(server: &RunningServer, route: &str, body: String) -> (u16, Value) {
    let resp = Client::new()
        .post(format!("{}{route}", server.url()))
        .header("content-type", "application/json")
        .body(body)
        .send()
        .unwrap();
    let status = resp.status().as_u16();
    (status, serde_json::from_str(&resp.text().unwrap()).unwrap())
}

fn predict(server: &RunningServer, rows: &[Vec<f64>]) -> (u16, Value) {
    post(
        server,
        "/v1/predict",
        json!({ "instances": rows }).to_string(),
    )
}

fn stats(server: &RunningServer) -> Value {
    Client::new()
        .get(format!("{}/v1/stats", server.url()))
        .send()
        .unwrap()
        .text()
        .map(|t| serde_json::from_str(&t).unwrap())
        .unwrap()
}

#[test]
fn predict_matches_in_process_forward() {
    let server = start(None, false, 256);
    let rows = instances(30, 1);
    let (status, body) = predict(&server, &rows);
    assert_eq!(status, 200);
    assert_eq!(body["schema_version"], 1);
    assert!(body.get("probs").is_none());
    let model = fixture();
    let expect: Vec<usize> = rows
        .iter()
        .map(|r| argmax_label(&model.forward(r).unwrap()))
        .collect();
    let got: Vec<usize> = serde_json::from_value(body["labels"].clone()).unwrap();
    assert_eq!(got, expect);
    assert_eq!(body["queries_used"], 30);

    let (_, again) = predict(&server, &rows);
    assert_eq!(again["labels"], body["labels"]);
}

#[test]
fn stats_track_the_ledger() {
    let server = start(None, false, 256);
    let s = stats(&server);
    assert_eq!(s["queries_used"], 0);
    assert_eq!(s["cap"], Value::Null);
    assert_eq!(s["dp_mechanism"], "none");
    assert_eq!(s["schema_version"], 1);
    assert_eq!(s["model_spec"]["input_dim"], 4);
    predict(&server, &instances(7, 2));
    assert_eq!(stats(&server)["queries_used"], 7);
}

#[test]
fn concurrent_clients_are_counted_exactly() {
    let server = Arc::new(start(None, false, 256));
    let handles: Vec<_> = (0..20)
        .map(|i| {
            let server = server.clone();
            std::thread::spawn(move || {
                let (status, _) = predict(&server, &instances(5, i));
                assert_eq!(status, 200);
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(stats(&server)["queries_used"], 100);
    assert_eq!(server.queries_used(), 100);
}

#[test]
fn concurrent_clients_never_exceed_cap() {
    let server = Arc::new(start(Some(37), false, 256));
    let handles: Vec<_> = (0..20)
        .map(|i| {
            let server = server.clone();
            std::thread::spawn(move || predict(&server, &instances(5, i)).0)
        })
        .collect();
    let ok = handles
        .into_iter()
        .map(|h| h.join().unwrap())
        .filter(|&s| s == 200)
        .count();
    assert_eq!(ok, 7);
    assert_eq!(server.queries_used(), 35);
}

#[test]
fn cap_is_enforced() {
    let server = start(Some(10), false, 256);
    assert_eq!(predict(&server, &instances(10, 3)).0, 200);
    let (status, body) = predict(&server, &instances(1, 3));
    assert_eq!(status, 429);
    assert_eq!(body["error"], "budget_exhausted");
    assert_eq!(body["used"], 10);
    assert_eq!(stats(&server)["queries_used"], 10);
}

#[test]
fn oversized_batch_is_rejected() {
    let server = start(None, false, 8);
    let (status, body) = predict(&server, &instances(9, 4));
    assert_eq!(status, 413);
    assert_eq!(body["error"], "batch_too_large");
    assert_eq!(body["max_batch"], 8);
    assert_eq!(stats(&server)["queries_used"], 0);
}

#[test]
fn malformed_json_reports_position() {
    let server = start(None, false, 256);
    let (status, body) = post(
        &server,
        "/v1/predict",
        "{\"instances\": [[1.0, 2.0,\n ]".into(),
    );
    assert_eq!(status, 400);
    assert_eq!(body["error"], "malformed_json");
    assert_eq!(body["line"], 2);
    assert!(body["column"].as_u64().unwrap() > 0);

    let (status, body) = predict(&server, &[vec![1.0, 2.0]]);
    assert_eq!(status, 400);
    assert_eq!(body["error"], "invalid_request");
    assert_eq!(stats(&server)["queries_used"], 0);
}

#[test]
fn probs_are_gated() {
    let closed = start(None, false, 256);
    let (status, body) = post(
        &closed,
        "/v1/probs",
        json!({"instances": instances(2, 5)}).to_string(),
    );
    assert_eq!(status, 403);
    assert_eq!(body["error"], "probs_disabled");

    let open = start(None, true, 256);
    let rows = instances(12, 5);
    let (status, body) = post(&open, "/v1/probs", json!({ "instances": rows }).to_string());
    assert_eq!(status, 200);
    assert_eq!(open.queries_used(), 0);
    let probs: Vec<Vec<f64>> = serde_json::from_value(body["probs"].clone()).unwrap();
    let (_, pred) = predict(&open, &rows);
    let labels: Vec<usize> = serde_json::from_value(pred["labels"].clone()).unwrap();
    for (p, l) in probs.iter().zip(labels) {
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        assert_eq!(best, l);
    }
}

#[test]
fn dp_server_reports_mechanism() {
    let state =
        AppState::new(fixture(), None, Some(DpConfig::laplace(0.5, 3)), false, 256).unwrap();
    let server = spawn(state, "127.0.0.1:0").unwrap();
    let s = stats(&server);
    assert_eq!(s["dp_mechanism"], "laplace-output");
    assert_eq!(s["dp_epsilon"], 0.5);
}

#[test]
fn remote_target_round_trips() {
    let server = start(Some(300), false, 16);
    let remote = RemoteTarget::connect(&server.url()).unwrap();
    let target = TargetHandle::remote(Box::new(remote));
    assert_eq!(target.num_classes(), 3);
    let ds = synth_blobs(3, 4, 20, 2.0, 1.0, 8).unwrap();
    let labels = target.query_labels(&ds.features).unwrap();
    assert_eq!(labels, fixture().predict_labels(&ds.features).unwrap());
    assert_eq!(target.queries_used(), 60);
    assert_eq!(server.queries_used(), 60);

    // 60 + 250 > 300: refused before any chunk is answered
    let big = synth_blobs(2, 4, 125, 2.0, 1.0, 9).unwrap();
    let big = marich_core::mathcore::RealMatrix::new(250, 4, big.features.into_vec()).unwrap();
    assert!(matches!(
        target.query_labels(&big),
        Err(Error::BudgetExhausted { .. })
    ));
    assert_eq!(server.queries_used(), 60);
    assert_eq!(target.queries_used(), 60);

    let probs = target.with_eval_channel(true).white_box_probs(&ds.features);
    match probs {
        Err(Error::Capability(msg)) => assert!(msg.contains("--expose-probs")),
        other => panic!("expected capability error, got {other:?}"),
    }
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    match RemoteTarget::connect(&format!("http://127.0.0.1:{port}")) {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, MAX_ATTEMPTS),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("connected to a closed port"),
    }
}

#[test]
fn config_loads_model_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("target.bin");
    save_model(&fixture(), &path).unwrap();
    let mut cfg = ServerConfig::new("127.0.0.1:0", &path);
    cfg.max_batch = 4;
    let server = spawn(AppState::from_config(&cfg).unwrap(), &cfg.bind).unwrap();
    assert_eq!(stats(&server)["max_batch"], 4);

    cfg.model = dir.path().join("missing.bin");
    assert!(AppState::from_config(&cfg).is_err());
    assert!(AppState::new(fixture(), None, None, false, 0).is_err());
}
