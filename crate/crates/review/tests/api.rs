use std::net::SocketAddr;
use std::sync::Arc;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use rolecheck_core::screening::{ItemKind, ReviewItem, ScreeningStore};
use rolecheck_core::MemoryCategory;
use rolecheck_review::{spawn, ErrorBody, ReviewError, ReviewState, RunningService};

fn item(id: &str) -> ReviewItem {
    ReviewItem {
        item_id: id.to_string(),
        kind: ItemKind::Memory,
        memory_id: id.to_string(),
        character_id: "beethoven".into(),
        source_chunk_text: "I was born in Bonn.".into(),
        candidate_text: format!("I remember item {id}."),
        explanation: None,
        category: MemoryCategory::Event,
        error_type: None,
        review_flags: vec![],
    }
}

fn start(ids: &[&str], roster: &[&str]) -> (RunningService, Arc<ReviewState>) {
    let mut store = ScreeningStore::new(roster.iter().map(|s| s.to_string()).collect());
    store.add_items(ids.iter().map(|id| item(id))).unwrap();
    let state = ReviewState::new(store, 3);
    let svc = spawn("127.0.0.1:0".parse().unwrap(), state.clone(), None).unwrap();
    (svc, state)
}

fn post_verdict(client: &Client, svc: &RunningService, item: &str, who: &str, decision: &str) -> (StatusCode, Value) {
    let resp = client
        .post(svc.url("/api/verdict"))
        .json(&json!({"item_id": item, "annotator_id": who, "decision": decision}))
        .send()
        .unwrap();
    let status = resp.status();
    (status, resp.json().unwrap())
}

fn queue_ids(client: &Client, svc: &RunningService, who: &str) -> Vec<String> {
    let items: Vec<Value> = client
        .get(svc.url(&format!("/api/queue?annotator={who}&kind=memory")))
        .send()
        .unwrap()
        .json()
        .unwrap();
    items.iter().map(|i| i["item_id"].as_str().unwrap().to_string()).collect()
}

#[test]
fn queue_lists_pending_items_in_id_order() {
    let (svc, _) = start(&["m2", "m1"], &[]);
    let client = Client::new();
    assert_eq!(queue_ids(&client, &svc, "ann1"), vec!["m1", "m2"]);
}

#[test]
fn verdict_removes_item_only_for_that_annotator() {
    let (svc, _) = start(&["m1", "m2"], &[]);
    let client = Client::new();
    let (status, body) = post_verdict(&client, &svc, "m1", "ann1", "keep");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["decision"], "keep");
    assert_eq!(queue_ids(&client, &svc, "ann1"), vec!["m2"]);
    assert_eq!(queue_ids(&client, &svc, "ann2"), vec!["m1", "m2"]);
}

#[test]
fn conflicting_resubmission_is_refused() {
    let (svc, state) = start(&["m1"], &[]);
    let client = Client::new();
    assert_eq!(post_verdict(&client, &svc, "m1", "ann1", "keep").0, StatusCode::OK);
    assert_eq!(post_verdict(&client, &svc, "m1", "ann1", "keep").0, StatusCode::OK);
    let (status, body) = post_verdict(&client, &svc, "m1", "ann1", "reject");
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "AlreadyFinalized");
    let stored = state.with_store(|s| s.verdict("m1", "ann1").unwrap().decision);
    assert_eq!(format!("{stored:?}"), "Keep");
}

#[test]
fn unknown_item_is_404() {
    let (svc, _) = start(&["m1"], &[]);
    let (status, body) = post_verdict(&Client::new(), &svc, "nope", "ann1", "keep");
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "UnknownItem");
}

#[test]
fn bad_requests_are_400() {
    let (svc, _) = start(&["m1"], &[]);
    let client = Client::new();
    let resp = client.get(svc.url("/api/queue?kind=memory")).send().unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let resp = client.get(svc.url("/api/queue?annotator=a&kind=bogus")).send().unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
}

#[test]
fn agreement_mid_screening_lists_missing_pairs() {
    // Two items, roster a/b/c; a judged both, b judged m1 only.
    let (svc, _) = start(&["m1", "m2"], &["a", "b", "c"]);
    let client = Client::new();
    post_verdict(&client, &svc, "m1", "a", "keep");
    post_verdict(&client, &svc, "m2", "a", "reject");
    post_verdict(&client, &svc, "m1", "b", "keep");
    let resp = client.get(svc.url("/api/agreement?kind=memory")).send().unwrap();
    assert_eq!(resp.status(), StatusCode::CONFLICT);
    let body: ErrorBody = resp.json().unwrap();
    assert_eq!(body.error, "IncompleteVerdicts");
    let missing: Vec<(String, String)> = body
        .missing
        .unwrap()
        .into_iter()
        .map(|m| (m.item_id, m.annotator_id))
        .collect();
    let expected: Vec<(String, String)> = [("m1", "c"), ("m2", "b"), ("m2", "c")]
        .iter()
        .map(|(i, a)| (i.to_string(), a.to_string()))
        .collect();
    assert_eq!(missing, expected);
}

#[test]
fn three_annotator_session_reaches_two_thirds_overlap() {
    let ids = ["i1", "i2", "i3", "i4"];
    let (svc, _) = start(&ids, &["a", "b", "c"]);
    let client = Client::new();
    let plan = ["kkk", "kkr", "rrr", "kkk"];
    for (id, votes) in ids.iter().zip(plan) {
        for (who, v) in ["a", "b", "c"].iter().zip(votes.chars()) {
            let decision = if v == 'k' { "keep" } else { "reject" };
            assert_eq!(post_verdict(&client, &svc, id, who, decision).0, StatusCode::OK);
        }
    }
    let report: Value = client
        .get(svc.url("/api/agreement?kind=memory"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(report["kept_all"], 2);
    assert_eq!(report["kept_any"], 3);
    assert!((report["overlap_ratio"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    let progress: Value = client.get(svc.url("/api/progress")).send().unwrap().json().unwrap();
    let mem = progress.as_array().unwrap().iter().find(|p| p["kind"] == "memory").unwrap();
    assert_eq!(mem["missing"], 0);
    assert_eq!(mem["verdicts"]["a"], 4);
}

#[test]
fn index_page_is_served() {
    let (svc, _) = start(&[], &[]);
    let resp = Client::new().get(svc.url("/")).send().unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.text().unwrap().contains("/api/"));
}

#[test]
fn static_dir_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>review</h1>").unwrap();
    let state = ReviewState::new(ScreeningStore::new(vec![]), 3);
    let svc = spawn("127.0.0.1:0".parse().unwrap(), state, Some(dir.path().to_path_buf())).unwrap();
    let body = Client::new().get(svc.url("/")).send().unwrap().text().unwrap();
    assert_eq!(body, "<h1>review</h1>");
}

#[test]
fn occupied_port_is_port_busy() {
    let holder = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr: SocketAddr = holder.local_addr().unwrap();
    let state = ReviewState::new(ScreeningStore::new(vec![]), 3);
    match spawn(addr, state, None) {
        Err(e @ ReviewError::PortBusy(_)) => assert_eq!(e.name(), "PortBusy"),
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("bind on an occupied port succeeded"),
    }
}
