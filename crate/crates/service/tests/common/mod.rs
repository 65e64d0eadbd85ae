#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use bundle_mcr::data::{generate_synthetic, split_leave_one_out, Catalog, DatasetSplit, SyntheticConfig};
use bundle_mcr::nn::{Bunt, Hyperparameters, Vocab};
use bundle_mcr_service::api::{router, AppState};
use bundle_mcr_service::session::ServiceData;
use bundle_mcr_service::turn::Labels;
use http_body_util::BodyExt;
use serde_json::Value;
use std::collections::BTreeMap;
use std::time::Duration;
use tower::ServiceExt;

pub fn corpus() -> (Catalog, DatasetSplit) {
    let cfg = SyntheticConfig {
        n_users: 20,
        n_items: 40,
        n_cats: 4,
        n_user_types: 2,
        ..SyntheticConfig::default()
    };
    let (c, hs) = generate_synthetic(&cfg, 4).unwrap();
    let split = split_leave_one_out(&hs, 4).unwrap();
    (c, split)
}

pub fn model(c: &Catalog) -> Bunt {
    let hp = Hyperparameters {
        d: 8,
        ..Hyperparameters::default()
    };
    Bunt::new(hp, Vocab::of(c), 4).unwrap()
}

pub fn data() -> ServiceData {
    let (c, split) = corpus();
    let m = model(&c);
    ServiceData::new(c, split.offline.clone(), BTreeMap::from([("base".to_string(), m)]), Labels::default()).unwrap()
}

pub fn state_with_ttl(ttl: Duration) -> AppState {
    AppState::new(data(), ttl, None)
}

pub fn app() -> (Router, AppState) {
    let st = state_with_ttl(Duration::from_secs(1800));
    (router(st.clone()), st)
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, key: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(k) = key {
        req = req.header("Idempotency-Key", k);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

/// A user id of the fixture that has offline bundles.
pub fn known_user(d: &ServiceData) -> u32 {
    d.histories.keys().next().unwrap().0
}

pub async fn create(app: &Router, user: u32, policy: &str) -> (String, Value) {
    let (s, v) = call(
        app,
        "POST",
        "/sessions",
        Some(serde_json::json!({"user_id": user, "policy": policy, "checkpoint": "base"})),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    (v["session_id"].as_str().unwrap().to_string(), v)
}

/// Feedback giving every slot of `turn` the same verdict(s).
pub fn uniform_feedback(turn: &Value, item: &str, tag: &str) -> Value {
    let slots = turn["slots"].as_array().unwrap();
    if turn["kind"] == "RECOMMEND" {
        let v: Vec<Value> = slots.iter().map(|s| serde_json::json!({"slot": s["slot"], "verdict": item})).collect();
        serde_json::json!({"kind": "RECOMMEND", "verdicts": v})
    } else {
        let v: Vec<Value> = slots
            .iter()
            .map(|s| serde_json::json!({"slot": s["slot"], "attr": tag, "cat": tag}))
            .collect();
        serde_json::json!({"kind": "ASK", "verdicts": v})
    }
}
