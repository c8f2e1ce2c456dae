use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use mobseg_core::data::io::{write_dir, DEMOGRAPHICS_FILE, FLOWS_FILE, GEOMETRY_FILE, POI_FILE};
use mobseg_core::data::CityDataset;
use mobseg_core::synth::{generate_city, SynthConfig};
use mobseg_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn city(n: usize, seed: u64) -> CityDataset {
    generate_city(&SynthConfig::new(seed, n, 2)).unwrap().0
}

fn app(dir: &std::path::Path) -> (Arc<AppState>, Router) {
    let cfg = ServiceConfig {
        data_dir: dir.to_path_buf(),
        k_dest: 10,
        k_bridge: 8,
        ..ServiceConfig::default()
    };
    let state = AppState::new(cfg);
    (state.clone(), router(state))
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, v)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.map(|b| b.to_string()).unwrap_or_default()))
        .unwrap();
    send(app, req).await
}

async fn wait_for_training(app: &Router) -> Value {
    for _ in 0..4000 {
        let (s, v) = call(app, "GET", "/model/status", None).await;
        assert_eq!(s, StatusCode::OK);
        if v["state"] != "running" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("training did not finish");
}

/// Highest-inflow CBG: always admissible as a what-if target.
fn busiest(d: &CityDataset) -> String {
    let j = (0..d.len())
        .max_by(|&a, &b| d.flows().in_total(a).total_cmp(&d.flows().in_total(b)))
        .unwrap();
    d.cbg(j).id.clone()
}

#[tokio::test]
async fn views_over_detected_communities() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = app(dir.path());
    let d = city(80, 3);
    let id = state.add_dataset(d.clone()).unwrap();

    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!((s, v["v"].clone()), (StatusCode::OK, json!(1)));

    let (s, v) = call(&app, "GET", &format!("/datasets/{id}/summary"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["hash"], d.content_hash());
    assert_eq!(v["summary"]["cbgs"], 80);

    let (s, v) = call(&app, "GET", "/flow-matrix", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["kind"], "NoPartition");

    let (s, v) = call(&app, "POST", "/communities/detect", Some(json!({"max_communities": 3, "seed": 1}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["v"], 1);
    let n_comm = v["partition"]["communities"].as_array().unwrap().len();
    assert!((1..=3).contains(&n_comm));
    let sigs = v["signatures"].as_array().unwrap();
    assert!(sigs.len() >= n_comm);
    for sig in sigs.iter().filter(|s| s["groups"].is_array()) {
        for q in sig["groups"].as_array().unwrap() {
            let (a, b, c) = (q["q1"].as_f64().unwrap(), q["median"].as_f64().unwrap(), q["q3"].as_f64().unwrap());
            assert!(a <= b && b <= c);
        }
    }

    let mut sums = Vec::new();
    for agg in ["mean", "median", "sum", "std"] {
        let (s, v) = call(&app, "GET", &format!("/flow-matrix?aggregation={agg}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let m = &v["matrix"];
        let labels = m["labels"].as_array().unwrap();
        let cells = m["cells"].as_array().unwrap();
        assert_eq!(cells.len(), labels.len());
        assert_eq!(labels.last().unwrap(), "total");
        for row in cells {
            assert_eq!(row.as_array().unwrap().len(), labels.len());
            for c in row.as_array().unwrap() {
                let shade = c["shade"].as_f64().unwrap();
                assert!((0.0..=1.0 + 1e-12).contains(&shade));
            }
        }
        if agg == "sum" {
            let corner = cells.last().unwrap().as_array().unwrap().last().unwrap();
            sums.push(corner["value"].as_f64().unwrap());
            assert!((corner["shade"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        }
    }
    assert!((sums[0] - d.flows().total_weight()).abs() < 1e-6 * d.flows().total_weight());

    let (s, v) = call(&app, "GET", "/flow-matrix?aggregation=mode", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["field"], "aggregation");

    let (s, v) = call(&app, "GET", "/cbgs/ranking?community=0&k_bridge=5", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let ranking = v["ranking"].as_array().unwrap();
    assert!(!ranking.is_empty());
    let closeness: Vec<f64> = ranking.iter().map(|r| r["closeness"].as_f64().unwrap()).collect();
    assert!(closeness.windows(2).all(|w| w[0] >= w[1]));

    let (s, _) = call(&app, "GET", "/cbgs/ranking?community=99", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/cbgs/ranking?community=zero", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let target = busiest(&d);
    let (s, v) = call(&app, "GET", &format!("/cbgs/{target}/inflows?k_bridge=6"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["view"]["glyphs"].as_array().unwrap().len(), 7);
    assert!(v["view"]["cpc"].is_null());

    let (s, v) = call(&app, "GET", "/cbgs/nowhere/inflows", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["kind"], "UnknownCbg");
}

#[tokio::test]
async fn training_whatif_and_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = app(dir.path());
    let d = city(120, 5);
    let id = state.add_dataset(d.clone()).unwrap();
    let target = busiest(&d);

    let (s, v) = call(&app, "GET", "/model/metrics", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["kind"], "NoMetrics");
    let (s, _) = call(&app, "POST", "/whatif", Some(json!({"target": target}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, v) = call(&app, "POST", "/model/train", Some(json!({"variant": "dg+s", "epochs": 20}))).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let (s, v) = call(&app, "POST", "/model/train", Some(json!({"variant": "dg"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["v"], 1);
    let done = wait_for_training(&app).await;
    assert_eq!(done["state"], "done", "{done}");

    let (s, v) = call(&app, "POST", "/model/train", Some(json!({"variants": ["dg+s+v"], "epochs": 3}))).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let done = wait_for_training(&app).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["progress"], 1.0);

    let (s, v) = call(&app, "GET", "/model/metrics", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["report"]["means"][0]["variant"], "dg+s+v");

    let (s, v) = call(&app, "POST", "/model/train", Some(json!({"epochs": 0}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["kind"], "InvalidConfig");
    let (s, _) = call(&app, "POST", "/model/train", Some(json!({"variant": "xgboost"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, v) = call(&app, "POST", "/whatif", Some(json!({"target": target}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r = &v["result"];
    assert_eq!(r["variant"], "dg+s+v");
    assert_eq!(r["max_abs_delta_sum"], 0.0);
    assert_eq!(r["summary"]["delta_si"], 0.0);

    let (s, v) = call(&app, "POST", "/whatif", Some(json!({"target": target, "deltas": {"food": 40.0}}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert!(v["result"]["max_abs_delta_sum"].as_f64().unwrap() < 1e-9);

    let (s, v) = call(&app, "POST", "/whatif", Some(json!({"target": target, "deltas": {"casino": 1.0}}))).await;
    assert_eq!((s, v["error"]["kind"].clone()), (StatusCode::BAD_REQUEST, json!("UnknownPoiType")));
    let (s, v) = call(&app, "POST", "/whatif", Some(json!({"target": target, "deltas": {"food": -1.0}}))).await;
    assert_eq!((s, v["error"]["kind"].clone()), (StatusCode::BAD_REQUEST, json!("NegativeDensity")));
    let (s, _) = call(&app, "POST", "/whatif", Some(json!({"target": target, "colour": "red"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, v) = call(&app, "GET", &format!("/cbgs/{target}/feature-impact?group=0&k_bridge=3"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let slots = v["report"]["slots"].as_array().unwrap();
    assert!(!slots.is_empty());
    assert_eq!(v["report"]["order_by_magnitude"].as_array().unwrap().len(), slots.len());
    let (s, v) = call(&app, "GET", &format!("/cbgs/{target}/inflows"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND, "{v}");

    // strategies
    let (s, v) = call(
        &app,
        "POST",
        "/strategies",
        Some(json!({"label": "more food", "target": target, "deltas": {"food": 25.0}})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["id"], "s1");
    let file = dir.path().join(&id).join("strategies.json");
    assert!(file.exists());

    let (s, v) = call(&app, "PUT", "/strategies/s1", Some(json!({"label": "renamed"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["label"], "renamed");
    assert_eq!(v["deltas"]["food"], 25.0);
    let (s, v) = call(&app, "PUT", "/strategies/s1", Some(json!({"deltas": {"food": 0.0}}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["result"]["deltas"]["food"], 0.0);

    let (s, v) = call(&app, "GET", "/strategies", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["strategies"].as_array().unwrap().len(), 1);
    let (s, _) = call(&app, "DELETE", "/strategies/s1", None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = call(&app, "GET", "/strategies/s1", None).await;
    assert_eq!((s, v["error"]["kind"].clone()), (StatusCode::NOT_FOUND, json!("UnknownStrategy")));

    // A fresh service over the same data dir sees the stored file.
    let (s, _) = call(&app, "POST", "/strategies", Some(json!({"target": target}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let (state2, app2) = self::app(dir.path());
    state2.add_dataset(d).unwrap();
    let (_, v) = call(&app2, "GET", "/strategies", None).await;
    assert_eq!(v["strategies"][0]["id"], "s2");
}

fn multipart(parts: &[(&str, &str, Vec<u8>)]) -> (String, Vec<u8>) {
    let boundary = "mobsegboundary7f3a".to_string();
    let mut body = Vec::new();
    for (name, file, data) in parts {
        body.extend_from_slice(
            format!(
                "--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{file}\"\r\nContent-Type: text/csv\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (boundary, body)
}

async fn upload(app: &Router, parts: &[(&str, &str, Vec<u8>)]) -> (StatusCode, Value) {
    let (boundary, body) = multipart(parts);
    let req = Request::builder()
        .method("POST")
        .uri("/datasets")
        .header("content-type", format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap();
    send(app, req).await
}

#[tokio::test]
async fn multipart_upload() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path());
    let d = city(40, 9);
    let src = tempfile::tempdir().unwrap();
    write_dir(&d, src.path()).unwrap();
    let read = |f: &str| std::fs::read(src.path().join(f)).unwrap();

    let (s, v) = upload(
        &app,
        &[
            ("flows", FLOWS_FILE, read(FLOWS_FILE)),
            ("demo", DEMOGRAPHICS_FILE, read(DEMOGRAPHICS_FILE)),
            ("poi", POI_FILE, read(POI_FILE)),
            ("geometry", GEOMETRY_FILE, read(GEOMETRY_FILE)),
        ],
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["v"], 1);
    let id = v["id"].as_str().unwrap().to_string();
    assert!(d.content_hash().starts_with(&id));

    let (s, v) = call(&app, "GET", "/datasets", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["active"], id);

    let (s, v) = upload(&app, &[("flows", FLOWS_FILE, read(FLOWS_FILE))]).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["field"], "demographics");

    let mut bad = read(FLOWS_FILE);
    bad.extend_from_slice(b"ghost,nowhere,1\n");
    let (s, v) = upload(
        &app,
        &[
            ("flows", FLOWS_FILE, bad),
            ("demographics", DEMOGRAPHICS_FILE, read(DEMOGRAPHICS_FILE)),
            ("poi", POI_FILE, read(POI_FILE)),
        ],
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
    assert_eq!(v["error"]["kind"], "UnknownCbg");

    let (s, _) = call(&app, "GET", "/datasets/feedface/summary", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
