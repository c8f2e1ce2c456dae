use std::collections::BTreeMap;
use std::io::Cursor;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::Router;
use mobseg_core::community::{detect_communities, DetectionConfig, Partition};
use mobseg_core::data::io::load_from_readers;
use mobseg_core::model::train::{run_protocol, Prepared, TrainConfig};
use mobseg_core::model::{GroupModelSet, Variant};
use mobseg_core::segregation::rank_cbgs;
use mobseg_core::views::{community_signatures, flow_matrix, inflow_view, Aggregation};
use mobseg_core::whatif::{apply_with_base, feature_impact, scenario_base, Intervention, ScenarioResult, WhatIfConfig};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use crate::api::{created, ok, ApiError, ApiResult};
use crate::state::{AppState, DatasetEntry, JobState, JobStatus};

type Shared = Arc<AppState>;
type Params = Query<BTreeMap<String, String>>;

const MAX_UPLOAD: usize = 512 * 1024 * 1024;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(|| async { ok(json!({"status": "ok"})) }))
        .route("/datasets", post(upload_dataset).get(list_datasets))
        .route("/datasets/{id}/summary", get(dataset_summary))
        .route("/communities/detect", post(detect))
        .route("/flow-matrix", get(get_flow_matrix))
        .route("/cbgs/ranking", get(ranking))
        .route("/cbgs/{id}/inflows", get(inflows))
        .route("/cbgs/{id}/feature-impact", get(get_feature_impact))
        .route("/model/train", post(train))
        .route("/model/status", get(status))
        .route("/model/metrics", get(metrics))
        .route("/whatif", post(whatif))
        .route("/strategies", get(list_strategies).post(create_strategy))
        .route(
            "/strategies/{id}",
            get(get_strategy).put(update_strategy).delete(delete_strategy),
        )
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

fn param<T: FromStr>(p: &BTreeMap<String, String>, key: &str) -> ApiResult<Option<T>> {
    match p.get(key).map(|s| s.trim()).filter(|s| !s.is_empty()) {
        None => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|_| ApiError::bad_request(key, format!("cannot parse `{s}`"))),
    }
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    let raw: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) { b"{}" } else { bytes };
    serde_json::from_slice(raw).map_err(|e| ApiError::bad_request("body", e.to_string()))
}

fn entry(state: &AppState, id: Option<&str>) -> ApiResult<Arc<DatasetEntry>> {
    match id {
        Some(id) => state
            .dataset(id)
            .ok_or_else(|| ApiError::not_found("UnknownDataset", format!("no dataset `{id}`"))),
        None => state
            .active()
            .ok_or_else(|| ApiError::not_found("NoDataset", "no dataset has been uploaded")),
    }
}

fn attribute_of(e: &DatasetEntry, requested: Option<String>) -> ApiResult<String> {
    if let Some(a) = requested {
        e.dataset.attribute(&a)?;
        return Ok(a);
    }
    if let Some(a) = e.analysis.read().expect("lock").attribute.clone() {
        return Ok(a);
    }
    e.dataset
        .attributes()
        .first()
        .map(|s| s.name.clone())
        .ok_or_else(|| ApiError::bad_request("attribute", "dataset has no demographic attribute"))
}

fn partition_of(e: &DatasetEntry) -> ApiResult<Arc<Partition>> {
    e.analysis
        .read()
        .expect("lock")
        .partition
        .clone()
        .ok_or_else(|| ApiError::not_found("NoPartition", "run /communities/detect first"))
}

fn model_of(e: &DatasetEntry, attribute: &str, variant: Option<Variant>) -> ApiResult<Arc<GroupModelSet>> {
    e.analysis
        .read()
        .expect("lock")
        .model(attribute, variant)
        .ok_or_else(|| ApiError::not_found("UntrainedModel", format!("no trained model for `{attribute}`")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

async fn upload_dataset(State(state): State<Shared>, mut form: Multipart) -> ApiResult<impl IntoResponse> {
    let mut parts: BTreeMap<String, (String, Vec<u8>)> = BTreeMap::new();
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request("multipart", e.to_string()))?
    {
        let name = match field.name().unwrap_or("") {
            "demo" => "demographics".to_string(),
            "geo" => "geometry".to_string(),
            n => n.to_string(),
        };
        let file = field.file_name().unwrap_or(&name).to_string();
        let data = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(&name, e.to_string()))?;
        parts.insert(name, (file, data.to_vec()));
    }
    let mut take = |k: &str| parts.remove(k).map(|(f, d)| (f, Cursor::new(d)));
    let missing = |k: &str| ApiError::bad_request(k, format!("missing multipart field `{k}`"));
    let flows = take("flows").ok_or_else(|| missing("flows"))?;
    let demo = take("demographics").ok_or_else(|| missing("demographics"))?;
    let poi = take("poi").ok_or_else(|| missing("poi"))?;
    let geo = take("geometry");
    let st = state.clone();
    let (id, summary) = blocking(move || {
        let d = load_from_readers(flows, demo, poi, geo).map_err(|e| {
            let mut a = ApiError::from(e);
            if a.status == StatusCode::NOT_FOUND {
                a.status = StatusCode::BAD_REQUEST;
            }
            a
        })?;
        let summary = d.validation_summary();
        Ok((st.add_dataset(d)?, summary))
    })
    .await?;
    Ok(created(json!({"id": id, "summary": summary})))
}

async fn list_datasets(State(state): State<Shared>) -> impl IntoResponse {
    let ids: Vec<String> = state.datasets.read().expect("lock").keys().cloned().collect();
    let active = state.active.read().expect("lock").clone();
    ok(json!({"datasets": ids, "active": active}))
}

async fn dataset_summary(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let e = entry(&state, Some(&id))?;
    let d = &e.dataset;
    let attributes: Vec<_> = d
        .attributes()
        .iter()
        .map(|a| json!({"name": a.name, "groups": a.groups}))
        .collect();
    Ok(ok(json!({
        "id": e.id,
        "hash": d.content_hash(),
        "summary": d.validation_summary(),
        "attributes": attributes,
        "poi_types": d.poi_types(),
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectRequest {
    dataset: Option<String>,
    attribute: Option<String>,
    w_min: Option<f64>,
    max_communities: Option<usize>,
    resolution: Option<f64>,
    seed: Option<u64>,
}

async fn detect(State(state): State<Shared>, raw: Bytes) -> ApiResult<impl IntoResponse> {
    let req: DetectRequest = body(&raw)?;
    let e = entry(&state, req.dataset.as_deref())?;
    let attribute = attribute_of(&e, req.attribute)?;
    let mut cfg = DetectionConfig::default();
    if let Some(w) = req.w_min {
        cfg.w_min = w;
    }
    if let Some(m) = req.max_communities {
        cfg.max_communities = m;
    }
    if let Some(r) = req.resolution {
        cfg.resolution = r;
    }
    cfg.seed = req.seed.unwrap_or(state.config.seed);
    cfg.validate()?;
    blocking(move || {
        let partition = Arc::new(detect_communities(e.dataset.flows(), &cfg)?);
        let theta = e.dataset.group_proportions(&attribute)?;
        let signatures = community_signatures(&partition, &theta);
        {
            let mut a = e.analysis.write().expect("lock");
            a.partition = Some(partition.clone());
            a.attribute = Some(attribute.clone());
        }
        Ok(ok(json!({
            "dataset": e.id,
            "attribute": attribute,
            "groups": e.dataset.attribute(&attribute)?.groups,
            "config": cfg,
            "partition": *partition,
            "signatures": signatures,
        })))
    })
    .await
}

async fn get_flow_matrix(State(state): State<Shared>, Query(p): Params) -> ApiResult<impl IntoResponse> {
    let e = entry(&state, p.get("dataset").map(String::as_str))?;
    let agg: Aggregation = param(&p, "aggregation")?.unwrap_or(Aggregation::Sum);
    let attribute = attribute_of(&e, param(&p, "attribute")?)?;
    let partition = partition_of(&e)?;
    blocking(move || {
        let theta = e.dataset.group_proportions(&attribute)?;
        let m = flow_matrix(&e.dataset, &theta, &partition, agg);
        Ok(ok(json!({"attribute": attribute, "groups": e.dataset.attribute(&attribute)?.groups, "matrix": m})))
    })
    .await
}

fn community_members(partition: &Partition, key: &str) -> ApiResult<(usize, Vec<usize>)> {
    let id = if key == "others" {
        partition.others_id()
    } else {
        key.parse()
            .map_err(|_| ApiError::bad_request("community", format!("`{key}` is not a community id")))?
    };
    let members = if id < partition.communities.len() || id == partition.others_id() {
        partition.member_indices(id)
    } else {
        Vec::new()
    };
    if members.is_empty() {
        return Err(ApiError::not_found("EmptyCommunity", format!("community `{key}` has no members")));
    }
    Ok((id, members))
}

async fn ranking(State(state): State<Shared>, Query(p): Params) -> ApiResult<impl IntoResponse> {
    let e = entry(&state, p.get("dataset").map(String::as_str))?;
    let key: String = param(&p, "community")?.ok_or_else(|| ApiError::bad_request("community", "required"))?;
    let k_bridge: usize = param(&p, "k_bridge")?.unwrap_or(state.config.k_bridge);
    if k_bridge == 0 {
        return Err(ApiError::bad_request("k_bridge", "must be at least 1"));
    }
    let attribute = attribute_of(&e, param(&p, "attribute")?)?;
    let partition = partition_of(&e)?;
    let (id, members) = community_members(&partition, &key)?;
    blocking(move || {
        let theta = e.dataset.group_proportions(&attribute)?;
        let ranking = rank_cbgs(&e.dataset, &theta, &members, k_bridge)?;
        Ok(ok(json!({
            "community": id,
            "attribute": attribute,
            "groups": e.dataset.attribute(&attribute)?.groups,
            "k_bridge": k_bridge,
            "ranking": ranking,
        })))
    })
    .await
}

async fn inflows(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(p): Params,
) -> ApiResult<impl IntoResponse> {
    let e = entry(&state, p.get("dataset").map(String::as_str))?;
    let k_bridge: usize = param(&p, "k_bridge")?.unwrap_or(state.config.k_bridge);
    let variant: Option<Variant> = param(&p, "variant")?;
    let attribute = attribute_of(&e, param(&p, "attribute")?)?;
    let partition = partition_of(&e)?;
    let target = e.dataset.require_index(&id)?;
    let model = e.analysis.read().expect("lock").model(&attribute, variant);
    let k_dest = model.as_ref().map_or(state.config.k_dest, |m| m.k_dest);
    let seed = state.config.seed;
    blocking(move || {
        let prep = Prepared::new(&e.dataset, &attribute, k_dest)?;
        let view = inflow_view(&prep, &partition, target, k_bridge, model.as_deref().map(|m| (m, seed)))?;
        Ok(ok(json!({
            "attribute": attribute,
            "groups": e.dataset.attribute(&attribute)?.groups,
            "variant": model.map(|m| m.variant),
            "view": view,
        })))
    })
    .await
}

async fn get_feature_impact(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(p): Params,
) -> ApiResult<impl IntoResponse> {
    let e = entry(&state, p.get("dataset").map(String::as_str))?;
    let k_bridge: usize = param(&p, "k_bridge")?.unwrap_or(state.config.k_bridge);
    let samples: usize = param(&p, "samples")?.unwrap_or(state.config.shap_samples).max(1);
    let group: Option<String> = param(&p, "group")?;
    let attribute = attribute_of(&e, param(&p, "attribute")?)?;
    let model = model_of(&e, &attribute, param(&p, "variant")?)?;
    let target = e.dataset.require_index(&id)?;
    let seed = state.config.seed;
    blocking(move || {
        let prep = Prepared::new(&e.dataset, &attribute, model.k_dest)?;
        let cfg = WhatIfConfig {
            k_bridge,
            seed,
            shap_samples: samples,
        };
        let summary = feature_impact(&model, &prep, target, &cfg)?;
        let Some(g) = group else {
            return Ok(ok(json!({"target": id, "variant": model.variant, "impact": summary})));
        };
        let report = summary
            .reports
            .iter()
            .enumerate()
            .find(|(i, r)| r.group == g || i.to_string() == g)
            .map(|(_, r)| r.clone())
            .ok_or_else(|| ApiError::bad_request("group", format!("unknown group `{g}`")))?;
        Ok(ok(json!({
            "target": id,
            "variant": model.variant,
            "exact": summary.exact,
            "report": report,
        })))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    dataset: Option<String>,
    attribute: Option<String>,
    variant: Option<Variant>,
    variants: Option<Vec<Variant>>,
    epochs: Option<usize>,
    runs: Option<usize>,
    k_dest: Option<usize>,
    seed: Option<u64>,
    learning_rate: Option<f64>,
}

async fn train(State(state): State<Shared>, raw: Bytes) -> ApiResult<impl IntoResponse> {
    let req: TrainRequest = body(&raw)?;
    let e = entry(&state, req.dataset.as_deref())?;
    let attribute = attribute_of(&e, req.attribute)?;
    let variants = match (req.variants, req.variant) {
        (Some(v), _) => v,
        (None, Some(v)) => vec![v],
        (None, None) => Variant::ALL.to_vec(),
    };
    let mut cfg = TrainConfig::new(attribute.clone(), variants.clone());
    cfg.k_dest = req.k_dest.unwrap_or(state.config.k_dest);
    cfg.runs = req.runs.unwrap_or(1);
    cfg.seed = req.seed.unwrap_or(state.config.seed);
    if let Some(n) = req.epochs {
        cfg.epochs = n;
    }
    if let Some(lr) = req.learning_rate {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;
    let n_groups = e.dataset.attribute(&attribute)?.n();

    let job_id = {
        let mut job = state.job.lock().expect("lock");
        if job.state == JobState::Running {
            return Err(ApiError::conflict("a training job is already running"));
        }
        let mut next = state.next_job.lock().expect("lock");
        *next += 1;
        *job = JobStatus {
            state: JobState::Running,
            job_id: Some(*next),
            dataset: Some(e.id.clone()),
            attribute: Some(attribute.clone()),
            variants: variants.clone(),
            ..JobStatus::default()
        };
        *next
    };

    let planned: usize = cfg.runs
        * cfg.epochs
        * variants
            .iter()
            .filter(|v| v.is_deep())
            .map(|v| if v.segmented() { n_groups } else { 1 })
            .sum::<usize>();
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut done = 0usize;
        let result = run_protocol(&e.dataset, &cfg, &mut |p| {
            done += 1;
            let mut job = st.job.lock().expect("lock");
            job.progress = if planned > 0 { (done as f64 / planned as f64).min(1.0) } else { 1.0 };
            job.current = Some(p.clone());
        });
        let mut job = st.job.lock().expect("lock");
        match result {
            Ok(r) => {
                let mut a = e.analysis.write().expect("lock");
                for m in r.models {
                    a.models.insert((m.attribute.clone(), m.variant), Arc::new(m));
                }
                a.metrics = Some((cfg.attribute.clone(), Arc::new(r.report)));
                a.attribute = Some(cfg.attribute.clone());
                job.state = JobState::Done;
                job.progress = 1.0;
            }
            Err(err) => {
                job.state = JobState::Failed;
                job.error = Some(err.to_string());
            }
        }
    });
    let status = state.job_status();
    Ok((StatusCode::ACCEPTED, ok(json!({"job_id": job_id, "status": status}))))
}

async fn status(State(state): State<Shared>) -> impl IntoResponse {
    ok(state.job_status())
}

async fn metrics(State(state): State<Shared>, Query(p): Params) -> ApiResult<impl IntoResponse> {
    let e = entry(&state, p.get("dataset").map(String::as_str))?;
    let (attribute, report) = e
        .analysis
        .read()
        .expect("lock")
        .metrics
        .clone()
        .ok_or_else(|| ApiError::not_found("NoMetrics", "no training has finished for this dataset"))?;
    Ok(ok(json!({"attribute": attribute, "report": *report})))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioRequest {
    dataset: Option<String>,
    attribute: Option<String>,
    variant: Option<Variant>,
    target: String,
    #[serde(default)]
    deltas: BTreeMap<String, f64>,
    #[serde(default)]
    expert: bool,
    k_bridge: Option<usize>,
    label: Option<String>,
}

struct Scenario {
    entry: Arc<DatasetEntry>,
    intervention: Intervention,
    result: ScenarioResult,
    elapsed_ms: f64,
}

async fn run_scenario(state: &Shared, req: ScenarioRequest) -> ApiResult<Scenario> {
    let e = entry(state, req.dataset.as_deref())?;
    let attribute = attribute_of(&e, req.attribute)?;
    let model = model_of(&e, &attribute, req.variant)?;
    let cfg = WhatIfConfig {
        k_bridge: req.k_bridge.unwrap_or(state.config.k_bridge),
        seed: state.config.seed,
        shap_samples: state.config.shap_samples,
    };
    let iv = Intervention {
        target: req.target,
        deltas: req.deltas,
        expert: req.expert,
    };
    blocking(move || {
        let t = Instant::now();
        let prep = Prepared::new(&e.dataset, &attribute, model.k_dest)?;
        let cached = e
            .scenario
            .lock()
            .expect("lock")
            .as_ref()
            .filter(|(m, b)| Arc::ptr_eq(m, &model) && b.matches(&iv.target, &cfg))
            .map(|(_, b)| b.clone());
        let base = match cached {
            Some(b) => b,
            None => {
                let b = Arc::new(scenario_base(&model, &prep, &iv.target, &cfg)?);
                *e.scenario.lock().expect("lock") = Some((model.clone(), b.clone()));
                b
            }
        };
        let result = apply_with_base(&model, &prep, &base, &iv, &cfg)?;
        Ok(Scenario {
            entry: e,
            intervention: iv,
            result,
            elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
        })
    })
    .await
}

async fn whatif(State(state): State<Shared>, raw: Bytes) -> ApiResult<impl IntoResponse> {
    let req: ScenarioRequest = body(&raw)?;
    let s = run_scenario(&state, req).await?;
    let budget = state.config.latency_budget_ms as f64;
    Ok(ok(json!({
        "result": s.result,
        "elapsed_ms": s.elapsed_ms,
        "within_budget": s.elapsed_ms <= budget,
    })))
}

async fn list_strategies(State(state): State<Shared>, Query(p): Params) -> ApiResult<impl IntoResponse> {
    let e = entry(&state, p.get("dataset").map(String::as_str))?;
    let store = e.store.lock().expect("lock");
    Ok(ok(json!({"dataset": e.id, "strategies": store.list()})))
}

async fn create_strategy(State(state): State<Shared>, raw: Bytes) -> ApiResult<impl IntoResponse> {
    let req: ScenarioRequest = body(&raw)?;
    let label = req.label.clone().unwrap_or_else(|| format!("{} scenario", req.target));
    let s = run_scenario(&state, req).await?;
    let saved = s
        .entry
        .store
        .lock()
        .expect("lock")
        .save(&label, &s.intervention, s.result)?;
    Ok(created(saved))
}

async fn get_strategy(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(p): Params,
) -> ApiResult<impl IntoResponse> {
    let e = entry(&state, p.get("dataset").map(String::as_str))?;
    let store = e.store.lock().expect("lock");
    Ok(ok(store.get(&id)?.clone()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UpdateRequest {
    dataset: Option<String>,
    attribute: Option<String>,
    variant: Option<Variant>,
    label: Option<String>,
    target: Option<String>,
    deltas: Option<BTreeMap<String, f64>>,
    expert: Option<bool>,
    k_bridge: Option<usize>,
}

async fn update_strategy(
    State(state): State<Shared>,
    Path(id): Path<String>,
    raw: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: UpdateRequest = body(&raw)?;
    let e = entry(&state, req.dataset.as_deref())?;
    let old = e.store.lock().expect("lock").get(&id)?.clone();
    let rerun = req.target.is_some() || req.deltas.is_some() || req.expert.is_some();
    let change = if rerun {
        let s = run_scenario(
            &state,
            ScenarioRequest {
                dataset: Some(e.id.clone()),
                attribute: req.attribute,
                variant: req.variant,
                target: req.target.unwrap_or(old.target),
                deltas: req.deltas.unwrap_or(old.deltas),
                expert: req.expert.unwrap_or(old.expert),
                k_bridge: req.k_bridge,
                label: None,
            },
        )
        .await?;
        Some((s.intervention, s.result))
    } else {
        None
    };
    let mut store = e.store.lock().expect("lock");
    let updated = store.update(
        &id,
        req.label.as_deref(),
        change.as_ref().map(|(iv, r)| (iv, r.clone())),
    )?;
    Ok(ok(updated))
}

async fn delete_strategy(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(p): Params,
) -> ApiResult<impl IntoResponse> {
    let e = entry(&state, p.get("dataset").map(String::as_str))?;
    let removed = e.store.lock().expect("lock").delete(&id)?;
    Ok(ok(json!({"deleted": removed.id})))
}
