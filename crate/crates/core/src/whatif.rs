//! POI interventions on a target CBG: flow deltas per group, the resulting
//! segregation change, and a file-backed store of named strategies.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{aggregate_shap, shapley_values, GroupAttributions, ShapConfig, ShapMode, ShapSummary};
use crate::model::features::FeatureSchema;
use crate::model::train::FlowModel;
use crate::model::{allocate, GroupModelSet, Prepared};
use crate::segregation::{nearest_neighbors, segregation_index, DEFAULT_K_BRIDGE};

pub const DEFAULT_SHAP_SAMPLES: usize = 8;
/// Background rows per permutation in the attribution refresh.
pub const SHAP_BACKGROUND_ROWS: usize = 1;

/// New absolute values for a target CBG's features. Keys are POI type
/// names; with `expert` set, full `dest_*` slot names are accepted too.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub target: String,
    #[serde(default)]
    pub deltas: BTreeMap<String, f64>,
    #[serde(default)]
    pub expert: bool,
}

impl Intervention {
    pub fn new(target: impl Into<String>) -> Self {
        Self {
            target: target.into(),
            ..Default::default()
        }
    }

    pub fn set(mut self, key: impl Into<String>, value: f64) -> Self {
        self.deltas.insert(key.into(), value);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfConfig {
    pub k_bridge: usize,
    pub seed: u64,
    /// Permutations per instance for the attribution refresh; 0 skips it.
    pub shap_samples: usize,
}

impl Default for WhatIfConfig {
    fn default() -> Self {
        Self {
            k_bridge: DEFAULT_K_BRIDGE,
            seed: 0,
            shap_samples: DEFAULT_SHAP_SAMPLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginDelta {
    pub origin: String,
    pub neighbour: bool,
    /// Observed flow over the origin's candidate set.
    pub total: f64,
    /// Predicted flow to the target per group, before and after.
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub delta: Vec<f64>,
    /// Σ over the origin's candidate set of Δŵ, per group.
    pub delta_sum: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub pi_before: Vec<f64>,
    pub pi_after: Vec<f64>,
    pub si_before: f64,
    pub si_after: f64,
    pub delta_si: f64,
    /// `None` when the baseline index is zero.
    pub delta_si_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub target: String,
    pub attribute: String,
    pub groups: Vec<String>,
    pub variant: String,
    pub deltas: BTreeMap<String, f64>,
    pub origins: Vec<OriginDelta>,
    /// Visitor volume per group from actual flows, then with Δŵ added
    /// (each origin's contribution floored at zero).
    pub inflow_before: Vec<f64>,
    pub inflow_after: Vec<f64>,
    pub summary: ScenarioSummary,
    pub max_abs_delta_sum: f64,
    pub shap: Option<ShapSummary>,
}

/// A feature slot of target rows and its replacement value.
#[derive(Clone, Copy, Debug, PartialEq)]
struct SlotEdit {
    slot: usize,
    value: f64,
}

fn resolve_edits(schema: &FeatureSchema, iv: &Intervention) -> Result<Vec<SlotEdit>> {
    let mut out = Vec::with_capacity(iv.deltas.len());
    for (key, &value) in &iv.deltas {
        let slot = if let Some(t) = schema.poi_types.iter().position(|p| p == key) {
            schema.dest_poi_slot(t)
        } else if let Some(s) = schema.slot(key) {
            if !iv.expert || !key.starts_with("dest_") {
                return Err(Error::LockedSlot(key.clone()));
            }
            s
        } else {
            return Err(Error::UnknownPoiType(key.clone()));
        };
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::NegativeDensity(key.clone()));
        }
        out.push(SlotEdit { slot, value });
    }
    Ok(out)
}

fn edit_row(row: &mut [f64], edits: &[SlotEdit]) {
    for e in edits {
        row[e.slot] = e.value;
    }
}

/// Origins whose flows to `target` are re-predicted: the `k` nearest
/// neighbours plus every origin with observed flow to it, neighbours first.
pub fn context_origins(prep: &Prepared, target: usize, k: usize) -> Result<(Vec<usize>, usize)> {
    let mut origins = nearest_neighbors(prep.dataset, &prep.theta, target, k)?;
    let n_neighbours = origins.len();
    let mut inflow: Vec<usize> = prep
        .dataset
        .flows()
        .in_edges(target)
        .filter(|e| e.origin != target && e.weight > 0.0 && prep.theta.is_defined(e.origin))
        .map(|e| e.origin)
        .filter(|o| !origins.contains(o))
        .collect();
    inflow.sort_unstable();
    inflow.dedup();
    origins.extend(inflow);
    Ok((origins, n_neighbours))
}

struct Context {
    origin: usize,
    dests: Vec<usize>,
    target_pos: usize,
    total: f64,
}

/// The intervention-independent half of a scenario: context origins, their
/// candidate sets and baseline scores. Build once per target and reuse it
/// across interventions on the same model.
pub struct ScenarioBase {
    target: usize,
    target_id: String,
    k_bridge: usize,
    seed: u64,
    variant: String,
    ctx: Vec<Context>,
    n_neighbours: usize,
    origins: Vec<usize>,
    /// Pre-softmax scores per net, context origin and candidate.
    before: Vec<Vec<Vec<f64>>>,
    /// Feature rows (origin → target), deep models only.
    target_rows: Vec<Vec<f64>>,
}

impl ScenarioBase {
    pub fn target(&self) -> &str {
        &self.target_id
    }

    pub fn origin_count(&self) -> usize {
        self.ctx.len()
    }

    /// Whether this base was built for `target` under `cfg`.
    pub fn matches(&self, target: &str, cfg: &WhatIfConfig) -> bool {
        self.target_id == target && self.k_bridge == cfg.k_bridge && self.seed == cfg.seed
    }
}

fn check_model(model: &GroupModelSet, prep: &Prepared) -> Result<()> {
    if model.attribute != prep.theta.attribute || model.k_dest != prep.k_dest {
        return Err(Error::SchemaMismatch {
            expected: format!("model for `{}` with k_dest {}", prep.theta.attribute, prep.k_dest),
            found: format!("`{}` with k_dest {}", model.attribute, model.k_dest),
        });
    }
    Ok(())
}

pub fn scenario_base(model: &GroupModelSet, prep: &Prepared, target_id: &str, cfg: &WhatIfConfig) -> Result<ScenarioBase> {
    let d = prep.dataset;
    let target = d.require_index(target_id)?;
    check_model(model, prep)?;
    if !prep.is_admissible(target) {
        return Err(Error::InsufficientData(format!("`{target_id}` is not an admissible destination")));
    }
    let (origins, n_neighbours) = context_origins(prep, target, cfg.k_bridge)?;
    let ctx = origins
        .iter()
        .map(|&o| {
            let dests = prep.candidates(o, cfg.seed, Some(target))?;
            let target_pos = dests.binary_search(&target).expect("target is a candidate");
            let total = prep.actual(o, &dests).iter().sum();
            Ok(Context {
                origin: o,
                dests,
                target_pos,
                total,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut before = Vec::with_capacity(model.n_nets());
    let mut target_rows = Vec::new();
    match &model.model {
        FlowModel::Gravity(gm) => {
            let per: Vec<Vec<f64>> = ctx
                .iter()
                .map(|c| {
                    let po = d.cbg(c.origin).population as f64;
                    c.dests
                        .iter()
                        .map(|&j| gm.score(po, d.cbg(j).population as f64, d.distance_km(c.origin, j)))
                        .collect()
                })
                .collect();
            before.push(per);
        }
        FlowModel::Deep { schema, .. } => {
            let b = crate::model::features::FeatureBuilder::new(d, schema, Some(&prep.visitors));
            let mut others = Vec::new();
            target_rows.reserve(ctx.len());
            for c in &ctx {
                for (k, &j) in c.dests.iter().enumerate() {
                    let row = b.row(c.origin, j)?;
                    if k == c.target_pos {
                        target_rows.push(row);
                    } else {
                        others.push(row);
                    }
                }
            }
            for g in 0..model.n_nets() {
                let s = model.scorer(g).expect("deep model");
                let mut rest = s.score_rows(&others).into_iter();
                // target rows go in their own batch, the same shape as the edited batch later
                let tb = s.score_rows(&target_rows);
                let per = ctx
                    .iter()
                    .enumerate()
                    .map(|(ci, c)| {
                        (0..c.dests.len())
                            .map(|k| if k == c.target_pos { tb[ci] } else { rest.next().expect("row count") })
                            .collect()
                    })
                    .collect();
                before.push(per);
            }
        }
    }
    Ok(ScenarioBase {
        target,
        target_id: target_id.to_string(),
        k_bridge: cfg.k_bridge,
        seed: cfg.seed,
        variant: model.variant.label().to_string(),
        ctx,
        n_neighbours,
        origins,
        before,
        target_rows,
    })
}

/// Target scores per net and context origin after the edits.
fn edited_target_scores(model: &GroupModelSet, prep: &Prepared, base: &ScenarioBase, edits: &[SlotEdit]) -> Vec<Vec<f64>> {
    let d = prep.dataset;
    match &model.model {
        FlowModel::Gravity(gm) => {
            let pop = edits.iter().find(|e| e.slot == 1).map(|e| e.value);
            let per = base
                .ctx
                .iter()
                .enumerate()
                .map(|(ci, c)| match pop {
                    Some(p) => gm.score(
                        d.cbg(c.origin).population as f64,
                        p,
                        d.distance_km(c.origin, base.target),
                    ),
                    None => base.before[0][ci][c.target_pos],
                })
                .collect();
            vec![per]
        }
        FlowModel::Deep { .. } => {
            let mut edited = base.target_rows.clone();
            for r in &mut edited {
                edit_row(r, edits);
            }
            (0..model.n_nets())
                .map(|g| model.scorer(g).expect("deep model").score_rows(&edited))
                .collect()
        }
    }
}

/// Per-group flows over one candidate set from per-net scores.
fn group_flows(model: &GroupModelSet, scores: &[Vec<Vec<f64>>], ci: usize, theta: &[f64], total: f64) -> Vec<Vec<f64>> {
    if model.variant.segmented() {
        theta
            .iter()
            .enumerate()
            .map(|(g, t)| allocate(&scores[g][ci], t * total))
            .collect()
    } else {
        let w = allocate(&scores[0][ci], total);
        theta.iter().map(|t| w.iter().map(|x| t * x).collect()).collect()
    }
}

/// Visitor volume per group at `target`: actual θ-weighted inflow plus
/// per-origin deltas, each origin's contribution floored at zero.
fn inflow_by_group(prep: &Prepared, target: usize, deltas: &BTreeMap<usize, Vec<f64>>) -> Vec<f64> {
    let n = prep.theta.n_groups;
    let mut acc = vec![0.0; n];
    let mut seen = Vec::new();
    for e in prep.dataset.flows().in_edges(target) {
        let Some(row) = prep.theta.row(e.origin) else { continue };
        let delta = deltas.get(&e.origin);
        for g in 0..n {
            acc[g] += (row[g] * e.weight + delta.map_or(0.0, |d| d[g])).max(0.0);
        }
        seen.push(e.origin);
    }
    for (o, d) in deltas {
        if !seen.contains(o) {
            for g in 0..n {
                acc[g] += d[g].max(0.0);
            }
        }
    }
    acc
}

fn si_of(inflow: &[f64], target_id: &str) -> Result<(Vec<f64>, f64)> {
    let total: f64 = inflow.iter().sum();
    if total <= 0.0 {
        return Err(Error::NoInflow(target_id.to_string()));
    }
    let pi: Vec<f64> = inflow.iter().map(|v| v / total).collect();
    let si = segregation_index(&pi, pi.len())?;
    Ok((pi, si))
}

/// Re-predicts flows from the target's context origins with the edited
/// features and recomputes its segregation index.
pub fn apply_intervention(
    model: &GroupModelSet,
    prep: &Prepared,
    iv: &Intervention,
    cfg: &WhatIfConfig,
) -> Result<ScenarioResult> {
    check_model(model, prep)?;
    resolve_edits(&edit_schema(model, prep), iv)?;
    let base = scenario_base(model, prep, &iv.target, cfg)?;
    apply_with_base(model, prep, &base, iv, cfg)
}

fn edit_schema(model: &GroupModelSet, prep: &Prepared) -> FeatureSchema {
    model
        .schema()
        .cloned()
        .unwrap_or_else(|| FeatureSchema::for_dataset(prep.dataset, true))
}

/// [`apply_intervention`] over a base built by [`scenario_base`] for the
/// same model, target and config.
pub fn apply_with_base(
    model: &GroupModelSet,
    prep: &Prepared,
    base: &ScenarioBase,
    iv: &Intervention,
    cfg: &WhatIfConfig,
) -> Result<ScenarioResult> {
    check_model(model, prep)?;
    if !base.matches(&iv.target, cfg) || base.variant != model.variant.label() {
        return Err(Error::SchemaMismatch {
            expected: format!("scenario base for `{}` ({})", iv.target, model.variant),
            found: format!("`{}` ({})", base.target_id, base.variant),
        });
    }
    let d = prep.dataset;
    let target = base.target;
    let edits = resolve_edits(&edit_schema(model, prep), iv)?;
    let ctx = &base.ctx;
    let n_neighbours = base.n_neighbours;
    let origins = &base.origins;
    let sb = &base.before;
    let ta = edited_target_scores(model, prep, base, &edits);
    let sa: Vec<Vec<Vec<f64>>> = sb
        .iter()
        .zip(&ta)
        .map(|(per, t)| {
            per.iter()
                .zip(ctx)
                .zip(t)
                .map(|((row, c), &v)| {
                    let mut r = row.clone();
                    r[c.target_pos] = v;
                    r
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(ctx.len());
    let mut delta_map = BTreeMap::new();
    let mut max_abs_delta_sum: f64 = 0.0;
    for (ci, c) in ctx.iter().enumerate() {
        let theta = prep.theta.row(c.origin).expect("context origins have demographics");
        let fb = group_flows(model, sb, ci, theta, c.total);
        let fa = group_flows(model, &sa, ci, theta, c.total);
        let before: Vec<f64> = fb.iter().map(|g| g[c.target_pos]).collect();
        let after: Vec<f64> = fa.iter().map(|g| g[c.target_pos]).collect();
        let delta: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
        let delta_sum: Vec<f64> = fa
            .iter()
            .zip(&fb)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).sum())
            .collect();
        max_abs_delta_sum = delta_sum.iter().fold(max_abs_delta_sum, |m, v| m.max(v.abs()));
        delta_map.insert(c.origin, delta.clone());
        out.push(OriginDelta {
            origin: d.cbg(c.origin).id.clone(),
            neighbour: ci < n_neighbours,
            total: c.total,
            before,
            after,
            delta,
            delta_sum,
        });
    }
    let zero: BTreeMap<usize, Vec<f64>> = delta_map
        .keys()
        .map(|&o| (o, vec![0.0; prep.theta.n_groups]))
        .collect();
    let inflow_before = inflow_by_group(prep, target, &zero);
    let inflow_after = inflow_by_group(prep, target, &delta_map);
    let (pi_before, si_before) = si_of(&inflow_before, &iv.target)?;
    let (pi_after, si_after) = si_of(&inflow_after, &iv.target)?;
    let delta_si = si_after - si_before;
    let shap = if cfg.shap_samples > 0 && model.schema().is_some() {
        Some(feature_impact_with(model, prep, target, &origins[..n_neighbours], &edits, cfg)?)
    } else {
        None
    };
    Ok(ScenarioResult {
        target: iv.target.clone(),
        attribute: model.attribute.clone(),
        groups: model.groups.clone(),
        variant: model.variant.label().to_string(),
        deltas: iv.deltas.clone(),
        origins: out,
        inflow_before,
        inflow_after,
        summary: ScenarioSummary {
            pi_before,
            pi_after,
            si_before,
            si_after,
            delta_si,
            delta_si_percent: (si_before > 0.0).then(|| 100.0 * delta_si / si_before),
        },
        max_abs_delta_sum,
        shap,
    })
}

/// Attributions of each group's score for the pairs (neighbour → target).
pub fn feature_impact(model: &GroupModelSet, prep: &Prepared, target: usize, cfg: &WhatIfConfig) -> Result<ShapSummary> {
    let neighbours = nearest_neighbors(prep.dataset, &prep.theta, target, cfg.k_bridge)?;
    feature_impact_with(model, prep, target, &neighbours, &[], cfg)
}

fn feature_impact_with(
    model: &GroupModelSet,
    prep: &Prepared,
    target: usize,
    neighbours: &[usize],
    edits: &[SlotEdit],
    cfg: &WhatIfConfig,
) -> Result<ShapSummary> {
    let (Some(schema), Some(background)) = (model.schema(), model.background()) else {
        return Err(Error::UntrainedModel);
    };
    let b = crate::model::features::FeatureBuilder::new(prep.dataset, schema, Some(&prep.visitors));
    let shap_cfg = ShapConfig {
        samples: cfg.shap_samples.max(2),
        seed: cfg.seed,
        mode: ShapMode::Auto,
        background_rows: SHAP_BACKGROUND_ROWS,
    };
    let mut groups = Vec::with_capacity(model.groups.len());
    for (g, name) in model.groups.iter().enumerate() {
        let scorer = model.scorer(g).expect("deep model");
        let per_origin = neighbours
            .iter()
            .map(|&o| {
                let mut row = b.row(o, target)?;
                edit_row(&mut row, edits);
                let cfg = ShapConfig {
                    seed: shap_cfg.seed ^ (o as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                    ..shap_cfg
                };
                Ok((prep.dataset.cbg(o).id.clone(), shapley_values(&scorer, &row, background, &cfg)?))
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(GroupAttributions {
            group: name.clone(),
            per_origin,
        });
    }
    aggregate_shap(&schema.names, &groups)
}

/// A saved intervention with its frozen result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub id: String,
    pub label: String,
    pub target: String,
    pub deltas: BTreeMap<String, f64>,
    #[serde(default)]
    pub expert: bool,
    pub result_summary: ScenarioSummary,
    pub result: ScenarioResult,
    pub created_ms: u64,
    pub updated_ms: u64,
}

impl Strategy {
    pub fn intervention(&self) -> Intervention {
        Intervention {
            target: self.target.clone(),
            deltas: self.deltas.clone(),
            expert: self.expert,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoreFile {
    dataset: String,
    strategies: Vec<Strategy>,
    #[serde(default)]
    last_id: u64,
}

/// Strategies of one dataset in a single JSON document, rewritten
/// atomically on every change. Callers serialise writers.
#[derive(Debug)]
pub struct StrategyStore {
    path: PathBuf,
    file: StoreFile,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl StrategyStore {
    pub const FILE_NAME: &'static str = "strategies.json";

    /// Opens `dir/strategies.json`, starting empty if it does not exist.
    pub fn open(dir: &Path, dataset: &str) -> Result<Self> {
        let path = dir.join(Self::FILE_NAME);
        let fail = |reason: String| Error::StorageFailure {
            path: path.clone(),
            reason,
        };
        let file = match fs::read_to_string(&path) {
            Ok(s) => {
                let f: StoreFile = serde_json::from_str(&s).map_err(|e| fail(e.to_string()))?;
                if f.dataset != dataset {
                    return Err(fail(format!("store belongs to dataset `{}`", f.dataset)));
                }
                f
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => StoreFile {
                dataset: dataset.to_string(),
                strategies: Vec::new(),
                last_id: 0,
            },
            Err(e) => return Err(fail(e.to_string())),
        };
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn list(&self) -> &[Strategy] {
        &self.file.strategies
    }

    pub fn get(&self, id: &str) -> Result<&Strategy> {
        self.file
            .strategies
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownStrategy(id.to_string()))
    }

    /// Ids are never reused, even after deletion.
    fn next_id(&self) -> u64 {
        let max = self
            .file
            .strategies
            .iter()
            .filter_map(|s| s.id.strip_prefix('s')?.parse::<u64>().ok())
            .max()
            .unwrap_or(0);
        max.max(self.file.last_id) + 1
    }

    pub fn save(&mut self, label: &str, iv: &Intervention, result: ScenarioResult) -> Result<Strategy> {
        let t = now_ms();
        let n = self.next_id();
        let s = Strategy {
            id: format!("s{n}"),
            label: label.to_string(),
            target: iv.target.clone(),
            deltas: iv.deltas.clone(),
            expert: iv.expert,
            result_summary: result.summary.clone(),
            result,
            created_ms: t,
            updated_ms: t,
        };
        let last = self.file.last_id;
        self.file.strategies.push(s.clone());
        self.file.last_id = n;
        if let Err(e) = self.persist() {
            self.file.strategies.pop();
            self.file.last_id = last;
            return Err(e);
        }
        Ok(s)
    }

    /// Relabels a strategy and, when given, replaces its intervention and
    /// frozen result.
    pub fn update(
        &mut self,
        id: &str,
        label: Option<&str>,
        change: Option<(&Intervention, ScenarioResult)>,
    ) -> Result<Strategy> {
        let k = self
            .file
            .strategies
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::UnknownStrategy(id.to_string()))?;
        let old = self.file.strategies[k].clone();
        let s = &mut self.file.strategies[k];
        if let Some(l) = label {
            s.label = l.to_string();
        }
        if let Some((iv, result)) = change {
            s.target = iv.target.clone();
            s.deltas = iv.deltas.clone();
            s.expert = iv.expert;
            s.result_summary = result.summary.clone();
            s.result = result;
        }
        s.updated_ms = now_ms().max(s.created_ms);
        let s = s.clone();
        if let Err(e) = self.persist() {
            self.file.strategies[k] = old;
            return Err(e);
        }
        Ok(s)
    }

    pub fn delete(&mut self, id: &str) -> Result<Strategy> {
        let k = self
            .file
            .strategies
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::UnknownStrategy(id.to_string()))?;
        let s = self.file.strategies.remove(k);
        if let Err(e) = self.persist() {
            self.file.strategies.insert(k, s);
            return Err(e);
        }
        Ok(s)
    }

    fn persist(&self) -> Result<()> {
        let fail = |reason: String| Error::StorageFailure {
            path: self.path.clone(),
            reason,
        };
        let json = serde_json::to_vec_pretty(&self.file).map_err(|e| fail(e.to_string()))?;
        let dir = self.path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| fail(e.to_string()))?;
        let tmp = self.path.with_extension("json.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| fail(e.to_string()))?;
        f.write_all(&json).and_then(|_| f.sync_all()).map_err(|e| fail(e.to_string()))?;
        fs::rename(&tmp, &self.path).map_err(|e| fail(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::tiny;
    use crate::data::CityDataset;
    use crate::explain::BackgroundSet;
    use crate::model::features::Scaler;
    use crate::model::gravity::GravityModel;
    use crate::model::mlp::{softmax, Dense, Mlp};
    use crate::model::train::CHECKPOINT_VERSION;
    use crate::model::Variant;
    use ndarray::{Array1, Array2};

    const IDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

    fn city() -> CityDataset {
        let cbgs: Vec<(&str, [u64; 2], (f64, f64))> = IDS
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, [10 + 30 * (i as u64 % 3), 50 - 7 * i as u64], (0.01 * i as f64, 0.003 * (i * i) as f64)))
            .collect();
        let mut flows = Vec::new();
        for (i, o) in IDS.iter().enumerate() {
            for (j, d) in IDS.iter().enumerate() {
                if i != j {
                    flows.push((*o, *d, 1.0 + ((i * 7 + j * 3) % 5) as f64));
                }
            }
        }
        let mut d = tiny(&cbgs, &flows);
        for (i, v) in [1.0, 3.0, 2.0, 0.5, 4.0, 1.5].into_iter().enumerate() {
            d = d.with_poi_density(i, vec![v]).unwrap();
        }
        d
    }

    /// Segmented linear scorer: group `lo` scores `w · dest food density`,
    /// group `hi` is flat.
    fn linear_model(d: &CityDataset, w: f32) -> GroupModelSet {
        let schema = FeatureSchema::for_dataset(d, false);
        let m = schema.len();
        let scaler = Scaler {
            log1p: vec![false; m],
            mean: vec![0.0; m],
            std: vec![1.0; m],
        };
        let mut w0 = Array2::zeros((m, 1));
        w0[[schema.dest_poi_slot(0), 0]] = w;
        let net = |w: Array2<f32>| Mlp {
            layers: vec![Dense { w, b: Array1::zeros(1) }],
            slope: 0.02,
        };
        GroupModelSet {
            version: CHECKPOINT_VERSION,
            variant: Variant::DgS,
            attribute: "income".into(),
            groups: vec!["lo".into(), "hi".into()],
            k_dest: 3,
            seed: 0,
            model: FlowModel::Deep {
                scaler,
                nets: vec![net(w0), net(Array2::zeros((m, 1)))],
                background: BackgroundSet {
                    centroids: vec![vec![0.0; m]],
                },
                schema,
            },
            loss_history: Vec::new(),
        }
    }

    fn cfg() -> WhatIfConfig {
        WhatIfConfig {
            k_bridge: 2,
            seed: 4,
            shap_samples: 8,
        }
    }

    #[test]
    fn empty_intervention_is_identity() {
        let d = city();
        let prep = Prepared::new(&d, "income", 3).unwrap();
        let m = linear_model(&d, 0.5);
        let r = apply_intervention(&m, &prep, &Intervention::new("c"), &cfg()).unwrap();
        assert!(r.origins.iter().all(|o| o.delta.iter().all(|v| *v == 0.0) && o.before == o.after));
        assert_eq!(r.summary.delta_si, 0.0);
        assert_eq!(r.inflow_before, r.inflow_after);
        let target = d.index_of("c").unwrap();
        assert_eq!(r.shap.unwrap(), feature_impact(&m, &prep, target, &cfg()).unwrap());
    }

    #[test]
    fn linear_surrogate_matches_softmax_difference() {
        let d = city();
        let prep = Prepared::new(&d, "income", 3).unwrap();
        let m = linear_model(&d, 0.5);
        let iv = Intervention::new("c").set("food", 6.0);
        let r = apply_intervention(&m, &prep, &iv, &cfg()).unwrap();
        let t = d.index_of("c").unwrap();
        assert_eq!(r.origins.len(), 5);
        for od in &r.origins {
            let o = d.index_of(&od.origin).unwrap();
            let dests = prep.candidates(o, 4, Some(t)).unwrap();
            let total: f64 = prep.actual(o, &dests).iter().sum();
            let k = dests.iter().position(|&j| j == t).unwrap();
            let before: Vec<f64> = dests.iter().map(|&j| 0.5 * d.cbg(j).poi_density[0]).collect();
            let mut after = before.clone();
            after[k] = 3.0;
            let theta = prep.theta.row(o).unwrap();
            let expect = theta[0] * total * (softmax(&after)[k] - softmax(&before)[k]);
            assert!((od.delta[0] - expect).abs() < 1e-9, "{} vs {expect}", od.delta[0]);
            assert_eq!(od.delta[1], 0.0);
            assert!(od.delta_sum.iter().all(|v| v.abs() < 1e-9));
        }
        assert!(r.summary.pi_after[0] > r.summary.pi_before[0]);
        assert!((0.0..=1.0).contains(&r.summary.si_after));
    }

    #[test]
    fn slot_validation() {
        let d = city();
        let prep = Prepared::new(&d, "income", 3).unwrap();
        let m = linear_model(&d, 0.5);
        let run = |iv: Intervention| apply_intervention(&m, &prep, &iv, &cfg());
        assert!(matches!(run(Intervention::new("c").set("gym", 1.0)), Err(Error::UnknownPoiType(_))));
        assert!(matches!(run(Intervention::new("c").set("food", -1.0)), Err(Error::NegativeDensity(_))));
        assert!(matches!(run(Intervention::new("c").set("dest_population", 9.0)), Err(Error::LockedSlot(_))));
        let mut iv = Intervention::new("c").set("origin_population", 9.0);
        iv.expert = true;
        assert!(matches!(run(iv), Err(Error::LockedSlot(_))));
        let mut iv = Intervention::new("c").set("dest_population", 9.0);
        iv.expert = true;
        assert!(run(iv).is_ok());
        assert!(matches!(run(Intervention::new("zz")), Err(Error::UnknownCbg(_))));
    }

    #[test]
    fn gravity_ignores_poi_edits() {
        let d = city();
        let prep = Prepared::new(&d, "income", 3).unwrap();
        let mut m = linear_model(&d, 0.5);
        m.variant = Variant::G;
        m.model = FlowModel::Gravity(GravityModel {
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
            intercept: 0.0,
        });
        let r = apply_intervention(&m, &prep, &Intervention::new("c").set("food", 9.0), &cfg()).unwrap();
        assert!(r.origins.iter().all(|o| o.delta.iter().all(|v| *v == 0.0)));
        assert!(r.shap.is_none());
    }

    fn result() -> ScenarioResult {
        let d = city();
        let prep = Prepared::new(&d, "income", 3).unwrap();
        let m = linear_model(&d, 0.5);
        apply_intervention(&m, &prep, &Intervention::new("c").set("food", 6.0), &cfg()).unwrap()
    }

    #[test]
    fn reused_base_gives_the_same_result() {
        let d = city();
        let prep = Prepared::new(&d, "income", 3).unwrap();
        let m = linear_model(&d, 0.5);
        let base = scenario_base(&m, &prep, "c", &cfg()).unwrap();
        for v in [0.0, 6.0, 11.0] {
            let iv = Intervention::new("c").set("food", v);
            let once = apply_intervention(&m, &prep, &iv, &cfg()).unwrap();
            assert_eq!(apply_with_base(&m, &prep, &base, &iv, &cfg()).unwrap(), once);
        }
        let other = WhatIfConfig { k_bridge: 3, ..cfg() };
        assert!(apply_with_base(&m, &prep, &base, &Intervention::new("c"), &other).is_err());
        assert!(apply_with_base(&m, &prep, &base, &Intervention::new("b"), &cfg()).is_err());
    }

    #[test]
    fn store_round_trip_and_durability() {
        let dir = tempfile::tempdir().unwrap();
        let iv = Intervention::new("c").set("food", 6.0);
        let r = result();
        let mut st = StrategyStore::open(dir.path(), "city").unwrap();
        let a = st.save("more food", &iv, r.clone()).unwrap();
        let b = st.save("second", &iv, r.clone()).unwrap();
        assert_eq!((a.id.as_str(), b.id.as_str()), ("s1", "s2"));
        st.delete("s2").unwrap();
        let c = st.save("third", &iv, r.clone()).unwrap();
        assert_eq!(c.id, "s3");
        st.update("s1", Some("renamed"), None).unwrap();
        drop(st);
        let st = StrategyStore::open(dir.path(), "city").unwrap();
        let ids: Vec<&str> = st.list().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["s1", "s3"]);
        assert_eq!(st.get("s1").unwrap().label, "renamed");
        assert_eq!(st.get("s1").unwrap().result, r);
        assert_eq!(st.get("s1").unwrap().intervention(), iv);
        let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(st.path()).unwrap()).unwrap();
        assert_eq!(raw["dataset"], "city");
        assert_eq!(raw["strategies"][1]["deltas"]["food"], 6.0);
        assert!(raw["strategies"][0]["result_summary"]["si_after"].is_number());
    }

    #[test]
    fn store_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = StrategyStore::open(dir.path(), "city").unwrap();
        assert!(matches!(st.delete("s9"), Err(Error::UnknownStrategy(_))));
        assert!(matches!(st.update("s9", Some("x"), None), Err(Error::UnknownStrategy(_))));
        st.save("x", &Intervention::new("c"), result()).unwrap();
        assert!(matches!(StrategyStore::open(dir.path(), "other"), Err(Error::StorageFailure { .. })));
        fs::write(dir.path().join(StrategyStore::FILE_NAME), "{not json").unwrap();
        assert!(matches!(StrategyStore::open(dir.path(), "city"), Err(Error::StorageFailure { .. })));
    }
}
