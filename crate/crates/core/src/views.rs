//! Community- and CBG-level summaries behind the coordinated views:
//! signature boxes, the community flow matrix and neighbourhood glyphs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::community::Partition;
use crate::data::{CityDataset, ProportionMatrix};
use crate::error::{Error, Result};
use crate::metrics::cpc;
use crate::model::{GroupModelSet, Prepared};
use crate::segregation::nearest_neighbors;
use crate::whatif::{apply_intervention, Intervention, WhatIfConfig};

/// Linear-interpolation sample quantile of ascending `sorted` (type 7).
pub fn quantile7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            q1: quantile7(&v, 0.25),
            median: quantile7(&v, 0.5),
            q3: quantile7(&v, 0.75),
        })
    }
}

/// Per-group quartiles of θ over a community's members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub community: usize,
    pub label: String,
    pub size: usize,
    /// Members with defined proportions.
    pub defined: usize,
    /// `None` when no member has defined proportions.
    pub groups: Option<Vec<Quartiles>>,
}

fn slot_label(p: &Partition, c: usize) -> String {
    if c == p.others_id() {
        "others".into()
    } else {
        c.to_string()
    }
}

/// Row slots of community views: ranked communities, then `others` when it
/// has members.
fn slots(p: &Partition) -> Vec<usize> {
    let mut s: Vec<usize> = (0..p.communities.len()).collect();
    if !p.others.is_empty() {
        s.push(p.others_id());
    }
    s
}

pub fn community_signatures(partition: &Partition, theta: &ProportionMatrix) -> Vec<Signature> {
    slots(partition)
        .into_iter()
        .map(|c| {
            let members = partition.member_indices(c);
            let rows: Vec<&[f64]> = members.iter().filter_map(|&i| theta.row(i)).collect();
            let groups = (!rows.is_empty()).then(|| {
                (0..theta.n_groups)
                    .map(|d| Quartiles::of(&rows.iter().map(|r| r[d]).collect::<Vec<_>>()).expect("non-empty"))
                    .collect()
            });
            Signature {
                community: c,
                label: slot_label(partition, c),
                size: members.len(),
                defined: rows.len(),
                groups,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Median,
    Sum,
    Std,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Median => "median",
            Aggregation::Sum => "sum",
            Aggregation::Std => "std",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "median" => Ok(Aggregation::Median),
            "sum" => Ok(Aggregation::Sum),
            "std" => Ok(Aggregation::Std),
            _ => Err(Error::InvalidConfig(format!("unknown aggregation `{s}`"))),
        }
    }
}

impl Aggregation {
    /// Aggregate of edge weights; 0 for an empty set. `std` is the
    /// population standard deviation.
    pub fn apply(self, values: &[f64]) -> f64 {
        if values.is_empty() {
            return 0.0;
        }
        let n = values.len() as f64;
        let sum: f64 = values.iter().sum();
        match self {
            Aggregation::Sum => sum,
            Aggregation::Mean => sum / n,
            Aggregation::Median => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                quantile7(&v, 0.5)
            }
            Aggregation::Std => {
                let m = sum / n;
                (values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowCell {
    pub value: f64,
    /// `log1p(value) / log1p(max value in the matrix)`.
    pub shade: f64,
    /// Inflow-weighted group mix of the cell's edges; `None` without any
    /// edge from an origin with defined proportions.
    pub group_shares: Option<Vec<f64>>,
    pub edges: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMatrix {
    pub aggregation: Aggregation,
    /// Row/column labels; the last one is `total`.
    pub labels: Vec<String>,
    pub cells: Vec<Vec<FlowCell>>,
}

/// Community-to-community flows with a final total row and column.
pub fn flow_matrix(
    dataset: &CityDataset,
    theta: &ProportionMatrix,
    partition: &Partition,
    aggregation: Aggregation,
) -> FlowMatrix {
    let s = slots(partition);
    let n = s.len();
    let pos = |c: usize| s.iter().position(|&x| x == c).expect("slot");
    let mut buckets: Vec<Vec<Vec<(usize, f64)>>> = vec![vec![Vec::new(); n + 1]; n + 1];
    for e in dataset.flows().edges() {
        let a = pos(partition.community_of(e.origin));
        let b = pos(partition.community_of(e.dest));
        for (r, c) in [(a, b), (a, n), (n, b), (n, n)] {
            buckets[r][c].push((e.origin, e.weight));
        }
    }
    let mut cells: Vec<Vec<FlowCell>> = buckets
        .iter()
        .map(|row| {
            row.iter()
                .map(|edges| {
                    let weights: Vec<f64> = edges.iter().map(|(_, w)| *w).collect();
                    let mut acc = vec![0.0; theta.n_groups];
                    let mut total = 0.0;
                    for &(o, w) in edges {
                        if let Some(t) = theta.row(o) {
                            for (a, p) in acc.iter_mut().zip(t) {
                                *a += p * w;
                            }
                            total += w;
                        }
                    }
                    FlowCell {
                        value: aggregation.apply(&weights),
                        shade: 0.0,
                        group_shares: (total > 0.0).then(|| acc.iter().map(|a| a / total).collect()),
                        edges: edges.len(),
                    }
                })
                .collect()
        })
        .collect();
    let max = cells.iter().flatten().map(|c| c.value).fold(0.0, f64::max);
    if max > 0.0 {
        for c in cells.iter_mut().flatten() {
            c.shade = c.value.max(0.0).ln_1p() / max.ln_1p();
        }
    }
    let mut labels: Vec<String> = s.iter().map(|&c| slot_label(partition, c)).collect();
    labels.push("total".into());
    FlowMatrix {
        aggregation,
        labels,
        cells,
    }
}

/// One CBG of the neighbourhood glyph map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub id: String,
    pub is_target: bool,
    pub community: usize,
    pub population: u64,
    pub distance_km: f64,
    /// Resident group proportions (arcs summing to one).
    pub theta: Option<Vec<f64>>,
    /// Share of the CBG's observed outflow that goes to the target.
    pub visit_share: f64,
    /// Predicted share of each group's trips going to the target.
    pub predicted_group_share: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InflowView {
    pub target: String,
    pub k_bridge: usize,
    pub glyphs: Vec<Glyph>,
    /// CPC of predicted against observed flows into the target over its
    /// context origins, when a model is given.
    pub cpc: Option<f64>,
}

/// The target and its `k_bridge` nearest neighbours, optionally with model
/// predictions.
pub fn inflow_view(
    prep: &Prepared,
    partition: &Partition,
    target: usize,
    k_bridge: usize,
    model: Option<(&GroupModelSet, u64)>,
) -> Result<InflowView> {
    let d = prep.dataset;
    let neighbours = nearest_neighbors(d, &prep.theta, target, k_bridge)?;
    let glyph = |i: usize| {
        let out = d.flows().out_total(i);
        Glyph {
            id: d.cbg(i).id.clone(),
            is_target: i == target,
            community: partition.community_of(i),
            population: d.cbg(i).population,
            distance_km: if i == target { 0.0 } else { d.distance_km(target, i) },
            theta: prep.theta.row(i).map(<[f64]>::to_vec),
            visit_share: if out > 0.0 { d.flows().weight(i, target) / out } else { 0.0 },
            predicted_group_share: None,
        }
    };
    let mut glyphs: Vec<Glyph> = std::iter::once(target).chain(neighbours).map(glyph).collect();
    let mut score = None;
    if let Some((m, seed)) = model {
        let cfg = WhatIfConfig {
            k_bridge,
            seed,
            shap_samples: 0,
        };
        let r = apply_intervention(m, prep, &Intervention::new(d.cbg(target).id.clone()), &cfg)?;
        let pred: Vec<f64> = r.origins.iter().map(|o| o.before.iter().sum()).collect();
        let actual: Vec<f64> = r
            .origins
            .iter()
            .map(|o| d.flows().weight(d.require_index(&o.origin).expect("known origin"), target))
            .collect();
        score = cpc(&pred, &actual).ok();
        for g in glyphs.iter_mut().skip(1) {
            let Some(o) = r.origins.iter().find(|o| o.origin == g.id) else { continue };
            let Some(t) = &g.theta else { continue };
            g.predicted_group_share = Some(
                o.before
                    .iter()
                    .zip(t)
                    .map(|(b, th)| if th * o.total > 0.0 { b / (th * o.total) } else { 0.0 })
                    .collect(),
            );
        }
    }
    Ok(InflowView {
        target: d.cbg(target).id.clone(),
        k_bridge,
        glyphs,
        cpc: score,
    })
}
