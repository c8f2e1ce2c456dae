//! Visitor-mix segregation index, neighbourhood bridging index and
//! TOPSIS ranking of CBGs on both.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{CityDataset, ProportionMatrix};
use crate::error::{Error, Result};

pub const DEFAULT_K_BRIDGE: usize = 20;
const PROB_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitorMix {
    pub target: String,
    pub attribute: String,
    pub pi: Vec<f64>,
    pub total_inflow: f64,
}

/// Share of visitors to `target` from each social group: the inflow-weighted
/// mean of origin group proportions. Origins with undefined proportions are
/// left out of both sums.
pub fn visitor_mix(dataset: &CityDataset, theta: &ProportionMatrix, target: usize) -> Result<VisitorMix> {
    let n = theta.n_groups;
    let mut acc = vec![0.0; n];
    let mut total = 0.0;
    for e in dataset.flows().in_edges(target) {
        let Some(row) = theta.row(e.origin) else { continue };
        for (a, t) in acc.iter_mut().zip(row) {
            *a += t * e.weight;
        }
        total += e.weight;
    }
    if total <= 0.0 {
        return Err(Error::NoInflow(dataset.cbg(target).id.clone()));
    }
    Ok(VisitorMix {
        target: dataset.cbg(target).id.clone(),
        attribute: theta.attribute.clone(),
        pi: acc.into_iter().map(|a| a / total).collect(),
        total_inflow: total,
    })
}

fn check_distribution(pi: &[f64], n: usize) -> Result<()> {
    if n < 2 || pi.len() != n {
        return Err(Error::NotAProbabilityVector(format!(
            "length {} for {} groups",
            pi.len(),
            n
        )));
    }
    if let Some(p) = pi.iter().find(|p| !(**p >= -PROB_TOL) || !p.is_finite()) {
        return Err(Error::NotAProbabilityVector(format!("entry {p}")));
    }
    let s: f64 = pi.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(Error::NotAProbabilityVector(format!("sums to {s}")));
    }
    Ok(())
}

/// `n/(2n−2) · Σ_d |π_d − 1/n|`, in `[0, 1]`.
pub fn segregation_index(pi: &[f64], n: usize) -> Result<f64> {
    check_distribution(pi, n)?;
    let uniform = 1.0 / n as f64;
    let spread: f64 = pi.iter().map(|p| (p - uniform).abs()).sum();
    Ok((n as f64 / (2.0 * n as f64 - 2.0) * spread).clamp(0.0, 1.0))
}

/// The `k` CBGs nearest to `target` (excluding it) that have defined
/// proportions and positive population, ordered by distance then id.
pub fn nearest_neighbors(
    dataset: &CityDataset,
    theta: &ProportionMatrix,
    target: usize,
    k: usize,
) -> Result<Vec<usize>> {
    let mut cands: Vec<(f64, usize)> = (0..dataset.len())
        .filter(|&i| i != target && theta.is_defined(i) && dataset.cbg(i).population > 0)
        .map(|i| (dataset.distance_km(target, i), i))
        .collect();
    if cands.len() < k {
        return Err(Error::InsufficientNeighbors {
            needed: k,
            found: cands.len(),
        });
    }
    let by_distance = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0)
            .then_with(|| dataset.cbg(a.1).id.cmp(&dataset.cbg(b.1).id))
    };
    if k < cands.len() {
        cands.select_nth_unstable_by(k, by_distance);
        cands.truncate(k);
    }
    cands.sort_by(by_distance);
    Ok(cands.into_iter().map(|(_, i)| i).collect())
}

/// Population-weighted group mix of the `k` nearest neighbours and the
/// resulting bridging index `1 − n/(2n−2) · Σ_d |π'_d − 1/n|`.
pub fn bridging_index(
    dataset: &CityDataset,
    theta: &ProportionMatrix,
    target: usize,
    k_bridge: usize,
) -> Result<(f64, Vec<f64>)> {
    let neighbors = nearest_neighbors(dataset, theta, target, k_bridge)?;
    let n = theta.n_groups;
    let mut acc = vec![0.0; n];
    let mut pop = 0.0;
    for &i in &neighbors {
        let p = dataset.cbg(i).population as f64;
        let row = theta.row(i).expect("filtered to defined rows");
        for (a, t) in acc.iter_mut().zip(row) {
            *a += t * p;
        }
        pop += p;
    }
    if pop <= 0.0 {
        return Err(Error::InsufficientNeighbors {
            needed: k_bridge,
            found: 0,
        });
    }
    let pi_prime: Vec<f64> = acc.into_iter().map(|a| a / pop).collect();
    let bi = 1.0 - segregation_index(&pi_prime, n)?;
    Ok((bi.clamp(0.0, 1.0), pi_prime))
}

/// TOPSIS closeness for benefit-type criteria with vector normalisation,
/// the given weights and Euclidean distances. A criterion whose values are
/// all equal contributes nothing to either distance; if every criterion is
/// degenerate all closeness values are 0.5.
pub fn topsis_closeness(rows: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let k = weights.len();
    let mut weighted: Vec<Vec<f64>> = vec![vec![0.0; k]; rows.len()];
    let mut best = vec![0.0; k];
    let mut worst = vec![0.0; k];
    for c in 0..k {
        let col = rows.iter().map(|r| r[c]);
        let (lo, hi) = col
            .clone()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        if lo == hi {
            continue;
        }
        let norm = col.map(|x| x * x).sum::<f64>().sqrt();
        for (w, r) in weighted.iter_mut().zip(rows) {
            w[c] = weights[c] * r[c] / norm;
        }
        best[c] = weights[c] * hi / norm;
        worst[c] = weights[c] * lo / norm;
    }
    weighted
        .iter()
        .map(|v| {
            let d_plus = v.iter().zip(&best).map(|(x, b)| (x - b).powi(2)).sum::<f64>().sqrt();
            let d_minus = v.iter().zip(&worst).map(|(x, w)| (x - w).powi(2)).sum::<f64>().sqrt();
            if d_plus + d_minus == 0.0 {
                0.5
            } else {
                d_minus / (d_plus + d_minus)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub closeness: f64,
}

/// Ranks `(id, SI, BI)` candidates by TOPSIS closeness with equal weights,
/// descending; ties go to the smaller id.
pub fn topsis_rank<S: AsRef<str>>(candidates: &[(S, f64, f64)]) -> Vec<Ranked> {
    let rows: Vec<Vec<f64>> = candidates.iter().map(|(_, si, bi)| vec![*si, *bi]).collect();
    let closeness = topsis_closeness(&rows, &[0.5, 0.5]);
    let mut ranked: Vec<Ranked> = closeness
        .into_iter()
        .enumerate()
        .map(|(index, closeness)| Ranked { index, closeness })
        .collect();
    ranked.sort_by(|a, b| {
        b.closeness
            .partial_cmp(&a.closeness)
            .unwrap_or(Ordering::Equal)
            .then_with(|| candidates[a.index].0.as_ref().cmp(candidates[b.index].0.as_ref()))
    });
    ranked
}

/// One row of the ranking table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbgScore {
    pub cbg: String,
    pub si: f64,
    pub bi: f64,
    pub closeness: f64,
    pub pi: Vec<f64>,
    pub pi_prime: Vec<f64>,
    pub total_inflow: f64,
}

/// Scores and ranks the given CBGs. CBGs without any inflow have no visitor
/// mix and are skipped.
pub fn rank_cbgs(
    dataset: &CityDataset,
    theta: &ProportionMatrix,
    candidates: &[usize],
    k_bridge: usize,
) -> Result<Vec<CbgScore>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let mix = match visitor_mix(dataset, theta, c) {
            Ok(m) => m,
            Err(Error::NoInflow(_)) => continue,
            Err(e) => return Err(e),
        };
        let si = segregation_index(&mix.pi, theta.n_groups)?;
        let (bi, pi_prime) = bridging_index(dataset, theta, c, k_bridge)?;
        scored.push(CbgScore {
            cbg: mix.target,
            si,
            bi,
            closeness: 0.0,
            pi: mix.pi,
            pi_prime,
            total_inflow: mix.total_inflow,
        });
    }
    let keyed: Vec<(&str, f64, f64)> = scored.iter().map(|s| (s.cbg.as_str(), s.si, s.bi)).collect();
    let order = topsis_rank(&keyed);
    Ok(order
        .into_iter()
        .map(|r| {
            let mut s = scored[r.index].clone();
            s.closeness = r.closeness;
            s
        })
        .collect())
}
