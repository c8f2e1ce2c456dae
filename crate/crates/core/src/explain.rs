//! Shapley attributions of pair scores against a K-means background, and
//! their per-group aggregation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NetScorer;

pub const DEFAULT_BACKGROUND: usize = 50;
pub const DEFAULT_SAMPLES: usize = 128;
pub const MAX_EXACT_SLOTS: usize = 12;
const KMEANS_MAX_ITER: usize = 100;
const SCORE_CHUNK: usize = 256;

/// Anything that maps raw feature rows to scalar scores.
pub trait Scorer {
    fn n_features(&self) -> usize;
    fn score(&self, rows: &[Vec<f64>]) -> Vec<f64>;
}

impl Scorer for NetScorer<'_> {
    fn n_features(&self) -> usize {
        self.scaler.len()
    }

    fn score(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        self.score_rows(rows)
    }
}

/// Adapts a per-row function.
pub struct FnScorer<F>(pub usize, pub F);

impl<F: Fn(&[f64]) -> f64> Scorer for FnScorer<F> {
    fn n_features(&self) -> usize {
        self.0
    }

    fn score(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| (self.1)(r)).collect()
    }
}

fn score_chunked(model: &dyn Scorer, rows: &[Vec<f64>]) -> Vec<f64> {
    rows.chunks(SCORE_CHUNK).flat_map(|c| model.score(c)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSet {
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is
/// stable. Requires `k ≤ points.len()`.
pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> KMeans {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    let mut assignment = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut total = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, m)| (c, sq_dist(p, m)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("k ≥ 1");
            total += d;
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        inertia.push(total);
        if !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    KMeans {
        centroids,
        assignment,
        inertia,
    }
}

/// `k` background rows summarising `rows`. Clustering runs on z-scored
/// columns; each centroid is reported as the raw-space mean of its members.
/// With at most `k` rows the rows themselves are returned.
pub fn kmeans_background(rows: &[Vec<f64>], k: usize, seed: u64) -> Result<BackgroundSet> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::EmptyFeatures);
    }
    if rows.len() <= k {
        return Ok(BackgroundSet {
            centroids: rows.to_vec(),
        });
    }
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|s| rows.iter().map(|r| r[s]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..dim)
        .map(|s| {
            let v = rows.iter().map(|r| (r[s] - mean[s]).powi(2)).sum::<f64>() / n;
            if v > 1e-18 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| (0..dim).map(|s| (r[s] - mean[s]) / sd[s]).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let km = kmeans(&scaled, k, &mut rng);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (r, &a) in rows.iter().zip(&km.assignment) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(r) {
            *s += x;
        }
    }
    let centroids = sums
        .into_iter()
        .zip(counts)
        .filter(|(_, c)| *c > 0)
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    Ok(BackgroundSet { centroids })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapMode {
    /// Exact when the slot count allows it, sampling otherwise.
    Auto,
    Exact,
    Sampling,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapConfig {
    pub samples: usize,
    pub seed: u64,
    pub mode: ShapMode,
    /// Background rows each sampled permutation is walked from, cycled from
    /// a random offset; 0 walks all of them.
    #[serde(default)]
    pub background_rows: usize,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            mode: ShapMode::Auto,
            background_rows: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub phi: Vec<f64>,
    /// `f(x)`.
    pub value: f64,
    /// Mean score over the background rows.
    pub base_value: f64,
    pub exact: bool,
    /// Efficiency gap spread over the slots after sampling (0 when exact).
    pub residual: f64,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Shapley values of `model` at `instance`, with absent slots filled from
/// each background row and the result averaged over rows.
pub fn shapley_values(
    model: &dyn Scorer,
    instance: &[f64],
    background: &BackgroundSet,
    cfg: &ShapConfig,
) -> Result<Attribution> {
    let m = model.n_features();
    if instance.len() != m || background.centroids.iter().any(|b| b.len() != m) {
        return Err(Error::SchemaMismatch {
            expected: format!("{m} feature slots"),
            found: format!("{}", instance.len()),
        });
    }
    if background.centroids.is_empty() {
        return Err(Error::EmptyFeatures);
    }
    let bg = &background.centroids;
    let value = model.score(&[instance.to_vec()])[0];
    let base_value = score_chunked(model, bg).iter().sum::<f64>() / bg.len() as f64;
    let exact = match cfg.mode {
        ShapMode::Exact => {
            if m > MAX_EXACT_SLOTS {
                return Err(Error::TooManyFeatures {
                    size: m,
                    limit: MAX_EXACT_SLOTS,
                });
            }
            true
        }
        ShapMode::Auto => m <= MAX_EXACT_SLOTS,
        ShapMode::Sampling => false,
    };
    if exact {
        let phi = exact_shapley(model, instance, bg);
        let residual = value - base_value - phi.iter().sum::<f64>();
        return Ok(Attribution {
            phi,
            value,
            base_value,
            exact: true,
            residual,
        });
    }
    let mut phi = sampled_shapley(model, instance, bg, cfg.samples.max(1), cfg.background_rows, cfg.seed);
    let gap = value - base_value - phi.iter().sum::<f64>();
    let mass: f64 = phi.iter().map(|p| p.abs()).sum();
    for p in phi.iter_mut() {
        *p += if mass > 0.0 { gap * p.abs() / mass } else { gap / m as f64 };
    }
    Ok(Attribution {
        phi,
        value,
        base_value,
        exact: false,
        residual: gap,
    })
}

/// Weighted marginal contributions over all coalitions, with the value of
/// a coalition averaged over the background rows.
fn exact_shapley(model: &dyn Scorer, x: &[f64], bg: &[Vec<f64>]) -> Vec<f64> {
    let m = x.len();
    let n_masks = 1usize << m;
    let mut rows = Vec::with_capacity(n_masks * bg.len());
    for mask in 0..n_masks {
        for b in bg {
            rows.push((0..m).map(|t| if mask >> t & 1 == 1 { x[t] } else { b[t] }).collect());
        }
    }
    let scores = score_chunked(model, &rows);
    let v: Vec<f64> = scores
        .chunks(bg.len())
        .map(|c| c.iter().sum::<f64>() / bg.len() as f64)
        .collect();
    let weight: Vec<f64> = (0..m)
        .map(|s| factorial(s) * factorial(m - s - 1) / factorial(m))
        .collect();
    (0..m)
        .map(|t| {
            (0..n_masks)
                .filter(|mask| mask >> t & 1 == 0)
                .map(|mask| weight[(mask as u32).count_ones() as usize] * (v[mask | 1 << t] - v[mask]))
                .sum()
        })
        .collect()
}

/// Antithetic permutation sampling: each drawn permutation is also walked
/// in reverse, from `per_perm` background rows (all when 0).
fn sampled_shapley(model: &dyn Scorer, x: &[f64], bg: &[Vec<f64>], samples: usize, per_perm: usize, seed: u64) -> Vec<f64> {
    let m = x.len();
    let per_perm = if per_perm == 0 { bg.len() } else { per_perm.min(bg.len()) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0..bg.len());
    let mut perm: Vec<usize> = (0..m).collect();
    let mut orders = Vec::with_capacity(samples);
    let mut rows = Vec::with_capacity(samples * per_perm * (m + 1));
    for s in 0..samples {
        if s % 2 == 0 {
            perm.shuffle(&mut rng);
        } else {
            perm.reverse();
        }
        for r in 0..per_perm {
            let mut z = bg[(offset + (s / 2) * per_perm + r) % bg.len()].clone();
            rows.push(z.clone());
            for &t in &perm {
                z[t] = x[t];
                rows.push(z.clone());
            }
        }
        orders.push(perm.clone());
    }
    let scores = score_chunked(model, &rows);
    let mut phi = vec![0.0; m];
    for (s, order) in orders.iter().enumerate() {
        for r in 0..per_perm {
            let base = (s * per_perm + r) * (m + 1);
            for (k, &t) in order.iter().enumerate() {
                phi[t] += scores[base + k + 1] - scores[base + k];
            }
        }
    }
    let n = (samples * per_perm) as f64;
    phi.iter().map(|p| p / n).collect()
}

/// Attributions of one group's model for a set of origins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAttributions {
    pub group: String,
    pub per_origin: Vec<(String, Attribution)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub instance_values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapReport {
    pub group: String,
    pub slots: Vec<SlotSummary>,
    pub order_by_magnitude: Vec<String>,
    pub order_by_variance: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    pub slot_names: Vec<String>,
    pub reports: Vec<ShapReport>,
    /// Variance across groups of the per-group slot means.
    pub cross_group_variance: Vec<f64>,
    pub order_by_magnitude: Vec<String>,
    pub order_by_variance: Vec<String>,
    pub exact: bool,
    pub max_abs_residual: f64,
}

fn order_desc(names: &[String], key: &[f64]) -> Vec<String> {
    let mut idx: Vec<usize> = (0..names.len()).collect();
    idx.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
    idx.into_iter().map(|i| names[i].clone()).collect()
}

/// Per-group slot means and (population) standard deviations, the
/// cross-group variance of the means, and slot orderings by summed mean
/// magnitude and by that variance.
pub fn aggregate_shap(slot_names: &[String], groups: &[GroupAttributions]) -> Result<ShapSummary> {
    if groups.is_empty() || groups.iter().any(|g| g.per_origin.is_empty()) {
        return Err(Error::EmptyReports);
    }
    let m = slot_names.len();
    if let Some((_, a)) = groups.iter().flat_map(|g| &g.per_origin).find(|(_, a)| a.phi.len() != m) {
        return Err(Error::SchemaMismatch {
            expected: format!("{m} slots"),
            found: a.phi.len().to_string(),
        });
    }
    let mut means = Vec::with_capacity(groups.len());
    let mut reports = Vec::with_capacity(groups.len());
    for g in groups {
        let n = g.per_origin.len() as f64;
        let mean: Vec<f64> = (0..m)
            .map(|s| g.per_origin.iter().map(|(_, a)| a.phi[s]).sum::<f64>() / n)
            .collect();
        let slots = (0..m)
            .map(|s| {
                let var = g.per_origin.iter().map(|(_, a)| (a.phi[s] - mean[s]).powi(2)).sum::<f64>() / n;
                SlotSummary {
                    name: slot_names[s].clone(),
                    mean: mean[s],
                    std: var.sqrt(),
                    instance_values: g.per_origin.iter().map(|(id, a)| (id.clone(), a.phi[s])).collect(),
                }
            })
            .collect();
        reports.push(ShapReport {
            group: g.group.clone(),
            slots,
            order_by_magnitude: Vec::new(),
            order_by_variance: Vec::new(),
        });
        means.push(mean);
    }
    let k = groups.len() as f64;
    let magnitude: Vec<f64> = (0..m).map(|s| means.iter().map(|mu| mu[s].abs()).sum()).collect();
    let variance: Vec<f64> = (0..m)
        .map(|s| {
            let avg = means.iter().map(|mu| mu[s]).sum::<f64>() / k;
            means.iter().map(|mu| (mu[s] - avg).powi(2)).sum::<f64>() / k
        })
        .collect();
    let by_mag = order_desc(slot_names, &magnitude);
    let by_var = order_desc(slot_names, &variance);
    for r in &mut reports {
        r.order_by_magnitude = by_mag.clone();
        r.order_by_variance = by_var.clone();
    }
    let attrs = groups.iter().flat_map(|g| g.per_origin.iter().map(|(_, a)| a));
    let exact = attrs.clone().all(|a| a.exact);
    let max_abs_residual = attrs.map(|a| a.residual.abs()).fold(0.0, f64::max);
    Ok(ShapSummary {
        slot_names: slot_names.to_vec(),
        reports,
        cross_group_variance: variance,
        order_by_magnitude: by_mag,
        order_by_variance: by_var,
        exact,
        max_abs_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(c: Vec<f64>) -> FnScorer<impl Fn(&[f64]) -> f64> {
        let m = c.len();
        FnScorer(m, move |x: &[f64]| x.iter().zip(&c).map(|(a, b)| a * b).sum())
    }

    #[test]
    fn linear_closed_form_exact() {
        let c = vec![1.5, -2.0, 0.0, 0.25];
        let x = [1.0, 2.0, 3.0, 4.0];
        let b = vec![0.5, -1.0, 7.0, 2.0];
        let a = shapley_values(&linear(c.clone()), &x, &BackgroundSet { centroids: vec![b.clone()] }, &ShapConfig::default()).unwrap();
        assert!(a.exact);
        for t in 0..4 {
            assert!((a.phi[t] - c[t] * (x[t] - b[t])).abs() < 1e-12);
        }
        assert_eq!(a.phi[2], 0.0);
    }

    #[test]
    fn exact_mode_refuses_wide_models() {
        let s = FnScorer(13, |_: &[f64]| 0.0);
        let bg = BackgroundSet { centroids: vec![vec![0.0; 13]] };
        let cfg = ShapConfig { mode: ShapMode::Exact, ..Default::default() };
        assert!(matches!(shapley_values(&s, &[0.0; 13], &bg, &cfg), Err(Error::TooManyFeatures { .. })));
    }

    #[test]
    fn sampling_efficiency_after_redistribution() {
        let s = FnScorer(15, |x: &[f64]| (x[0] * x[1]).tanh() + x[2..].iter().sum::<f64>().sin());
        let x: Vec<f64> = (0..15).map(|i| i as f64 * 0.1).collect();
        let bg = BackgroundSet { centroids: vec![vec![0.0; 15], vec![0.3; 15]] };
        let a = shapley_values(&s, &x, &bg, &ShapConfig::default()).unwrap();
        assert!(!a.exact);
        assert!((a.phi.iter().sum::<f64>() - (a.value - a.base_value)).abs() < 1e-9);
    }

    #[test]
    fn small_data_background_is_the_rows() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(kmeans_background(&rows, 50, 1).unwrap().centroids, rows);
        assert!(matches!(kmeans_background(&[], 5, 1), Err(Error::EmptyFeatures)));
    }

    #[test]
    fn separated_clouds_give_cloud_means() {
        let mut rows = Vec::new();
        for i in 0..20 {
            let e = (i as f64 * 0.7).sin() * 0.1;
            rows.push(vec![e, -e]);
            rows.push(vec![100.0 - e, 50.0 + e]);
        }
        let bg = kmeans_background(&rows, 2, 3).unwrap();
        let mut c = bg.centroids.clone();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let mean = |k: usize, s: usize| rows.iter().skip(k).step_by(2).map(|r| r[s]).sum::<f64>() / 20.0;
        assert!((c[0][0] - mean(0, 0)).abs() < 1e-12 && (c[1][1] - mean(1, 1)).abs() < 1e-12);
    }

    #[test]
    fn singleton_aggregate() {
        let names = vec!["a".to_string(), "b".to_string()];
        let att = Attribution { phi: vec![0.3, -0.7], value: 0.0, base_value: 0.0, exact: true, residual: 0.0 };
        let s = aggregate_shap(&names, &[GroupAttributions { group: "g0".into(), per_origin: vec![("o".into(), att)] }]).unwrap();
        assert_eq!(s.reports[0].slots[1].mean, -0.7);
        assert_eq!(s.reports[0].slots[1].std, 0.0);
        assert_eq!(s.order_by_magnitude, vec!["b", "a"]);
        assert!(matches!(aggregate_shap(&names, &[]), Err(Error::EmptyReports)));
    }
}
