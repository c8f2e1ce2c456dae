//! Exhaustive reference computations used to check the optimisers and
//! estimators on small inputs.

use crate::data::{CityDataset, MobilityGraph};
use crate::error::{Error, Result};

pub const MAX_ORACLE_NODES: usize = 8;
pub const MAX_ORACLE_FEATURES: usize = 12;

/// Pairwise-sum directed modularity, `Σ_ij [A_ij/m − γ k_i^out k_j^in / m²] δ(c_i, c_j)`.
fn pairwise_modularity(adj: &[Vec<f64>], labels: &[usize], gamma: f64) -> f64 {
    let n = adj.len();
    let m: f64 = adj.iter().flatten().sum();
    let k_out: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    let k_in: Vec<f64> = (0..n).map(|j| (0..n).map(|i| adj[i][j]).sum()).collect();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += adj[i][j] / m - gamma * k_out[i] * k_in[j] / (m * m);
            }
        }
    }
    q
}

/// Visits every set partition of `n` elements as a restricted growth string.
fn for_each_set_partition(n: usize, mut f: impl FnMut(&[usize])) {
    if n == 0 {
        f(&[]);
        return;
    }
    let mut a = vec![0usize; n];
    let mut b = vec![0usize; n]; // b[i] = 1 + max(a[..i])
    for i in 1..n {
        b[i] = 1;
    }
    loop {
        f(&a);
        let mut i = n - 1;
        loop {
            if i == 0 {
                return;
            }
            if a[i] < b[i] {
                a[i] += 1;
                for j in i + 1..n {
                    a[j] = 0;
                    b[j] = b[i].max(a[i] + 1);
                }
                break;
            }
            i -= 1;
        }
    }
}

/// Number of set partitions visited for `n` elements (Bell number).
pub fn bell_number(n: usize) -> usize {
    let mut count = 0;
    for_each_set_partition(n, |_| count += 1);
    count
}

/// Best directed modularity over all set partitions of a graph with at most
/// eight nodes. Ties keep the first partition in enumeration order.
pub fn oracle_modularity_optimum(graph: &MobilityGraph, gamma: f64) -> Result<(f64, Vec<usize>)> {
    let n = graph.node_count();
    if n > MAX_ORACLE_NODES {
        return Err(Error::TooLarge {
            size: n,
            limit: MAX_ORACLE_NODES,
        });
    }
    let mut adj = vec![vec![0.0; n]; n];
    for e in graph.edges() {
        adj[e.origin][e.dest] += e.weight;
    }
    let m: f64 = adj.iter().flatten().sum();
    if m <= 0.0 {
        return Ok((0.0, vec![0; n]));
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for_each_set_partition(n, |labels| {
        let q = pairwise_modularity(&adj, labels, gamma);
        if q > best.0 + 1e-15 {
            best = (q, labels.to_vec());
        }
    });
    Ok(best)
}

/// Exact interventional Shapley values through the Möbius (Harsanyi
/// dividend) representation: `φ_t = Σ_{S ∋ t} d(S) / |S|` where
/// `d(S) = Σ_{T ⊆ S} (−1)^{|S|−|T|} v(T)` and `v(T)` is the background mean
/// of the model with features in `T` taken from the instance.
pub fn oracle_exact_shapley(
    model: &dyn Fn(&[f64]) -> f64,
    instance: &[f64],
    background: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let m = instance.len();
    if m > MAX_ORACLE_FEATURES {
        return Err(Error::TooManyFeatures {
            size: m,
            limit: MAX_ORACLE_FEATURES,
        });
    }
    if background.is_empty() {
        return Err(Error::EmptyFeatures);
    }
    if let Some(b) = background.iter().find(|b| b.len() != m) {
        return Err(Error::SchemaMismatch {
            expected: format!("{m} features"),
            found: b.len().to_string(),
        });
    }
    let full = 1usize << m;
    let mut value = vec![0.0; full];
    let mut row = vec![0.0; m];
    for (mask, v) in value.iter_mut().enumerate() {
        let mut acc = 0.0;
        for b in background {
            for t in 0..m {
                row[t] = if mask >> t & 1 == 1 { instance[t] } else { b[t] };
            }
            acc += model(&row);
        }
        *v = acc / background.len() as f64;
    }
    // in-place Möbius transform over the subset lattice
    let mut dividend = value;
    for t in 0..m {
        for mask in 0..full {
            if mask >> t & 1 == 1 {
                dividend[mask] -= dividend[mask ^ (1 << t)];
            }
        }
    }
    let mut phi = vec![0.0; m];
    for (mask, d) in dividend.iter().enumerate().skip(1) {
        let size = mask.count_ones() as f64;
        for (t, p) in phi.iter_mut().enumerate() {
            if mask >> t & 1 == 1 {
                *p += d / size;
            }
        }
    }
    Ok(phi)
}

/// Group shares of a CBG straight from its counts; `None` if all zero.
fn shares_from_counts(dataset: &CityDataset, attr: usize, i: usize) -> Option<Vec<f64>> {
    let c = &dataset.cbg(i).group_counts[attr];
    let total: u64 = c.iter().sum();
    (total > 0).then(|| c.iter().map(|&x| x as f64 / total as f64).collect())
}

/// Visitor mix by scanning every (origin, target) pair.
pub fn oracle_visitor_mix(dataset: &CityDataset, attribute: &str, target: usize) -> Option<Vec<f64>> {
    let a = dataset.attribute_index(attribute).ok()?;
    let n = dataset.attributes()[a].groups.len();
    let mut num = vec![0.0; n];
    let mut den = 0.0;
    for i in 0..dataset.len() {
        let w = dataset.flows().weight(i, target);
        if w <= 0.0 {
            continue;
        }
        if let Some(th) = shares_from_counts(dataset, a, i) {
            for d in 0..n {
                num[d] += w * th[d];
            }
            den += w;
        }
    }
    (den > 0.0).then(|| num.iter().map(|x| x / den).collect())
}

/// `n/(2n−2) Σ |π_d − 1/n|` written out.
pub fn oracle_segregation_index(pi: &[f64]) -> f64 {
    let n = pi.len() as f64;
    let mut s = 0.0;
    for p in pi {
        s += (p - 1.0 / n).abs();
    }
    s * n / (2.0 * n - 2.0)
}

/// Bridging index from a full distance sort of all admissible neighbours.
pub fn oracle_bridging_index(dataset: &CityDataset, attribute: &str, target: usize, k: usize) -> Option<(f64, Vec<f64>)> {
    let a = dataset.attribute_index(attribute).ok()?;
    let n = dataset.attributes()[a].groups.len();
    let mut all: Vec<(f64, String, usize)> = (0..dataset.len())
        .filter(|&i| i != target && dataset.cbg(i).population > 0 && shares_from_counts(dataset, a, i).is_some())
        .map(|i| (dataset.distance_km(target, i), dataset.cbg(i).id.clone(), i))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)));
    if all.len() < k {
        return None;
    }
    let mut num = vec![0.0; n];
    let mut pop = 0.0;
    for (_, _, i) in &all[..k] {
        let p = dataset.cbg(*i).population as f64;
        let th = shares_from_counts(dataset, a, *i)?;
        for d in 0..n {
            num[d] += p * th[d];
        }
        pop += p;
    }
    let pi: Vec<f64> = num.iter().map(|x| x / pop).collect();
    Some((1.0 - oracle_segregation_index(&pi), pi))
}

/// TOPSIS closeness computed column by column from the definitions.
pub fn oracle_topsis(rows: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let m = rows.len();
    let k = weights.len();
    let mut v = vec![vec![0.0; k]; m];
    for j in 0..k {
        let norm = (0..m).map(|i| rows[i][j] * rows[i][j]).sum::<f64>().sqrt();
        for i in 0..m {
            v[i][j] = if norm > 0.0 { weights[j] * rows[i][j] / norm } else { 0.0 };
        }
    }
    let best: Vec<f64> = (0..k).map(|j| (0..m).map(|i| v[i][j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let worst: Vec<f64> = (0..k).map(|j| (0..m).map(|i| v[i][j]).fold(f64::INFINITY, f64::min)).collect();
    (0..m)
        .map(|i| {
            let dp = (0..k).map(|j| (v[i][j] - best[j]).powi(2)).sum::<f64>().sqrt();
            let dm = (0..k).map(|j| (v[i][j] - worst[j]).powi(2)).sum::<f64>().sqrt();
            if dp + dm > 0.0 {
                dm / (dp + dm)
            } else {
                0.5
            }
        })
        .collect()
}

/// `2 Σ min(p, a) / (Σ p + Σ a)`.
pub fn oracle_cpc(p: &[f64], a: &[f64]) -> f64 {
    let mut common = 0.0;
    let mut total = 0.0;
    for i in 0..p.len() {
        common += if p[i] < a[i] { p[i] } else { a[i] };
        total += p[i] + a[i];
    }
    2.0 * common / total
}

/// Jensen-Shannon divergence in nats as `H(m) − (H(p) + H(q))/2`.
pub fn oracle_jsd(p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let h = |v: &[f64]| -> f64 { v.iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum() };
    let pn: Vec<f64> = p.iter().map(|x| x / sp).collect();
    let qn: Vec<f64> = q.iter().map(|x| x / sq).collect();
    let m: Vec<f64> = pn.iter().zip(&qn).map(|(a, b)| (a + b) / 2.0).collect();
    h(&m) - 0.5 * (h(&pn) + h(&qn))
}

/// Pearson correlation from raw moment sums.
pub fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        syy += y[i] * y[i];
        sxy += x[i] * y[i];
    }
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn oracle_rmse(p: &[f64], a: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - a[i]) * (p[i] - a[i]);
    }
    (s / p.len() as f64).sqrt()
}

/// RMSE over the range of the actual values.
pub fn oracle_nrmse(p: &[f64], a: &[f64]) -> f64 {
    let mut lo = a[0];
    let mut hi = a[0];
    for v in a {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    oracle_rmse(p, a) / (hi - lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bell_numbers() {
        let bells: Vec<usize> = (0..=8).map(bell_number).collect();
        assert_eq!(bells, vec![1, 1, 2, 5, 15, 52, 203, 877, 4140]);
    }

    #[test]
    fn triangles_optimum_is_planted() {
        let g = MobilityGraph::from_triples(&[
            ("a", "b", 1.0),
            ("b", "c", 1.0),
            ("c", "a", 1.0),
            ("d", "e", 1.0),
            ("e", "f", 1.0),
            ("f", "d", 1.0),
        ])
        .unwrap();
        let (q, labels) = oracle_modularity_optimum(&g, 1.0).unwrap();
        assert!((q - 0.5).abs() < 1e-12);
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn single_node_is_trivial() {
        let g = MobilityGraph::from_triples(&[("a", "a", 2.0)]).unwrap();
        let (q, labels) = oracle_modularity_optimum(&g, 1.0).unwrap();
        assert_eq!(labels, vec![0]);
        assert!(q.abs() < 1e-15);
    }

    #[test]
    fn complete_uniform_digraph_prefers_all_in_one() {
        let ids = ["a", "b", "c", "d", "e"];
        let mut t = Vec::new();
        for o in ids {
            for d in ids {
                if o != d {
                    t.push((o, d, 1.0));
                }
            }
        }
        let g = MobilityGraph::from_triples(&t).unwrap();
        let (q, labels) = oracle_modularity_optimum(&g, 1.0).unwrap();
        assert!(q.abs() < 1e-12);
        assert!(labels.iter().all(|&c| c == 0));
    }

    #[test]
    fn too_large_rejected() {
        let t: Vec<(String, String, f64)> =
            (0..9).map(|k| (k.to_string(), ((k + 1) % 9).to_string(), 1.0)).collect();
        let g = MobilityGraph::from_triples(&t).unwrap();
        assert!(matches!(
            oracle_modularity_optimum(&g, 1.0),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn constant_model_has_zero_attribution() {
        let phi = oracle_exact_shapley(&|_| 3.0, &[1.0, 2.0, 3.0], &[vec![0.0; 3]]).unwrap();
        assert!(phi.iter().all(|p| p.abs() < 1e-15));
    }

    #[test]
    fn linear_model_closed_form() {
        let c = [1.5, -2.0, 0.25, 4.0];
        let f = |x: &[f64]| x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let x = [1.0, 2.0, -1.0, 0.5];
        let b = vec![0.5, -1.0, 2.0, 0.0];
        let phi = oracle_exact_shapley(&f, &x, &[b.clone()]).unwrap();
        for t in 0..4 {
            assert!((phi[t] - c[t] * (x[t] - b[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn efficiency_holds() {
        let f = |x: &[f64]| (x[0] * x[1]).tanh() + x[2].powi(2) - x[0] * x[2] * x[3];
        let x = [0.3, -1.2, 0.8, 2.0];
        let bg = vec![vec![0.0, 0.1, 0.2, 0.3], vec![1.0, -1.0, 0.5, -0.5]];
        let phi = oracle_exact_shapley(&f, &x, &bg).unwrap();
        let base: f64 = bg.iter().map(|b| f(b)).sum::<f64>() / 2.0;
        assert!((phi.iter().sum::<f64>() - (f(&x) - base)).abs() < 1e-12);
    }

    #[test]
    fn too_many_features_rejected() {
        let x = vec![0.0; 13];
        assert!(matches!(
            oracle_exact_shapley(&|_| 0.0, &x, &[x.clone()]),
            Err(Error::TooManyFeatures { .. })
        ));
    }
}
