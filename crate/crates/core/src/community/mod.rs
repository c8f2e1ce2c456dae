//! Mobility-based community detection.

mod leiden;
mod modularity;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MobilityGraph;
use crate::error::{Error, Result};

pub use modularity::directed_modularity;

/// Independent Leiden runs per detection; the best modularity wins.
const RESTARTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub w_min: f64,
    pub max_communities: usize,
    pub resolution: f64,
    pub seed: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            w_min: 0.0,
            max_communities: 10,
            resolution: 1.0,
            seed: 0,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_min >= 0.0) {
            return Err(Error::InvalidConfig("w_min must be >= 0".into()));
        }
        if self.max_communities == 0 {
            return Err(Error::InvalidConfig("max_communities must be >= 1".into()));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::InvalidConfig("resolution must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Community {
    pub id: usize,
    pub members: Vec<String>,
}

/// Community assignment of every node. Communities are ordered by member
/// count (descending, ties by smallest member id); everything past
/// `max_communities` is collapsed into `others`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Partition {
    pub communities: Vec<Community>,
    pub others: Vec<String>,
    /// Directed modularity of the untruncated partition on the thresholded graph.
    pub modularity: f64,
    #[serde(skip)]
    assignment: Vec<usize>,
    #[serde(skip)]
    raw_assignment: Vec<usize>,
}

impl Partition {
    /// Sentinel community id used for `others`.
    pub fn others_id(&self) -> usize {
        self.communities.len()
    }

    /// Community id of each node (graph order); `others_id()` for the remainder.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Untruncated community labels, as optimised.
    pub fn raw_assignment(&self) -> &[usize] {
        &self.raw_assignment
    }

    pub fn community_of(&self, node: usize) -> usize {
        self.assignment[node]
    }

    /// Members (node indices) of a community id, including the sentinel.
    pub fn member_indices(&self, id: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c == id)
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of rows in community-level views (communities plus `others`).
    pub fn n_slots(&self) -> usize {
        self.communities.len() + 1
    }
}

/// Thresholds the graph at `w_min`, maximises directed modularity with Leiden
/// and ranks the resulting communities.
pub fn detect_communities(graph: &MobilityGraph, config: &DetectionConfig) -> Result<Partition> {
    config.validate()?;
    let g = graph.thresholded(config.w_min);
    if g.edge_count() == 0 || g.total_weight() <= 0.0 {
        return Err(Error::EmptyGraphAfterThreshold {
            w_min: config.w_min,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gamma = config.resolution;
    let mut labels = leiden::leiden(&g, gamma, &mut rng);
    let mut q = directed_modularity(&g, &labels, gamma)?;
    for _ in 1..RESTARTS {
        let cand = leiden::leiden(&g, gamma, &mut rng);
        let cq = directed_modularity(&g, &cand, gamma)?;
        if cq > q + 1e-12 {
            labels = cand;
            q = cq;
        }
    }

    // the trivial partitions bound the result from below
    let n = g.node_count();
    for trivial in [vec![0usize; n], (0..n).collect::<Vec<_>>()] {
        let tq = directed_modularity(&g, &trivial, gamma)?;
        if tq > q + 1e-12 {
            labels = trivial;
            q = tq;
        }
    }
    Ok(rank_communities(&g, &labels, config.max_communities, q))
}

fn rank_communities(
    g: &MobilityGraph,
    labels: &[usize],
    max_communities: usize,
    modularity: f64,
) -> Partition {
    let k = labels.iter().copied().max().map_or(0, |c| c + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (v, &c) in labels.iter().enumerate() {
        groups[c].push(v);
    }
    let min_id = |members: &[usize]| members.iter().map(|&v| g.node_id(v)).min().map(str::to_string);
    let mut order: Vec<usize> = (0..k).filter(|&c| !groups[c].is_empty()).collect();
    order.sort_by(|&a, &b| {
        groups[b]
            .len()
            .cmp(&groups[a].len())
            .then_with(|| min_id(&groups[a]).cmp(&min_id(&groups[b])))
    });

    let kept = order.len().min(max_communities);
    let others_id = kept;
    let mut assignment = vec![others_id; labels.len()];
    let mut communities = Vec::with_capacity(kept);
    for (rank, &c) in order.iter().take(kept).enumerate() {
        for &v in &groups[c] {
            assignment[v] = rank;
        }
        communities.push(Community {
            id: rank,
            members: groups[c].iter().map(|&v| g.node_id(v).to_string()).collect(),
        });
    }
    let others = (0..labels.len())
        .filter(|&v| assignment[v] == others_id)
        .map(|v| g.node_id(v).to_string())
        .collect();
    Partition {
        communities,
        others,
        modularity,
        assignment,
        raw_assignment: labels.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cliques() -> MobilityGraph {
        let mut t = Vec::new();
        for block in [["a", "b", "c"], ["d", "e", "f"]] {
            for o in block {
                for d in block {
                    if o != d {
                        t.push((o, d, 1.0));
                    }
                }
            }
        }
        MobilityGraph::from_triples(&t).unwrap()
    }

    #[test]
    fn disconnected_cliques_become_two_communities() {
        let p = detect_communities(&cliques(), &DetectionConfig::default()).unwrap();
        assert_eq!(p.communities.len(), 2);
        assert_eq!(p.communities[0].members, vec!["a", "b", "c"]);
        assert_eq!(p.communities[1].members, vec!["d", "e", "f"]);
        assert!(p.others.is_empty());
        assert!((p.modularity - 0.5).abs() < 1e-12);
    }

    #[test]
    fn threshold_above_all_weights_is_empty() {
        let cfg = DetectionConfig {
            w_min: 2.0,
            ..Default::default()
        };
        assert!(matches!(
            detect_communities(&cliques(), &cfg),
            Err(Error::EmptyGraphAfterThreshold { .. })
        ));
    }

    #[test]
    fn truncation_collapses_into_others() {
        let mut t = Vec::new();
        for k in 0..4 {
            let (a, b) = (format!("n{k}a"), format!("n{k}b"));
            t.push((a.clone(), b.clone(), 1.0));
            t.push((b, a, 1.0));
        }
        let g = MobilityGraph::from_triples(&t).unwrap();
        let p = detect_communities(
            &g,
            &DetectionConfig {
                max_communities: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(p.communities.len(), 2);
        assert_eq!(p.others.len(), 4);
        // ties on size broken by smallest member id
        assert_eq!(p.communities[0].members, vec!["n0a", "n0b"]);
        assert_eq!(p.communities[1].members, vec!["n1a", "n1b"]);
        assert_eq!(p.community_of(g.index_of("n3a").unwrap()), p.others_id());
    }

    #[test]
    fn same_seed_same_partition() {
        let g = cliques();
        let cfg = DetectionConfig {
            seed: 42,
            ..Default::default()
        };
        let a = detect_communities(&g, &cfg).unwrap();
        let b = detect_communities(&g, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.raw_assignment(), b.raw_assignment());
    }

    #[test]
    fn json_shape() {
        let p = detect_communities(&cliques(), &DetectionConfig::default()).unwrap();
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["communities"][0]["id"], 0);
        assert_eq!(v["communities"][1]["members"][0], "d");
        assert!(v["others"].as_array().unwrap().is_empty());
    }
}
