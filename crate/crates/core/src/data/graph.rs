use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub origin: usize,
    pub dest: usize,
    pub weight: f64,
}

/// Directed weighted mobility graph over a fixed, ordered node set.
///
/// Edges are kept sorted by `(origin, dest)` with at most one edge per ordered
/// pair. Compressed adjacency in both directions is rebuilt on construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "GraphParts", into = "GraphParts")]
pub struct MobilityGraph {
    nodes: Vec<String>,
    edges: Vec<Edge>,
    index: HashMap<String, usize>,
    out_start: Vec<usize>,
    // positions into `edges` ordered by (dest, origin)
    in_order: Vec<usize>,
    in_start: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphParts {
    nodes: Vec<String>,
    edges: Vec<Edge>,
}

impl From<GraphParts> for MobilityGraph {
    fn from(p: GraphParts) -> Self {
        MobilityGraph::build(p.nodes, p.edges)
    }
}

impl From<MobilityGraph> for GraphParts {
    fn from(g: MobilityGraph) -> Self {
        GraphParts {
            nodes: g.nodes,
            edges: g.edges,
        }
    }
}

impl PartialEq for MobilityGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

impl MobilityGraph {
    /// Builds a graph from indexed edges, summing duplicates.
    pub fn new(nodes: Vec<String>, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let n = nodes.len();
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for e in edges {
            if e.origin >= n || e.dest >= n {
                return Err(Error::UnknownCbg(format!("#{}", e.origin.max(e.dest))));
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(Error::NegativeValue {
                    field: format!("weight {}->{}", nodes[e.origin], nodes[e.dest]),
                });
            }
            *merged.entry((e.origin, e.dest)).or_insert(0.0) += e.weight;
        }
        let edges = merged
            .into_iter()
            .map(|((origin, dest), weight)| Edge {
                origin,
                dest,
                weight,
            })
            .collect();
        Ok(Self::build(nodes, edges))
    }

    /// Convenience constructor from `(origin, dest, weight)` id triples. Nodes
    /// are taken in first-appearance order.
    pub fn from_triples<S: AsRef<str>>(triples: &[(S, S, f64)]) -> Result<Self> {
        let mut nodes: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut intern = |s: &str| -> usize {
            if let Some(&i) = index.get(s) {
                return i;
            }
            nodes.push(s.to_string());
            index.insert(s.to_string(), nodes.len() - 1);
            nodes.len() - 1
        };
        let edges: Vec<Edge> = triples
            .iter()
            .map(|(o, d, w)| Edge {
                origin: intern(o.as_ref()),
                dest: intern(d.as_ref()),
                weight: *w,
            })
            .collect();
        Self::new(nodes, edges)
    }

    fn build(nodes: Vec<String>, edges: Vec<Edge>) -> Self {
        let n = nodes.len();
        let index = nodes
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        let mut out_start = vec![0usize; n + 1];
        for e in &edges {
            out_start[e.origin + 1] += 1;
        }
        for i in 0..n {
            out_start[i + 1] += out_start[i];
        }
        let mut in_order: Vec<usize> = (0..edges.len()).collect();
        in_order.sort_by_key(|&k| (edges[k].dest, edges[k].origin));
        let mut in_start = vec![0usize; n + 1];
        for e in &edges {
            in_start[e.dest + 1] += 1;
        }
        for i in 0..n {
            in_start[i + 1] += in_start[i];
        }
        Self {
            nodes,
            edges,
            index,
            out_start,
            in_order,
            in_start,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_id(&self, i: usize) -> &str {
        &self.nodes[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    pub fn out_edges(&self, i: usize) -> &[Edge] {
        &self.edges[self.out_start[i]..self.out_start[i + 1]]
    }

    pub fn in_edges(&self, j: usize) -> impl Iterator<Item = &Edge> + '_ {
        self.in_order[self.in_start[j]..self.in_start[j + 1]]
            .iter()
            .map(move |&k| &self.edges[k])
    }

    pub fn weight(&self, origin: usize, dest: usize) -> f64 {
        let out = self.out_edges(origin);
        match out.binary_search_by_key(&dest, |e| e.dest) {
            Ok(k) => out[k].weight,
            Err(_) => 0.0,
        }
    }

    pub fn out_total(&self, i: usize) -> f64 {
        self.out_edges(i).iter().map(|e| e.weight).sum()
    }

    pub fn in_total(&self, j: usize) -> f64 {
        self.in_edges(j).map(|e| e.weight).sum()
    }

    /// Same node set, keeping only edges with `weight >= w_min`.
    pub fn thresholded(&self, w_min: f64) -> MobilityGraph {
        let edges = self
            .edges
            .iter()
            .filter(|e| e.weight >= w_min)
            .copied()
            .collect();
        MobilityGraph::build(self.nodes.clone(), edges)
    }
}
