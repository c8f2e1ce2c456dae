use crate::data::MobilityGraph;
use crate::error::{Error, Result};

/// Directed modularity
/// `Q = Σ_c [ W_cc / m − γ · K_c^out · K_c^in / m² ]`
/// where `W_cc` is the weight of edges inside community `c` (self-loops
/// included) and `K_c^out`, `K_c^in` are summed out/in strengths.
pub fn directed_modularity(
    graph: &MobilityGraph,
    assignment: &[usize],
    resolution: f64,
) -> Result<f64> {
    if assignment.len() != graph.node_count() {
        return Err(Error::SchemaMismatch {
            expected: format!("{} assignments", graph.node_count()),
            found: assignment.len().to_string(),
        });
    }
    let m = graph.total_weight();
    if m <= 0.0 {
        return Err(Error::ZeroTotalWeight);
    }
    let n_comm = assignment.iter().copied().max().map_or(0, |c| c + 1);
    let mut internal = vec![0.0; n_comm];
    let mut k_out = vec![0.0; n_comm];
    let mut k_in = vec![0.0; n_comm];
    for e in graph.edges() {
        let (co, cd) = (assignment[e.origin], assignment[e.dest]);
        k_out[co] += e.weight;
        k_in[cd] += e.weight;
        if co == cd {
            internal[co] += e.weight;
        }
    }
    Ok((0..n_comm)
        .map(|c| internal[c] / m - resolution * k_out[c] * k_in[c] / (m * m))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_triangles() -> MobilityGraph {
        MobilityGraph::from_triples(&[
            ("a", "b", 1.0),
            ("b", "c", 1.0),
            ("c", "a", 1.0),
            ("d", "e", 1.0),
            ("e", "f", 1.0),
            ("f", "d", 1.0),
        ])
        .unwrap()
    }

    #[test]
    fn single_edge_singletons_is_zero() {
        let g = MobilityGraph::from_triples(&[("a", "b", 1.0)]).unwrap();
        assert_eq!(directed_modularity(&g, &[0, 1], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn planted_triangles_give_one_half() {
        // m = 6; each block: 3/6 internal, 3·3/36 expected -> 2·(0.5 − 0.25)
        let g = two_triangles();
        let q = directed_modularity(&g, &[0, 0, 0, 1, 1, 1], 1.0).unwrap();
        assert!((q - 0.5).abs() < 1e-15);
        let all = directed_modularity(&g, &[0; 6], 1.0).unwrap();
        assert!(q >= all);
        assert!(all.abs() < 1e-15);
    }

    #[test]
    fn zero_weight_rejected() {
        let g = MobilityGraph::from_triples(&[("a", "b", 0.0)]).unwrap();
        assert!(matches!(
            directed_modularity(&g, &[0, 1], 1.0),
            Err(Error::ZeroTotalWeight)
        ));
    }
}
