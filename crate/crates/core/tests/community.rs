use mobseg_core::community::{detect_communities, directed_modularity, DetectionConfig};
use mobseg_core::data::MobilityGraph;
use mobseg_core::synth::oracle::oracle_modularity_optimum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Option<MobilityGraph> {
    let mut t = Vec::new();
    for o in 0..n {
        for d in 0..n {
            if o != d && rng.random::<f64>() < p {
                t.push((format!("v{o}"), format!("v{d}"), rng.random_range(0.5..5.0)));
            }
        }
    }
    if t.is_empty() {
        return None;
    }
    MobilityGraph::from_triples(&t).ok()
}

fn labels_equal_up_to_renaming(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len()
        && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn six_node_graph_reaches_exhaustive_optimum() {
    // two dense triads joined by one weak bridge
    let g = MobilityGraph::from_triples(&[
        ("a", "b", 3.0),
        ("b", "c", 2.0),
        ("c", "a", 4.0),
        ("b", "a", 1.0),
        ("d", "e", 3.0),
        ("e", "f", 2.0),
        ("f", "d", 5.0),
        ("c", "d", 0.5),
    ])
    .unwrap();
    let (best, _) = oracle_modularity_optimum(&g, 1.0).unwrap();
    let p = detect_communities(&g, &DetectionConfig::default()).unwrap();
    assert!((p.modularity - best).abs() < 1e-12, "{} vs {}", p.modularity, best);
}

#[test]
fn random_small_graphs_near_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    let mut worst: f64 = 1.0;
    while checked < 100 {
        let n = rng.random_range(2..=6);
        let Some(g) = random_graph(&mut rng, n, 0.45) else { continue };
        let (best, _) = oracle_modularity_optimum(&g, 1.0).unwrap();
        let cfg = DetectionConfig {
            seed: checked as u64,
            ..Default::default()
        };
        let p = detect_communities(&g, &cfg).unwrap();
        let q = directed_modularity(&g, p.raw_assignment(), 1.0).unwrap();
        let n = g.node_count();
        let single = directed_modularity(&g, &(0..n).collect::<Vec<_>>(), 1.0).unwrap();
        let all = directed_modularity(&g, &vec![0; n], 1.0).unwrap();
        assert!(q >= single - 1e-12 && q >= all - 1e-12);
        assert!(q >= 0.95 * best - 1e-12, "graph {checked}: {q} < 0.95 * {best}");
        if best > 1e-9 {
            worst = worst.min(q / best);
        }
        checked += 1;
    }
    eprintln!("worst ratio to optimum: {worst}");
}

#[test]
fn planted_two_blocks_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..50 {
        let size_a = rng.random_range(3..12);
        let size_b = rng.random_range(3..12);
        let n = size_a + size_b;
        let block = |v: usize| usize::from(v >= size_a);
        let mut t = Vec::new();
        for o in 0..n {
            for d in 0..n {
                if o == d {
                    continue;
                }
                if block(o) == block(d) {
                    if rng.random::<f64>() < 0.9 {
                        t.push((format!("{o:02}"), format!("{d:02}"), rng.random_range(10.0..20.0)));
                    }
                } else if rng.random::<f64>() < 0.3 {
                    t.push((format!("{o:02}"), format!("{d:02}"), rng.random_range(0.1..1.0)));
                }
            }
        }
        let g = MobilityGraph::from_triples(&t).unwrap();
        let p = detect_communities(
            &g,
            &DetectionConfig {
                seed: trial,
                ..Default::default()
            },
        )
        .unwrap();
        let planted: Vec<usize> = (0..g.node_count())
            .map(|i| block(g.node_id(i).parse().unwrap()))
            .collect();
        assert!(
            labels_equal_up_to_renaming(p.raw_assignment(), &planted),
            "trial {trial}: {:?}",
            p.raw_assignment()
        );
    }
}
