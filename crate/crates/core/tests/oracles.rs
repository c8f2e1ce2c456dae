//! Library functions against independent brute-force oracles, 200 random
//! instances each.

use mobseg_core::data::CityDataset;
use mobseg_core::explain::{shapley_values, BackgroundSet, FnScorer, ShapConfig, ShapMode};
use mobseg_core::metrics::{cpc, jsd, pearson, rmse, rmse_nrmse};
use mobseg_core::segregation::{bridging_index, segregation_index, topsis_closeness, visitor_mix};
use mobseg_core::synth::oracle::*;
use mobseg_core::synth::{generate_city, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 200;
const TOL: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + b.abs())
}

fn random_city(rng: &mut ChaCha8Rng) -> CityDataset {
    let n = rng.random_range(12..40);
    let g = rng.random_range(2..5);
    let mut cfg = SynthConfig::new(rng.random(), n, g);
    cfg.lambda = rng.random_range(0.0..1.0);
    cfg.homophily = rng.random_range(0.0..1.0);
    generate_city(&cfg).unwrap().0
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, zero_p: f64) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random::<f64>() < zero_p { 0.0 } else { rng.random_range(0.0..100.0) })
        .collect()
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

#[test]
fn visitor_mix_matches_pairwise_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for _ in 0..INSTANCES {
        let d = random_city(&mut rng);
        let theta = d.group_proportions("income").unwrap();
        let t = rng.random_range(0..d.len());
        match (visitor_mix(&d, &theta, t), oracle_visitor_mix(&d, "income", t)) {
            (Ok(v), Some(o)) => {
                for (a, b) in v.pi.iter().zip(&o) {
                    assert!(close(*a, *b), "{a} vs {b}");
                }
                checked += 1;
            }
            (Err(_), None) => {}
            (v, o) => panic!("disagree on definedness: {v:?} vs {o:?}"),
        }
    }
    assert!(checked > INSTANCES / 2);
}

#[test]
fn segregation_index_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..INSTANCES {
        let n = rng.random_range(2..9);
        let pi = random_simplex(&mut rng, n);
        let si = segregation_index(&pi, n).unwrap();
        assert!(close(si, oracle_segregation_index(&pi)));
    }
}

#[test]
fn bridging_index_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..INSTANCES {
        let d = random_city(&mut rng);
        let theta = d.group_proportions("income").unwrap();
        let t = rng.random_range(0..d.len());
        let k = rng.random_range(1..d.len());
        match (bridging_index(&d, &theta, t, k), oracle_bridging_index(&d, "income", t, k)) {
            (Ok((bi, pi)), Some((obi, opi))) => {
                assert!(close(bi, obi), "{bi} vs {obi}");
                for (a, b) in pi.iter().zip(&opi) {
                    assert!(close(*a, *b));
                }
            }
            (Err(_), None) => {}
            (a, b) => panic!("disagree on definedness: {a:?} vs {b:?}"),
        }
    }
}

#[test]
fn topsis_matches_columnwise_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..INSTANCES {
        let m = rng.random_range(1..20);
        let k = rng.random_range(1..4);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..k).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let got = topsis_closeness(&rows, &weights);
        let want = oracle_topsis(&rows, &weights);
        for (a, b) in got.iter().zip(&want) {
            assert!(close(*a, *b), "{a} vs {b}");
        }
    }
}

#[test]
fn flow_metrics_match_textbook_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..INSTANCES {
        let n = rng.random_range(2..60);
        let p = random_vec(&mut rng, n, 0.3);
        let mut a = random_vec(&mut rng, n, 0.3);
        a[0] += 1.0;
        a[n - 1] += 50.0;
        assert!(close(cpc(&p, &a).unwrap(), oracle_cpc(&p, &a)));
        if p.iter().sum::<f64>() > 0.0 {
            assert!(close(jsd(&p, &a).unwrap(), oracle_jsd(&p, &a)));
        }
        assert!(close(rmse(&p, &a).unwrap(), oracle_rmse(&p, &a)));
        assert!(close(rmse_nrmse(&p, &a).unwrap().1, oracle_nrmse(&p, &a)));
        if let Ok(r) = pearson(&p, &a) {
            let o = oracle_pearson(&p, &a);
            assert!((r - o).abs() < 1e-8, "{r} vs {o}");
        }
    }
}

#[test]
fn exact_shapley_matches_subset_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..INSTANCES {
        let m = rng.random_range(1..7);
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pairs: Vec<(usize, usize)> = (0..2).map(|_| (rng.random_range(0..m), rng.random_range(0..m))).collect();
        let f = move |x: &[f64]| -> f64 {
            let lin: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            lin + pairs.iter().map(|&(i, j)| x[i] * x[j]).sum::<f64>() + (x[0]).tanh()
        };
        let bg: Vec<Vec<f64>> = (0..rng.random_range(1..6))
            .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = oracle_exact_shapley(&f, &x, &bg).unwrap();
        let scorer = FnScorer(m, &f);
        let cfg = ShapConfig {
            mode: ShapMode::Exact,
            ..ShapConfig::default()
        };
        let got = shapley_values(&scorer, &x, &BackgroundSet { centroids: bg }, &cfg).unwrap();
        for (a, b) in got.phi.iter().zip(&want) {
            assert!(close(*a, *b), "{a} vs {b}");
        }
    }
}
