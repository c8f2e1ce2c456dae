use mobseg_core::data::io::{load_dir, write_dir};
use mobseg_core::synth::{generate_city, SynthConfig};

#[test]
fn full_segregation_gives_one_hot_groups() {
    let mut c = SynthConfig::new(3, 64, 3);
    c.lambda = 1.0;
    let (d, truth) = generate_city(&c).unwrap();
    let theta = d.group_proportions("income").unwrap();
    for i in 0..d.len() {
        let row = theta.row(i).unwrap();
        assert_eq!(row.iter().filter(|p| **p == 1.0).count(), 1);
        assert_eq!(row[truth.block[i]], 1.0);
    }
}

#[test]
fn counts_add_up_to_population() {
    let (d, _) = generate_city(&SynthConfig::new(8, 50, 4)).unwrap();
    for r in d.cbgs() {
        assert_eq!(r.group_counts[0].iter().sum::<u64>(), r.population);
        assert!(r.population > 0);
    }
}

#[test]
fn written_city_reloads_with_the_same_hash() {
    let (d, _) = generate_city(&SynthConfig::crafted(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dir(&d, dir.path()).unwrap();
    let back = load_dir(dir.path()).unwrap();
    assert_eq!(back.content_hash(), d.content_hash());
    assert_eq!(back, d);
}

#[test]
fn flows_track_expected_volumes() {
    let mut c = SynthConfig::new(5, 60, 2);
    c.trips_per_resident = 20.0;
    let (d, truth) = generate_city(&c).unwrap();
    let observed = d.flows().total_weight();
    let expected: f64 = (0..d.len())
        .flat_map(|i| (0..d.len()).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .map(|(i, j)| truth.expected_flow(i, j))
        .sum();
    assert!((observed - expected).abs() < 0.01 * expected, "{observed} vs {expected}");
}
