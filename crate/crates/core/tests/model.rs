use mobseg_core::data::CityDataset;
use mobseg_core::model::train::{run_protocol, train, Predictor, Prepared, TrainConfig};
use mobseg_core::model::{GroupModelSet, Variant};
use mobseg_core::synth::{generate_city, SynthConfig};

fn city() -> CityDataset {
    let mut c = SynthConfig::new(21, 90, 2);
    c.lambda = 0.8;
    c.homophily = 0.6;
    generate_city(&c).unwrap().0
}

fn cfg(variants: Vec<Variant>) -> TrainConfig {
    let mut c = TrainConfig::new("income", variants);
    c.k_dest = 12;
    c.epochs = 6;
    c.runs = 1;
    c.seed = 7;
    c
}

#[test]
fn predicted_flows_conserve_origin_totals() {
    let d = city();
    let c = cfg(Variant::ALL.to_vec());
    let prep = Prepared::new(&d, "income", c.k_dest).unwrap();
    for v in Variant::ALL {
        let m = train(&d, &c, v).unwrap();
        let p = Predictor::new(&m, &prep);
        for &o in prep.eligible.iter().take(25) {
            let dests = prep.candidates(o, 3, None).unwrap();
            assert_eq!(dests.len(), c.k_dest);
            let total = 100.0 + o as f64;
            let flows = p.predict_flows(o, &dests, total).unwrap();
            let s: f64 = flows.iter().sum();
            assert!((s - total).abs() < 1e-9 * total, "{v}: {s} vs {total}");
            assert!(flows.iter().all(|f| *f >= 0.0));
            let per_group = p.group_flows(o, &dests, total).unwrap();
            let g: f64 = per_group.iter().flatten().sum();
            assert!((g - total).abs() < 1e-9 * total);
        }
    }
}

#[test]
fn seeded_training_is_bitwise_repeatable() {
    let d = city();
    let c = cfg(vec![Variant::DgSV]);
    let a = train(&d, &c, Variant::DgSV).unwrap().to_json().unwrap();
    let b = train(&d, &c, Variant::DgSV).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    let back = GroupModelSet::from_json(&a).unwrap().to_json().unwrap();
    assert_eq!(a, back);

    let mut other = c.clone();
    other.seed = 8;
    let e = train(&d, &other, Variant::DgSV).unwrap().to_json().unwrap();
    assert_ne!(a, e);
}

#[test]
fn checkpoint_version_is_checked() {
    let d = city();
    let m = train(&d, &cfg(vec![Variant::G]), Variant::G).unwrap();
    let json = m.to_json().unwrap().replacen("\"version\":1", "\"version\":99", 1);
    assert!(GroupModelSet::from_json(&json).is_err());
}

#[test]
fn training_loss_falls() {
    let d = city();
    let mut c = cfg(vec![Variant::DgS]);
    c.epochs = 15;
    let m = train(&d, &c, Variant::DgS).unwrap();
    assert_eq!(m.loss_history.len(), 2);
    for h in &m.loss_history {
        assert_eq!(h.len(), 15);
        assert!(h.iter().all(|l| l.is_finite()));
        assert!(h[14] < h[0], "{h:?}");
    }
}

#[test]
fn splits_are_disjoint_and_seeded() {
    let d = city();
    let prep = Prepared::new(&d, "income", 12).unwrap();
    let s = prep.split(4, 0.5);
    assert!(s.train.iter().all(|o| !s.test.contains(o)));
    assert_eq!(s.train.len() + s.test.len(), prep.eligible.len());
    assert_eq!(prep.split(4, 0.5).train, s.train);
    assert_ne!(prep.split(5, 0.5).train, s.train);

    let o = prep.eligible[0];
    let must = *prep.universe.iter().find(|&&j| j != o).unwrap();
    let c = prep.candidates(o, 9, Some(must)).unwrap();
    assert!(c.contains(&must));
    assert!(!c.contains(&o));
    assert_eq!(c, prep.candidates(o, 9, Some(must)).unwrap());
}

#[test]
fn protocol_report_has_every_variant_and_decile() {
    let d = city();
    let mut c = cfg(vec![Variant::G, Variant::Dg]);
    c.runs = 2;
    let r = run_protocol(&d, &c, &mut |_| {}).unwrap();
    assert_eq!(r.report.runs.len(), 4);
    assert_eq!(r.report.means.len(), 2);
    assert_eq!(r.report.deciles.len(), 20);
    assert_eq!(r.models.len(), 2);
    for m in &r.report.means {
        assert!((0.0..=1.0).contains(&m.scores.cpc));
    }
    let mut a = Vec::new();
    r.report.write_metrics_csv(&mut a).unwrap();
    let again = run_protocol(&d, &c, &mut |_| {}).unwrap();
    let mut b = Vec::new();
    again.report.write_metrics_csv(&mut b).unwrap();
    assert_eq!(a, b);
}
