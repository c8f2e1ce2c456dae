//! Seeded synthetic cities with known generating law, and brute-force
//! oracles for tests.

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{
    default_poi_types, Boundary, CbgRecord, CityDataset, Edge, GroupSchema, LatLon, MobilityGraph, EARTH_RADIUS_KM,
};
use crate::error::{Error, Result};

const ORIGIN_LAT: f64 = 40.0;
const ORIGIN_LON: f64 = -75.0;
const MIN_PAIR_KM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_cbgs: usize,
    /// Side of the square city in km.
    pub extent_km: f64,
    pub n_groups: usize,
    /// Vertical stripes across the grid, assigned to groups in turn.
    pub stripes: usize,
    pub attribute: String,
    /// Weight of the block one-hot against Dirichlet noise in θ.
    pub lambda: f64,
    /// Preference for destinations whose visitors share the mover's group.
    pub homophily: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub poi_types: Vec<String>,
    /// Mean density per POI type.
    pub poi_intensity: Vec<f64>,
    /// Log-normal spread of POI densities.
    pub poi_sigma: f64,
    /// Log-attraction of group d to standardised POI type t.
    pub affinity: Vec<Vec<f64>>,
    /// How strongly local POI mix follows the resident groups' tastes.
    pub poi_coupling: f64,
    pub population_range: (u64, u64),
    /// Expected trips per resident.
    pub trips_per_resident: f64,
    pub max_trip_km: Option<f64>,
}

impl SynthConfig {
    pub fn new(seed: u64, n_cbgs: usize, n_groups: usize) -> Self {
        let poi_types = default_poi_types();
        let n_poi = poi_types.len();
        Self {
            seed,
            n_cbgs,
            extent_km: (n_cbgs as f64).sqrt() * 0.8,
            n_groups,
            stripes: n_groups,
            attribute: "income".into(),
            lambda: 0.5,
            homophily: 0.5,
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
            poi_types,
            poi_intensity: vec![5.0; n_poi],
            poi_sigma: 0.6,
            affinity: vec![vec![0.0; n_poi]; n_groups],
            poi_coupling: 0.0,
            population_range: (600, 3000),
            trips_per_resident: 1.0,
            max_trip_km: None,
        }
    }

    /// The city used for the variant comparison: two groups with opposite
    /// POI tastes over four alternating stripes, homophily 0.7, and POI
    /// placement independent of the residents.
    pub fn crafted(seed: u64) -> Self {
        let mut c = Self::new(seed, 300, 2);
        c.lambda = 0.8;
        c.homophily = 0.7;
        c.gamma = 1.8;
        let n_poi = c.poi_types.len();
        let taste: Vec<f64> = (0..n_poi).map(|t| if t % 2 == 0 { 0.9 } else { -0.9 }).collect();
        c.affinity = vec![taste.clone(), taste.iter().map(|v| -v).collect()];
        c.stripes = 4;
        c.trips_per_resident = 2.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_cbgs < 4 {
            return bad(format!("n_cbgs = {} (need at least 4)", self.n_cbgs));
        }
        if self.n_groups < 2 {
            return bad("need at least 2 groups".into());
        }
        if self.stripes < self.n_groups {
            return bad(format!("{} stripes cannot hold {} groups", self.stripes, self.n_groups));
        }
        for (name, v) in [("lambda", self.lambda), ("homophily", self.homophily)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.extent_km > 0.0) || !(self.trips_per_resident >= 0.0) {
            return bad("extent and trip volume must be positive".into());
        }
        let n_poi = self.poi_types.len();
        if n_poi == 0 || self.poi_intensity.len() != n_poi || self.poi_intensity.iter().any(|x| !(*x > 0.0)) {
            return bad("one positive intensity per POI type required".into());
        }
        if self.affinity.len() != self.n_groups || self.affinity.iter().any(|r| r.len() != n_poi) {
            return bad(format!("affinity must be {} x {}", self.n_groups, n_poi));
        }
        let (lo, hi) = self.population_range;
        if lo == 0 || lo > hi {
            return bad("population range must be positive and ordered".into());
        }
        if ![self.alpha, self.beta, self.gamma, self.poi_sigma, self.poi_coupling]
            .iter()
            .all(|x| x.is_finite())
        {
            return bad("non-finite law parameter".into());
        }
        Ok(())
    }
}

/// Everything needed to recompute the expected flows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    /// Spatial block (dominant group) of each CBG.
    pub block: Vec<usize>,
    /// Realised group proportions (from the integer counts).
    pub theta: Vec<Vec<f64>>,
    /// Multiplicative POI attraction `A_d(j)`, per group then CBG.
    pub attraction: Vec<Vec<f64>>,
    /// Homophily factor `H_d(j)`, per group then CBG.
    pub homophily_factor: Vec<Vec<f64>>,
    pub scale: f64,
    pub distance_km: Vec<f64>,
    pub population: Vec<f64>,
}

impl GroundTruth {
    fn n(&self) -> usize {
        self.population.len()
    }

    fn pair_base(&self, i: usize, j: usize) -> f64 {
        let n = self.n();
        let d = self.distance_km[i * n + j];
        if i == j || self.config.max_trip_km.is_some_and(|m| d > m) {
            return 0.0;
        }
        let c = &self.config;
        self.population[i].powf(c.alpha) * self.population[j].powf(c.beta) * d.max(MIN_PAIR_KM).powf(-c.gamma)
    }

    /// Expected flow of group `d` from `i` to `j`.
    pub fn expected_group_flow(&self, d: usize, i: usize, j: usize) -> f64 {
        self.scale * self.theta[i][d] * self.pair_base(i, j) * self.homophily_factor[d][j] * self.attraction[d][j]
    }

    pub fn expected_flow(&self, i: usize, j: usize) -> f64 {
        (0..self.config.n_groups).map(|d| self.expected_group_flow(d, i, j)).sum()
    }
}

fn km_to_latlon(x: f64, y: f64) -> (f64, f64) {
    let deg = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
    (ORIGIN_LAT + y / deg, ORIGIN_LON + x / (deg * ORIGIN_LAT.to_radians().cos()))
}

/// Counts summing to `total` in proportion to `theta` (largest remainder).
fn apportion(theta: &[f64], total: u64) -> Vec<u64> {
    let exact: Vec<f64> = theta.iter().map(|t| t * total as f64).collect();
    let mut counts: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let mut left = total - counts.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..theta.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Generates a city on a jittered square grid. Groups take turns over
/// vertical stripes; θ mixes the stripe's one-hot with Dirichlet noise by `lambda`.
/// Group-d flows follow `K θ_id p_i^α p_j^β d^−γ H_d(j) A_d(j)` and the
/// observed flow is a Poisson draw of the sum over groups.
pub fn generate_city(cfg: &SynthConfig) -> Result<(CityDataset, GroundTruth)> {
    cfg.validate()?;
    let n = cfg.n_cbgs;
    let g = cfg.n_groups;
    let n_poi = cfg.poi_types.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = (n as f64).sqrt().ceil() as usize;
    let cell = cfg.extent_km / side as f64;
    let half = 0.45 * cell;
    let unit_gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
    let normal = Normal::new(0.0, 1.0).expect("valid normal");

    let mut block = Vec::with_capacity(n);
    let mut theta = Vec::with_capacity(n);
    let mut cbgs = Vec::with_capacity(n);
    let mut population = Vec::with_capacity(n);
    for k in 0..n {
        let (row, col) = (k / side, k % side);
        let cx = (col as f64 + 0.5) * cell + rng.random_range(-0.25..0.25) * cell;
        let cy = (row as f64 + 0.5) * cell + rng.random_range(-0.25..0.25) * cell;
        let b = (col * cfg.stripes / side).min(cfg.stripes - 1) % g;
        let noise: Vec<f64> = (0..g).map(|_| unit_gamma.sample(&mut rng)).collect();
        let ns: f64 = noise.iter().sum();
        let mix: Vec<f64> = (0..g)
            .map(|d| cfg.lambda * f64::from(u8::from(d == b)) + (1.0 - cfg.lambda) * noise[d] / ns)
            .collect();
        let pop = rng.random_range(cfg.population_range.0..=cfg.population_range.1);
        let counts = apportion(&mix, pop);
        let realised: Vec<f64> = counts.iter().map(|&c| c as f64 / pop as f64).collect();
        let corners = [(-half, -half), (half, -half), (half, half), (-half, half), (-half, -half)];
        let ring = corners
            .iter()
            .map(|(dx, dy)| {
                let (lat, lon) = km_to_latlon(cx + dx, cy + dy);
                [lon, lat]
            })
            .collect();
        let boundary = Boundary {
            polygons: vec![vec![ring]],
        };
        let centroid = boundary.centroid().unwrap_or_else(|| {
            let (lat, lon) = km_to_latlon(cx, cy);
            LatLon::new(lat, lon)
        });
        let poi_density = (0..n_poi)
            .map(|t| {
                let taste: f64 = (0..g).map(|d| realised[d] * cfg.affinity[d][t]).sum();
                let v = cfg.poi_intensity[t] * (cfg.poi_sigma * normal.sample(&mut rng) + cfg.poi_coupling * taste).exp();
                // fixed precision keeps CSV round trips exact and readable
                (v * 1e6).round() / 1e6
            })
            .collect();
        cbgs.push(CbgRecord {
            id: format!("{:012}", 420_000_000_000u64 + k as u64),
            population: pop,
            centroid,
            boundary: Some(boundary),
            group_counts: vec![counts],
            poi_density,
        });
        block.push(b);
        theta.push(realised);
        population.push(pop as f64);
    }

    let mut distance_km = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = crate::data::centroid_distance(&cbgs[i], &cbgs[j])?;
            distance_km[i * n + j] = d;
            distance_km[j * n + i] = d;
        }
    }

    // standardised log POI densities drive group attraction
    let mut attraction = vec![vec![0.0; n]; g];
    for t in 0..n_poi {
        let logs: Vec<f64> = cbgs.iter().map(|c| c.poi_density[t].max(1e-9).ln()).collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let sd = (logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
        for (j, l) in logs.iter().enumerate() {
            for d in 0..g {
                attraction[d][j] += cfg.affinity[d][t] * (l - mean) / sd;
            }
        }
    }
    for row in &mut attraction {
        for a in row.iter_mut() {
            *a = a.exp();
        }
    }

    let mut truth = GroundTruth {
        config: cfg.clone(),
        block,
        theta,
        attraction,
        homophily_factor: vec![vec![1.0; n]; g],
        scale: 1.0,
        distance_km,
        population,
    };

    // visitor mix without homophily sets each destination's H_d
    let mut inflow = vec![vec![0.0; n]; g];
    for i in 0..n {
        for j in 0..n {
            let base = truth.pair_base(i, j);
            if base == 0.0 {
                continue;
            }
            for (d, row) in inflow.iter_mut().enumerate() {
                row[j] += truth.theta[i][d] * base * truth.attraction[d][j];
            }
        }
    }
    for j in 0..n {
        let tot: f64 = (0..g).map(|d| inflow[d][j]).sum();
        for d in 0..g {
            let pi0 = if tot > 0.0 { inflow[d][j] / tot } else { 1.0 / g as f64 };
            truth.homophily_factor[d][j] = 1.0 + cfg.homophily * (g as f64 * pi0 - 1.0);
        }
    }
    let mut unscaled = 0.0;
    for i in 0..n {
        for j in 0..n {
            unscaled += truth.expected_flow(i, j);
        }
    }
    let target = cfg.trips_per_resident * truth.population.iter().sum::<f64>();
    truth.scale = if unscaled > 0.0 { target / unscaled } else { 0.0 };

    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let mu = truth.expected_flow(i, j);
            if mu <= 0.0 {
                continue;
            }
            let w: f64 = Poisson::new(mu).expect("positive mean").sample(&mut rng);
            if w > 0.0 {
                edges.push(Edge { origin: i, dest: j, weight: w });
            }
        }
    }
    let nodes = cbgs.iter().map(|c| c.id.clone()).collect();
    let flows = MobilityGraph::new(nodes, edges)?;
    let groups = (0..g).map(|d| format!("g{d}")).collect();
    let dataset = CityDataset::new(
        cbgs,
        flows,
        vec![GroupSchema::new(cfg.attribute.clone(), groups)?],
        cfg.poi_types.clone(),
    )?;
    Ok((dataset, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(apportion(&[0.3, 0.7], 10), vec![3, 7]);
        assert_eq!(apportion(&[1.0 / 3.0; 3], 100).iter().sum::<u64>(), 100);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = SynthConfig::new(0, 3, 2);
        assert!(matches!(generate_city(&c), Err(Error::InvalidConfig(_))));
        c.n_cbgs = 16;
        c.lambda = 1.5;
        assert!(generate_city(&c).is_err());
    }

    #[test]
    fn same_seed_same_city() {
        let c = SynthConfig::new(9, 25, 2);
        let (a, _) = generate_city(&c).unwrap();
        let (b, _) = generate_city(&c).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let (other, _) = generate_city(&SynthConfig::new(10, 25, 2)).unwrap();
        assert_ne!(a.content_hash(), other.content_hash());
    }
}
