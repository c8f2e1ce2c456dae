//! Origin split, candidate sampling, fitting and held-out evaluation.

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureBuilder, FeatureSchema, Scaler, VisitorMixTable};
use super::gravity::{GravityModel, GravitySample};
use super::mlp::{deep_gravity_sizes, Adam, Mlp, LEAKY_SLOPE};
use super::{allocate, check_candidates, Variant};
use crate::data::{CityDataset, ProportionMatrix};
use crate::error::{Error, Result};
use crate::metrics::{decile_cpc, DecileRow, MetricReport, OriginEval, RunMetrics, Scores};
use crate::explain::{kmeans_background, BackgroundSet, DEFAULT_BACKGROUND};

pub const DEFAULT_K_DEST: usize = 30;
pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_RUNS: usize = 5;
pub const DEFAULT_LEARNING_RATE: f64 = 5e-4;
pub const DEFAULT_CLIP_NORM: f64 = 1.0;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub attribute: String,
    pub variants: Vec<Variant>,
    pub k_dest: usize,
    pub epochs: usize,
    pub runs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Global gradient-norm threshold per step; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub train_fraction: f64,
}

impl TrainConfig {
    pub fn new(attribute: impl Into<String>, variants: Vec<Variant>) -> Self {
        Self {
            attribute: attribute.into(),
            variants,
            k_dest: DEFAULT_K_DEST,
            epochs: DEFAULT_EPOCHS,
            runs: DEFAULT_RUNS,
            seed: 0,
            learning_rate: DEFAULT_LEARNING_RATE,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            train_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.k_dest < 2 {
            return bad("k_dest must be at least 2");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.runs < 1 {
            return bad("runs must be at least 1");
        }
        if self.variants.is_empty() {
            return bad("no variants requested");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train fraction must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Dataset-level quantities shared by every run and variant.
pub struct Prepared<'a> {
    pub dataset: &'a CityDataset,
    pub theta: ProportionMatrix,
    pub visitors: VisitorMixTable,
    /// Admissible destinations: positive population and a visitor mix for
    /// every attribute.
    pub universe: Vec<usize>,
    in_universe: Vec<bool>,
    /// Origins with defined group proportions, positive population and at
    /// least one observed flow into the universe.
    pub eligible: Vec<usize>,
    pub k_dest: usize,
}

impl<'a> Prepared<'a> {
    pub fn new(dataset: &'a CityDataset, attribute: &str, k_dest: usize) -> Result<Self> {
        let theta = dataset.group_proportions(attribute)?;
        let visitors = VisitorMixTable::from_dataset(dataset)?;
        let in_universe: Vec<bool> = (0..dataset.len())
            .map(|j| dataset.cbg(j).population > 0 && visitors.mix.iter().all(|m| m[j].is_some()))
            .collect();
        let universe: Vec<usize> = (0..dataset.len()).filter(|&j| in_universe[j]).collect();
        let eligible: Vec<usize> = (0..dataset.len())
            .filter(|&i| {
                theta.is_defined(i)
                    && dataset.cbg(i).population > 0
                    && universe.len() - usize::from(in_universe[i]) >= k_dest
                    && dataset
                        .flows()
                        .out_edges(i)
                        .iter()
                        .any(|e| e.dest != i && e.weight > 0.0 && in_universe[e.dest])
            })
            .collect();
        if eligible.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "{} origins with demographics, outflow and {} candidate destinations",
                eligible.len(),
                k_dest
            )));
        }
        Ok(Self {
            dataset,
            theta,
            visitors,
            universe,
            in_universe,
            eligible,
            k_dest,
        })
    }

    pub fn is_admissible(&self, j: usize) -> bool {
        self.in_universe[j]
    }

    pub fn split(&self, seed: u64, train_fraction: f64) -> Split {
        let mut order = self.eligible.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        order.shuffle(&mut rng);
        let n = order.len();
        let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Split { train, test }
    }

    /// `k_dest` candidate destinations for `origin`, in index order. True
    /// destinations come first: if there are at least `k_dest` of them the
    /// set is a uniform sample of them, otherwise all are kept and the rest
    /// is drawn uniformly from the remaining admissible destinations.
    /// `must_include` is always part of the set.
    pub fn candidates(&self, origin: usize, seed: u64, must_include: Option<usize>) -> Result<Vec<usize>> {
        let k = self.k_dest;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 + origin as u64);
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        if let Some(t) = must_include {
            if t == origin {
                return Err(Error::SelfPair(self.dataset.cbg(origin).id.clone()));
            }
            chosen.push(t);
        }
        let truth: Vec<usize> = self
            .dataset
            .flows()
            .out_edges(origin)
            .iter()
            .filter(|e| e.dest != origin && e.weight > 0.0 && self.in_universe[e.dest] && Some(e.dest) != must_include)
            .map(|e| e.dest)
            .collect();
        let need = k - chosen.len();
        if truth.len() >= need {
            chosen.extend(truth.choose_multiple(&mut rng, need));
        } else {
            chosen.extend(&truth);
            let rest: Vec<usize> = self
                .universe
                .iter()
                .copied()
                .filter(|&j| j != origin && !chosen.contains(&j))
                .collect();
            let need = k - chosen.len();
            if rest.len() < need {
                return Err(Error::InsufficientData(format!(
                    "only {} admissible destinations for `{}`",
                    rest.len() + chosen.len(),
                    self.dataset.cbg(origin).id
                )));
            }
            chosen.extend(rest.choose_multiple(&mut rng, need));
        }
        chosen.sort_unstable();
        Ok(chosen)
    }

    pub fn actual(&self, origin: usize, dests: &[usize]) -> Vec<f64> {
        dests.iter().map(|&j| self.dataset.flows().weight(origin, j)).collect()
    }

    fn origin_sets(&self, origins: &[usize], seed: u64) -> Result<Vec<OriginSet>> {
        origins
            .iter()
            .map(|&o| {
                let dests = self.candidates(o, seed, None)?;
                let actual = self.actual(o, &dests);
                let total = actual.iter().sum();
                Ok(OriginSet {
                    origin: o,
                    dests,
                    actual,
                    total,
                })
            })
            .collect()
    }

    fn raw_rows(&self, schema: &FeatureSchema, sets: &[OriginSet]) -> Result<Vec<Vec<Vec<f64>>>> {
        let b = FeatureBuilder::new(self.dataset, schema, Some(&self.visitors));
        sets.iter().map(|s| b.rows(s.origin, &s.dests)).collect()
    }

    fn gravity_samples(&self, origins: &[usize]) -> Vec<GravitySample> {
        let d = self.dataset;
        origins
            .iter()
            .flat_map(|&o| {
                d.flows()
                    .out_edges(o)
                    .iter()
                    .filter(move |e| e.dest != o && self.in_universe[e.dest])
                    .map(move |e| GravitySample {
                        p_origin: d.cbg(o).population as f64,
                        p_dest: d.cbg(e.dest).population as f64,
                        distance_km: d.distance_km(o, e.dest),
                        flow: e.weight,
                    })
            })
            .collect()
    }
}

struct OriginSet {
    origin: usize,
    dests: Vec<usize>,
    actual: Vec<f64>,
    total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowModel {
    Gravity(GravityModel),
    Deep {
        schema: FeatureSchema,
        scaler: Scaler,
        nets: Vec<Mlp<f32>>,
        /// K-means summary of the raw training rows, for attributions.
        background: BackgroundSet,
    },
}

/// A trained variant: a gravity law, or one network (or one per group)
/// with its feature scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupModelSet {
    pub version: u32,
    pub variant: Variant,
    pub attribute: String,
    pub groups: Vec<String>,
    pub k_dest: usize,
    pub seed: u64,
    pub model: FlowModel,
    /// Mean weighted training loss per epoch, per network.
    pub loss_history: Vec<Vec<f64>>,
}

impl GroupModelSet {
    pub fn schema(&self) -> Option<&FeatureSchema> {
        match &self.model {
            FlowModel::Deep { schema, .. } => Some(schema),
            FlowModel::Gravity(_) => None,
        }
    }

    pub fn n_nets(&self) -> usize {
        match &self.model {
            FlowModel::Deep { nets, .. } => nets.len(),
            FlowModel::Gravity(_) => 1,
        }
    }

    /// Raw-feature scorer for network `g` (the group's network for
    /// segmented variants, the shared one otherwise).
    pub fn scorer(&self, g: usize) -> Option<NetScorer<'_>> {
        match &self.model {
            FlowModel::Deep { scaler, nets, .. } => Some(NetScorer {
                scaler,
                net: &nets[g.min(nets.len() - 1)],
            }),
            FlowModel::Gravity(_) => None,
        }
    }

    pub fn background(&self) -> Option<&BackgroundSet> {
        match &self.model {
            FlowModel::Deep { background, .. } => Some(background),
            FlowModel::Gravity(_) => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| Error::Serde(e.to_string()))?;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::SchemaMismatch {
                expected: format!("checkpoint version {CHECKPOINT_VERSION}"),
                found: m.version.to_string(),
            });
        }
        Ok(m)
    }
}

/// Scores raw (unscaled) feature rows with one network.
#[derive(Clone, Copy)]
pub struct NetScorer<'a> {
    pub scaler: &'a Scaler,
    pub net: &'a Mlp<f32>,
}

impl NetScorer<'_> {
    pub fn score_rows(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        if rows.is_empty() {
            return Vec::new();
        }
        rows.chunks(SCORE_BLOCK)
            .flat_map(|c| {
                let x: Array2<f32> = self.scaler.transform(c);
                self.net.forward(x.view()).into_iter().map(|v| v as f64)
            })
            .collect()
    }
}

/// Rows per forward pass when scoring many rows.
const SCORE_BLOCK: usize = 256;

/// A trained model bound to its dataset context.
pub struct Predictor<'a> {
    pub model: &'a GroupModelSet,
    pub dataset: &'a CityDataset,
    pub visitors: &'a VisitorMixTable,
    pub theta: &'a ProportionMatrix,
    pub poi_override: Option<(usize, &'a [f64])>,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a GroupModelSet, prep: &'a Prepared<'a>) -> Self {
        Self {
            model,
            dataset: prep.dataset,
            visitors: &prep.visitors,
            theta: &prep.theta,
            poi_override: None,
        }
    }

    pub fn builder(&self) -> Option<FeatureBuilder<'_>> {
        let schema = self.model.schema()?;
        let mut b = FeatureBuilder::new(self.dataset, schema, Some(self.visitors));
        if let Some((c, d)) = self.poi_override {
            b = b.with_override(c, d);
        }
        Some(b)
    }

    /// Pre-softmax scores of network `g` for each destination.
    pub fn scores(&self, g: usize, origin: usize, dests: &[usize]) -> Result<Vec<f64>> {
        match &self.model.model {
            FlowModel::Gravity(gm) => {
                let d = self.dataset;
                let po = d.cbg(origin).population as f64;
                Ok(dests
                    .iter()
                    .map(|&j| gm.score(po, d.cbg(j).population as f64, d.distance_km(origin, j)))
                    .collect())
            }
            FlowModel::Deep { .. } => {
                let rows = self.builder().expect("deep model has a schema").rows(origin, dests)?;
                Ok(self.model.scorer(g).expect("deep").score_rows(&rows))
            }
        }
    }

    /// Predicted flow per group and destination; sums over groups equal the
    /// total prediction.
    pub fn group_flows(&self, origin: usize, dests: &[usize], total: f64) -> Result<Vec<Vec<f64>>> {
        check_candidates(origin, dests, self.model.k_dest, |i| self.dataset.cbg(i).id.clone())?;
        let theta = self
            .theta
            .row(origin)
            .ok_or_else(|| Error::InsufficientData(format!("no demographics for `{}`", self.dataset.cbg(origin).id)))?;
        if self.model.variant.segmented() {
            theta
                .iter()
                .enumerate()
                .map(|(g, t)| Ok(allocate(&self.scores(g, origin, dests)?, t * total)))
                .collect()
        } else {
            let w = allocate(&self.scores(0, origin, dests)?, total);
            Ok(theta.iter().map(|t| w.iter().map(|x| t * x).collect()).collect())
        }
    }

    /// Flow prediction over a candidate set; sums to `total`.
    pub fn predict_flows(&self, origin: usize, dests: &[usize], total: f64) -> Result<Vec<f64>> {
        check_candidates(origin, dests, self.model.k_dest, |i| self.dataset.cbg(i).id.clone())?;
        if self.model.variant.segmented() {
            let per = self.group_flows(origin, dests, total)?;
            Ok((0..dests.len()).map(|j| per.iter().map(|g| g[j]).sum()).collect())
        } else {
            Ok(allocate(&self.scores(0, origin, dests)?, total))
        }
    }
}

/// Progress notifications from a protocol run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Progress {
    pub run: usize,
    pub runs: usize,
    pub variant: Variant,
    pub net: usize,
    pub epoch: usize,
    pub epochs: usize,
}

struct Batch {
    x: Array2<f32>,
    fracs: Vec<f64>,
}

/// Per-origin weights `∝ share · total`, normalised to mean one over the
/// origins that carry any flow.
fn normalised_weights(raw: Vec<f64>) -> Vec<f64> {
    let pos: Vec<f64> = raw.iter().copied().filter(|w| *w > 0.0).collect();
    if pos.is_empty() {
        return raw;
    }
    let mean = pos.iter().sum::<f64>() / pos.len() as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

fn fit_net(
    batches: &[Batch],
    weights: &[f64],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut on_epoch: impl FnMut(usize),
) -> Result<(Mlp<f32>, Vec<f64>)> {
    let input = batches[0].x.ncols();
    let mut net = Mlp::<f32>::new(&deep_gravity_sizes(input), LEAKY_SLOPE, rng);
    let mut opt = Adam::new(&net, cfg.learning_rate);
    opt.clip_norm = cfg.clip_norm;
    let mut grads = net.zero_grads();
    let mut order: Vec<usize> = (0..batches.len()).filter(|&i| weights[i] > 0.0).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for &i in &order {
            let b = &batches[i];
            total += net.train_step(b.x.view(), &b.fracs, weights[i], &mut opt, &mut grads);
        }
        let mean = total / order.len().max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::DivergedLoss { epoch });
        }
        history.push(mean);
        on_epoch(epoch);
    }
    Ok((net, history))
}

fn variant_stream(v: Variant) -> u64 {
    Variant::ALL.iter().position(|x| *x == v).unwrap() as u64
}

/// Fits one variant on the training origins of a split.
fn fit_variant(
    prep: &Prepared,
    cfg: &TrainConfig,
    variant: Variant,
    seed: u64,
    train: &[OriginSet],
    train_origins: &[usize],
    progress: &mut dyn FnMut(usize, usize),
) -> Result<GroupModelSet> {
    let attr = prep.dataset.attribute(&cfg.attribute)?;
    let mut out = GroupModelSet {
        version: CHECKPOINT_VERSION,
        variant,
        attribute: cfg.attribute.clone(),
        groups: attr.groups.clone(),
        k_dest: prep.k_dest,
        seed,
        model: FlowModel::Gravity(GravityModel {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            intercept: 0.0,
        }),
        loss_history: Vec::new(),
    };
    if !variant.is_deep() {
        out.model = FlowModel::Gravity(GravityModel::fit(&prep.gravity_samples(train_origins))?);
        return Ok(out);
    }
    let schema = FeatureSchema::for_dataset(prep.dataset, variant.with_visitors());
    let raw = prep.raw_rows(&schema, train)?;
    let scaler = Scaler::fit(&schema, raw.iter().flatten().map(|r| r.as_slice()))?;
    let batches: Vec<Batch> = train
        .iter()
        .zip(&raw)
        .map(|(s, rows)| Batch {
            x: scaler.transform(rows),
            fracs: s.actual.iter().map(|w| w / s.total).collect(),
        })
        .collect();
    let shares: Vec<Vec<f64>> = if variant.segmented() {
        (0..attr.n())
            .map(|g| train.iter().map(|s| prep.theta.row(s.origin).unwrap()[g]).collect())
            .collect()
    } else {
        vec![vec![1.0; train.len()]]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nets = Vec::with_capacity(shares.len());
    for (g, share) in shares.iter().enumerate() {
        rng.set_stream(1000 + 64 * variant_stream(variant) + g as u64);
        let weights = normalised_weights(train.iter().zip(share).map(|(s, t)| s.total * t).collect());
        let (net, hist) = fit_net(&batches, &weights, cfg, &mut rng, |e| progress(g, e))?;
        nets.push(net);
        out.loss_history.push(hist);
    }
    let all_rows: Vec<Vec<f64>> = raw.into_iter().flatten().collect();
    let background = kmeans_background(&all_rows, DEFAULT_BACKGROUND, seed)?;
    out.model = FlowModel::Deep {
        schema,
        scaler,
        nets,
        background,
    };
    Ok(out)
}

/// Trains one variant with the first run's seed on its training split.
pub fn train(dataset: &CityDataset, cfg: &TrainConfig, variant: Variant) -> Result<GroupModelSet> {
    cfg.validate()?;
    let prep = Prepared::new(dataset, &cfg.attribute, cfg.k_dest)?;
    train_prepared(&prep, cfg, variant, 0, &mut |_| {})
}

pub fn train_prepared(
    prep: &Prepared,
    cfg: &TrainConfig,
    variant: Variant,
    run: usize,
    progress: &mut dyn FnMut(&Progress),
) -> Result<GroupModelSet> {
    let seed = cfg.run_seed(run);
    let split = prep.split(seed, cfg.train_fraction);
    let train = prep.origin_sets(&split.train, seed)?;
    fit_variant(prep, cfg, variant, seed, &train, &split.train, &mut |net, epoch| {
        progress(&Progress {
            run,
            runs: cfg.runs,
            variant,
            net,
            epoch,
            epochs: cfg.epochs,
        })
    })
}

/// Result of the full experiment protocol.
pub struct ProtocolResult {
    pub report: MetricReport,
    /// Models of the first run, in `cfg.variants` order.
    pub models: Vec<GroupModelSet>,
}

/// Trains every requested variant for every run on a fresh 50/50 origin
/// split (shared across variants within a run) and scores held-out origins.
pub fn run_protocol(
    dataset: &CityDataset,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&Progress),
) -> Result<ProtocolResult> {
    cfg.validate()?;
    let prep = Prepared::new(dataset, &cfg.attribute, cfg.k_dest)?;
    let mut report = MetricReport::default();
    let mut models = Vec::new();
    let mut decile_sums = vec![[0.0; 10]; cfg.variants.len()];
    for run in 0..cfg.runs {
        let seed = cfg.run_seed(run);
        let split = prep.split(seed, cfg.train_fraction);
        let train = prep.origin_sets(&split.train, seed)?;
        let test = prep.origin_sets(&split.test, seed)?;
        for (vi, &variant) in cfg.variants.iter().enumerate() {
            let model = fit_variant(&prep, cfg, variant, seed, &train, &split.train, &mut |net, epoch| {
                progress(&Progress {
                    run,
                    runs: cfg.runs,
                    variant,
                    net,
                    epoch,
                    epochs: cfg.epochs,
                })
            })?;
            let p = Predictor::new(&model, &prep);
            let evals = test
                .iter()
                .map(|s| {
                    Ok(OriginEval {
                        population: dataset.cbg(s.origin).population,
                        pred: p.predict_flows(s.origin, &s.dests, s.total)?,
                        actual: s.actual.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let pred: Vec<f64> = evals.iter().flat_map(|e| e.pred.iter().copied()).collect();
            let actual: Vec<f64> = evals.iter().flat_map(|e| e.actual.iter().copied()).collect();
            report.runs.push(RunMetrics {
                variant: variant.label().to_string(),
                run,
                scores: Scores::compute(&pred, &actual)?,
            });
            let dec = decile_cpc(&evals)?;
            for (acc, v) in decile_sums[vi].iter_mut().zip(dec) {
                *acc += v;
            }
            if run == 0 {
                models.push(model);
            }
        }
    }
    for (vi, &variant) in cfg.variants.iter().enumerate() {
        let runs: Vec<Scores> = report
            .runs
            .iter()
            .filter(|r| r.variant == variant.label())
            .map(|r| r.scores)
            .collect();
        report.means.push(RunMetrics {
            variant: variant.label().to_string(),
            run: cfg.runs,
            scores: Scores::mean(&runs),
        });
        for (d, sum) in decile_sums[vi].iter().enumerate() {
            report.deciles.push(DecileRow {
                variant: variant.label().to_string(),
                decile: d + 1,
                cpc: sum / cfg.runs as f64,
            });
        }
    }
    Ok(ProtocolResult { report, models })
}
