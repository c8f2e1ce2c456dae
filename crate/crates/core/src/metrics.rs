//! Flow-prediction accuracy metrics and the population-decile breakdown.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

fn non_negative(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !(*x >= 0.0)) {
        Some(i) => Err(Error::NegativeEntry(i)),
        None => Ok(()),
    }
}

/// Common Part of Commuters: `2 Σ min(ŵ, w) / (Σ ŵ + Σ w)`.
pub fn cpc(pred: &[f64], actual: &[f64]) -> Result<f64> {
    same_len(pred, actual)?;
    non_negative(pred)?;
    non_negative(actual)?;
    let common: f64 = pred.iter().zip(actual).map(|(p, a)| p.min(*a)).sum();
    let total: f64 = pred.iter().sum::<f64>() + actual.iter().sum::<f64>();
    if total <= 0.0 {
        return Err(Error::BothZero);
    }
    Ok((2.0 * common / total).clamp(0.0, 1.0))
}

fn kl_to_mid(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, mi)| pi * (pi / mi).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats. Inputs are normalised to sum to one.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    non_negative(p)?;
    non_negative(q)?;
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    if sp <= 0.0 || sq <= 0.0 {
        return Err(Error::BothZero);
    }
    let p: Vec<f64> = p.iter().map(|x| x / sp).collect();
    let q: Vec<f64> = q.iter().map(|x| x / sq).collect();
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    let d = 0.5 * kl_to_mid(&p, &m) + 0.5 * kl_to_mid(&q, &m);
    Ok(d.clamp(0.0, std::f64::consts::LN_2))
}

pub fn pearson(pred: &[f64], actual: &[f64]) -> Result<f64> {
    same_len(pred, actual)?;
    if pred.len() < 2 {
        return Err(Error::ConstantVector);
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let ma = actual.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, a) in pred.iter().zip(actual) {
        let (dp, da) = (p - mp, a - ma);
        sxy += dp * da;
        sxx += dp * dp;
        syy += da * da;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantVector);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    same_len(pred, actual)?;
    if pred.is_empty() {
        return Err(Error::LengthMismatch(0, 0));
    }
    let sse: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// RMSE and RMSE over the range of `actual`. A zero range yields
/// `ZeroRange` carrying the RMSE.
pub fn rmse_nrmse(pred: &[f64], actual: &[f64]) -> Result<(f64, f64)> {
    let r = rmse(pred, actual)?;
    let (lo, hi) = actual
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)));
    if hi <= lo {
        return Err(Error::ZeroRange { rmse: r });
    }
    Ok((r, r / (hi - lo)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub cpc: f64,
    pub jsd: f64,
    pub pearson: f64,
    pub rmse: f64,
    pub nrmse: f64,
}

impl Scores {
    /// All five metrics. Undefined Pearson or NRMSE (constant inputs) are
    /// reported as NaN rather than failing the whole evaluation.
    pub fn compute(pred: &[f64], actual: &[f64]) -> Result<Self> {
        let cpc = cpc(pred, actual)?;
        let jsd = jsd(pred, actual)?;
        let pearson = match pearson(pred, actual) {
            Err(Error::ConstantVector) => f64::NAN,
            r => r?,
        };
        let (rmse, nrmse) = match rmse_nrmse(pred, actual) {
            Err(Error::ZeroRange { rmse }) => (rmse, f64::NAN),
            r => r?,
        };
        Ok(Self { cpc, jsd, pearson, rmse, nrmse })
    }

    pub fn mean(all: &[Scores]) -> Self {
        let n = all.len() as f64;
        let avg = |f: fn(&Scores) -> f64| all.iter().map(f).sum::<f64>() / n;
        Self {
            cpc: avg(|s| s.cpc),
            jsd: avg(|s| s.jsd),
            pearson: avg(|s| s.pearson),
            rmse: avg(|s| s.rmse),
            nrmse: avg(|s| s.nrmse),
        }
    }
}

/// Sizes of ten equal-count bins over `n` items, the remainder going to
/// the lowest bins.
pub fn decile_sizes(n: usize) -> Result<[usize; 10]> {
    if n < 10 {
        return Err(Error::TooFewCbgs { needed: 10, found: n });
    }
    let mut sizes = [n / 10; 10];
    for s in sizes.iter_mut().take(n % 10) {
        *s += 1;
    }
    Ok(sizes)
}

/// Splits item indices into ten population bins, smallest population first.
/// Ties keep input order.
pub fn decile_bins(populations: &[u64]) -> Result<Vec<Vec<usize>>> {
    let sizes = decile_sizes(populations.len())?;
    let mut order: Vec<usize> = (0..populations.len()).collect();
    order.sort_by_key(|&i| populations[i]);
    let mut bins = Vec::with_capacity(10);
    let mut start = 0;
    for s in sizes {
        bins.push(order[start..start + s].to_vec());
        start += s;
    }
    Ok(bins)
}

/// One evaluated origin: its population and the predicted and actual flows
/// over its candidate destinations.
#[derive(Clone, Debug)]
pub struct OriginEval {
    pub population: u64,
    pub pred: Vec<f64>,
    pub actual: Vec<f64>,
}

/// CPC within each population decile, pooling the candidate pairs of the
/// origins in a bin.
pub fn decile_cpc(origins: &[OriginEval]) -> Result<[f64; 10]> {
    let pops: Vec<u64> = origins.iter().map(|o| o.population).collect();
    let bins = decile_bins(&pops)?;
    let mut out = [0.0; 10];
    for (slot, bin) in out.iter_mut().zip(bins) {
        let pred: Vec<f64> = bin.iter().flat_map(|&i| origins[i].pred.iter().copied()).collect();
        let actual: Vec<f64> = bin.iter().flat_map(|&i| origins[i].actual.iter().copied()).collect();
        *slot = cpc(&pred, &actual).unwrap_or(0.0);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: String,
    pub run: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    pub variant: String,
    pub decile: usize,
    pub cpc: f64,
}

/// Per-run metrics for every variant plus run means and the decile report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub runs: Vec<RunMetrics>,
    pub means: Vec<RunMetrics>,
    pub deciles: Vec<DecileRow>,
}

impl MetricReport {
    pub fn mean_of(&self, variant: &str) -> Option<&Scores> {
        self.means.iter().find(|m| m.variant == variant).map(|m| &m.scores)
    }

    /// `variant,run,cpc,jsd,pearson,rmse,nrmse`; mean rows use run `mean`.
    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let ser = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(["variant", "run", "cpc", "jsd", "pearson", "rmse", "nrmse"]).map_err(ser)?;
        let rows = self
            .runs
            .iter()
            .map(|r| (r, r.run.to_string()))
            .chain(self.means.iter().map(|r| (r, "mean".to_string())));
        for (r, run) in rows {
            let s = &r.scores;
            w.write_record([
                r.variant.clone(),
                run,
                fmt(s.cpc),
                fmt(s.jsd),
                fmt(s.pearson),
                fmt(s.rmse),
                fmt(s.nrmse),
            ])
            .map_err(ser)?;
        }
        w.flush().map_err(|e| Error::Serde(e.to_string()))
    }

    /// `variant,decile,cpc` with deciles numbered 1..=10.
    pub fn write_deciles_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let ser = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(["variant", "decile", "cpc"]).map_err(ser)?;
        for d in &self.deciles {
            w.write_record([d.variant.clone(), d.decile.to_string(), fmt(d.cpc)])
                .map_err(ser)?;
        }
        w.flush().map_err(|e| Error::Serde(e.to_string()))
    }
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.6}")
    }
}
