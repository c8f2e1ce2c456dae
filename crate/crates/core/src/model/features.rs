//! Origin-destination feature vectors, their scaling, and per-group flow
//! segments.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::mlp::Real;
use crate::data::{CityDataset, Edge, MobilityGraph, ProportionMatrix};
use crate::error::{Error, Result};
use crate::segregation::visitor_mix;

/// Slot layout `[p_i, p_j, x_i.., x_j.., π_j.., dis_ij]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub poi_types: Vec<String>,
    /// Attribute name and group labels for each visitor-mix block.
    pub visitor_attrs: Vec<(String, Vec<String>)>,
    pub names: Vec<String>,
}

impl FeatureSchema {
    pub fn new(poi_types: Vec<String>, visitor_attrs: Vec<(String, Vec<String>)>) -> Self {
        let mut names = vec!["origin_population".to_string(), "dest_population".to_string()];
        names.extend(poi_types.iter().map(|t| format!("origin_poi.{t}")));
        names.extend(poi_types.iter().map(|t| format!("dest_poi.{t}")));
        for (attr, groups) in &visitor_attrs {
            names.extend(groups.iter().map(|g| format!("dest_visitors.{attr}.{g}")));
        }
        names.push("distance_km".to_string());
        Self {
            poi_types,
            visitor_attrs,
            names,
        }
    }

    /// Schema over all of the dataset's POI types, with visitor-mix slots
    /// for every attribute when `with_visitors` is set.
    pub fn for_dataset(dataset: &CityDataset, with_visitors: bool) -> Self {
        let vis = if with_visitors {
            dataset
                .attributes()
                .iter()
                .map(|a| (a.name.clone(), a.groups.clone()))
                .collect()
        } else {
            Vec::new()
        };
        Self::new(dataset.poi_types().to_vec(), vis)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_poi(&self) -> usize {
        self.poi_types.len()
    }

    pub fn origin_poi_slot(&self, t: usize) -> usize {
        2 + t
    }

    pub fn dest_poi_slot(&self, t: usize) -> usize {
        2 + self.n_poi() + t
    }

    pub fn visitor_start(&self) -> usize {
        2 + 2 * self.n_poi()
    }

    pub fn distance_slot(&self) -> usize {
        self.len() - 1
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Population and distance slots are log1p-transformed before scaling.
    pub fn is_log_slot(&self, s: usize) -> bool {
        s == 0 || s == 1 || s == self.distance_slot()
    }
}

/// Visitor mix π_j per attribute and CBG, `None` where a CBG has no inflow
/// from origins with defined demographics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitorMixTable {
    pub attributes: Vec<String>,
    pub mix: Vec<Vec<Option<Vec<f64>>>>,
}

impl VisitorMixTable {
    pub fn from_dataset(dataset: &CityDataset) -> Result<Self> {
        let mut attributes = Vec::new();
        let mut mix = Vec::new();
        for attr in dataset.attributes() {
            let theta = dataset.group_proportions(&attr.name)?;
            let rows = (0..dataset.len())
                .map(|j| visitor_mix(dataset, &theta, j).ok().map(|m| m.pi))
                .collect();
            attributes.push(attr.name.clone());
            mix.push(rows);
        }
        Ok(Self { attributes, mix })
    }

    pub fn get(&self, attribute: &str, cbg: usize) -> Option<&[f64]> {
        let a = self.attributes.iter().position(|x| x == attribute)?;
        self.mix[a][cbg].as_deref()
    }
}

/// Assembles raw (unscaled) feature vectors. An optional override replaces
/// one CBG's POI densities without copying the dataset.
#[derive(Clone, Copy)]
pub struct FeatureBuilder<'a> {
    pub dataset: &'a CityDataset,
    pub schema: &'a FeatureSchema,
    pub visitors: Option<&'a VisitorMixTable>,
    pub poi_override: Option<(usize, &'a [f64])>,
}

pub const MIN_DISTANCE_KM: f64 = 0.1;

impl<'a> FeatureBuilder<'a> {
    pub fn new(dataset: &'a CityDataset, schema: &'a FeatureSchema, visitors: Option<&'a VisitorMixTable>) -> Self {
        Self {
            dataset,
            schema,
            visitors,
            poi_override: None,
        }
    }

    pub fn with_override(mut self, cbg: usize, density: &'a [f64]) -> Self {
        self.poi_override = Some((cbg, density));
        self
    }

    fn poi(&self, i: usize) -> &[f64] {
        match self.poi_override {
            Some((c, d)) if c == i => d,
            _ => &self.dataset.cbg(i).poi_density,
        }
    }

    pub fn fill(&self, origin: usize, dest: usize, out: &mut [f64]) -> Result<()> {
        let d = self.dataset;
        if origin == dest {
            return Err(Error::SelfPair(d.cbg(origin).id.clone()));
        }
        let s = self.schema;
        out[0] = d.cbg(origin).population as f64;
        out[1] = d.cbg(dest).population as f64;
        let p = s.n_poi();
        out[2..2 + p].copy_from_slice(self.poi(origin));
        out[2 + p..2 + 2 * p].copy_from_slice(self.poi(dest));
        let mut k = s.visitor_start();
        for (attr, groups) in &s.visitor_attrs {
            let pi = self
                .visitors
                .and_then(|t| t.get(attr, dest))
                .ok_or_else(|| Error::MissingVisitorMix(d.cbg(dest).id.clone()))?;
            out[k..k + groups.len()].copy_from_slice(pi);
            k += groups.len();
        }
        out[s.distance_slot()] = d.distance_km(origin, dest).max(MIN_DISTANCE_KM);
        Ok(())
    }

    pub fn row(&self, origin: usize, dest: usize) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.schema.len()];
        self.fill(origin, dest, &mut v)?;
        Ok(v)
    }

    pub fn rows(&self, origin: usize, dests: &[usize]) -> Result<Vec<Vec<f64>>> {
        dests.iter().map(|&j| self.row(origin, j)).collect()
    }
}

/// Per-slot standardisation after an optional log1p.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub log1p: Vec<bool>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit<'r>(schema: &FeatureSchema, rows: impl IntoIterator<Item = &'r [f64]>) -> Result<Self> {
        let m = schema.len();
        let log1p: Vec<bool> = (0..m).map(|s| schema.is_log_slot(s)).collect();
        let mut sum = vec![0.0; m];
        let mut sq = vec![0.0; m];
        let mut n = 0usize;
        for r in rows {
            for s in 0..m {
                let v = if log1p[s] { r[s].ln_1p() } else { r[s] };
                sum[s] += v;
                sq[s] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyFeatures);
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, mu)| {
                let var = (q / nf - mu * mu).max(0.0);
                if var > 1e-18 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { log1p, mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, s: usize, v: f64) -> f64 {
        let v = if self.log1p[s] { v.ln_1p() } else { v };
        (v - self.mean[s]) / self.std[s]
    }

    pub fn transform<T: Real>(&self, rows: &[Vec<f64>]) -> Array2<T> {
        Array2::from_shape_fn((rows.len(), self.len()), |(i, s)| {
            T::from_f64(self.apply(s, rows[i][s])).unwrap()
        })
    }
}

/// Flow edges split by the origin's group proportions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupFlowSegments {
    pub attribute: String,
    pub segments: Vec<Vec<Edge>>,
    pub dropped_origins: Vec<String>,
}

/// `w_d(i, j) = θ_id · w(i, j)`; origins with undefined θ are dropped.
pub fn segment_flows_by_group(graph: &MobilityGraph, theta: &ProportionMatrix) -> Result<GroupFlowSegments> {
    if theta.rows.len() != graph.node_count() {
        return Err(Error::SchemaMismatch {
            expected: format!("{} proportion rows", graph.node_count()),
            found: theta.rows.len().to_string(),
        });
    }
    let mut segments = vec![Vec::new(); theta.n_groups];
    let mut dropped = Vec::new();
    for i in 0..graph.node_count() {
        let out = graph.out_edges(i);
        let Some(row) = theta.row(i) else {
            if !out.is_empty() {
                dropped.push(graph.node_id(i).to_string());
            }
            continue;
        };
        for e in out {
            for (seg, t) in segments.iter_mut().zip(row) {
                seg.push(Edge {
                    origin: e.origin,
                    dest: e.dest,
                    weight: t * e.weight,
                });
            }
        }
    }
    Ok(GroupFlowSegments {
        attribute: theta.attribute.clone(),
        segments,
        dropped_origins: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::tiny;

    #[test]
    fn schema_lengths() {
        let poi = crate::data::default_poi_types();
        let four = |a: &str| (a.to_string(), (0..4).map(|g| format!("g{g}")).collect::<Vec<_>>());
        let full = FeatureSchema::new(poi.clone(), vec![four("income"), four("race")]);
        assert_eq!(full.len(), 35);
        assert_eq!(FeatureSchema::new(poi, vec![]).len(), 27);
        assert_eq!(full.distance_slot(), 34);
        assert_eq!(full.names[full.dest_poi_slot(0)], "dest_poi.food");
    }

    #[test]
    fn proportional_segments() {
        let d = tiny(
            &[("a", [1, 3], (0.0, 0.0)), ("b", [1, 0], (0.0, 0.01)), ("z", [0, 0], (0.0, 0.02))],
            &[("a", "b", 8.0), ("b", "a", 10.0), ("z", "a", 4.0)],
        );
        let theta = d.group_proportions("income").unwrap();
        let seg = segment_flows_by_group(d.flows(), &theta).unwrap();
        let w = |g: usize, o: usize| seg.segments[g].iter().find(|e| e.origin == o).unwrap().weight;
        assert_eq!((w(0, 0), w(1, 0)), (2.0, 6.0));
        assert_eq!((w(0, 1), w(1, 1)), (10.0, 0.0));
        assert_eq!(seg.dropped_origins, vec!["z".to_string()]);
    }

    #[test]
    fn builder_rows_and_errors() {
        let d = tiny(
            &[("a", [1, 3], (0.0, 0.0)), ("b", [1, 1], (0.0, 0.0))],
            &[("a", "b", 8.0)],
        );
        let table = VisitorMixTable::from_dataset(&d).unwrap();
        let schema = FeatureSchema::for_dataset(&d, true);
        let b = FeatureBuilder::new(&d, &schema, Some(&table));
        let r = b.row(0, 1).unwrap();
        assert_eq!(r.len(), 2 + 2 + 2 + 1);
        assert_eq!(&r[4..6], &[0.25, 0.75]);
        assert_eq!(r[6], MIN_DISTANCE_KM);
        assert!(matches!(b.row(1, 0), Err(Error::MissingVisitorMix(_))));
        assert!(matches!(b.row(0, 0), Err(Error::SelfPair(_))));
        let dens = [9.0];
        let o = b.with_override(1, &dens).row(0, 1).unwrap();
        assert_eq!(o[3], 9.0);
    }

    #[test]
    fn scaler_standardises() {
        let schema = FeatureSchema::new(vec!["food".into()], vec![]);
        let rows = [vec![0.0, 1.0, 2.0, 4.0, 1.0], vec![0.0, 3.0, 4.0, 8.0, 1.0]];
        let sc = Scaler::fit(&schema, rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(sc.std[0], 1.0);
        assert_eq!(sc.apply(2, 2.0), -1.0);
        assert_eq!(sc.apply(3, 8.0), 1.0);
        assert!((sc.mean[1] - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
    }
}
