//! City data model: census block groups, the directed mobility graph,
//! demographic group counts and POI densities.

mod geo;
mod graph;
pub mod io;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use geo::{haversine_km, Boundary, LatLon, Ring, EARTH_RADIUS_KM};
pub use graph::{Edge, MobilityGraph};

pub const DEFAULT_POI_TYPES: [&str; 12] = [
    "food",
    "shopping",
    "work",
    "health",
    "religious",
    "service",
    "entertainment",
    "grocery",
    "education",
    "arts_museum",
    "transportation",
    "sports",
];

pub fn default_poi_types() -> Vec<String> {
    DEFAULT_POI_TYPES.iter().map(|s| s.to_string()).collect()
}

/// A demographic attribute and its ordered social groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSchema {
    pub name: String,
    pub groups: Vec<String>,
}

impl GroupSchema {
    pub fn new(name: impl Into<String>, groups: Vec<String>) -> Result<Self> {
        let name = name.into();
        if groups.len() < 2 {
            return Err(Error::SchemaMismatch {
                expected: format!("at least 2 groups for attribute `{name}`"),
                found: groups.len().to_string(),
            });
        }
        for (k, g) in groups.iter().enumerate() {
            if groups[..k].contains(g) {
                return Err(Error::SchemaMismatch {
                    expected: format!("unique group labels for `{name}`"),
                    found: format!("duplicate `{g}`"),
                });
            }
        }
        Ok(Self { name, groups })
    }

    pub fn n(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbgRecord {
    pub id: String,
    pub population: u64,
    pub centroid: LatLon,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<Boundary>,
    /// Parallel to `CityDataset::attributes`.
    pub group_counts: Vec<Vec<u64>>,
    /// Parallel to `CityDataset::poi_types`, per km².
    pub poi_density: Vec<f64>,
}

/// Great-circle distance between two CBG centroids, in km.
pub fn centroid_distance(a: &CbgRecord, b: &CbgRecord) -> Result<f64> {
    haversine_km(a.centroid, b.centroid)
}

/// Per-CBG group proportions for one attribute. `None` rows belong to CBGs
/// whose group counts sum to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProportionMatrix {
    pub attribute: String,
    pub n_groups: usize,
    pub rows: Vec<Option<Vec<f64>>>,
}

impl ProportionMatrix {
    pub fn row(&self, i: usize) -> Option<&[f64]> {
        self.rows[i].as_deref()
    }

    pub fn is_defined(&self, i: usize) -> bool {
        self.rows[i].is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub cbgs: usize,
    pub edges: usize,
    pub total_flow: f64,
    /// CBGs excluded from proportion-based computations, per attribute.
    pub undefined_demographics: Vec<(String, Vec<String>)>,
    pub zero_population: Vec<String>,
}

/// One city's CBGs, flows, demographics and POI densities. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetParts", into = "DatasetParts")]
pub struct CityDataset {
    cbgs: Vec<CbgRecord>,
    flows: MobilityGraph,
    attributes: Vec<GroupSchema>,
    poi_types: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DatasetParts {
    cbgs: Vec<CbgRecord>,
    flows: MobilityGraph,
    attributes: Vec<GroupSchema>,
    poi_types: Vec<String>,
}

impl TryFrom<DatasetParts> for CityDataset {
    type Error = Error;
    fn try_from(p: DatasetParts) -> Result<Self> {
        CityDataset::new(p.cbgs, p.flows, p.attributes, p.poi_types)
    }
}

impl From<CityDataset> for DatasetParts {
    fn from(d: CityDataset) -> Self {
        DatasetParts {
            cbgs: d.cbgs,
            flows: d.flows,
            attributes: d.attributes,
            poi_types: d.poi_types,
        }
    }
}

impl CityDataset {
    /// Validates and assembles a dataset. `flows` must be indexed over the
    /// same node order as `cbgs`.
    pub fn new(
        cbgs: Vec<CbgRecord>,
        flows: MobilityGraph,
        attributes: Vec<GroupSchema>,
        poi_types: Vec<String>,
    ) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::SchemaMismatch {
                expected: "at least one demographic attribute".into(),
                found: "none".into(),
            });
        }
        if poi_types.is_empty() {
            return Err(Error::SchemaMismatch {
                expected: "at least one POI type".into(),
                found: "none".into(),
            });
        }
        for (k, t) in poi_types.iter().enumerate() {
            if poi_types[..k].contains(t) {
                return Err(Error::SchemaMismatch {
                    expected: "unique POI types".into(),
                    found: format!("duplicate `{t}`"),
                });
            }
        }
        if flows.node_count() != cbgs.len()
            || flows.nodes().iter().zip(&cbgs).any(|(a, b)| *a != b.id)
        {
            return Err(Error::SchemaMismatch {
                expected: "flow graph nodes in CBG order".into(),
                found: format!("{} nodes", flows.node_count()),
            });
        }
        let mut seen = HashMap::with_capacity(cbgs.len());
        for c in &cbgs {
            if seen.insert(c.id.as_str(), ()).is_some() {
                return Err(Error::SchemaMismatch {
                    expected: "unique CBG ids".into(),
                    found: format!("duplicate `{}`", c.id),
                });
            }
            c.centroid.validate()?;
            if c.group_counts.len() != attributes.len() {
                return Err(Error::SchemaMismatch {
                    expected: format!("{} attributes", attributes.len()),
                    found: format!("{} for `{}`", c.group_counts.len(), c.id),
                });
            }
            for (counts, attr) in c.group_counts.iter().zip(&attributes) {
                if counts.len() != attr.n() {
                    return Err(Error::SchemaMismatch {
                        expected: format!("{} groups for `{}`", attr.n(), attr.name),
                        found: format!("{} for `{}`", counts.len(), c.id),
                    });
                }
            }
            if c.poi_density.len() != poi_types.len() {
                return Err(Error::SchemaMismatch {
                    expected: format!("{} POI densities", poi_types.len()),
                    found: format!("{} for `{}`", c.poi_density.len(), c.id),
                });
            }
            if let Some(k) = c.poi_density.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::NegativeValue {
                    field: format!("poi `{}` of `{}`", poi_types[k], c.id),
                });
            }
        }
        Ok(Self {
            cbgs,
            flows,
            attributes,
            poi_types,
        })
    }

    pub fn cbgs(&self) -> &[CbgRecord] {
        &self.cbgs
    }

    pub fn cbg(&self, i: usize) -> &CbgRecord {
        &self.cbgs[i]
    }

    pub fn len(&self) -> usize {
        self.cbgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cbgs.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.flows.index_of(id)
    }

    pub fn require_index(&self, id: &str) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| Error::UnknownCbg(id.to_string()))
    }

    pub fn flows(&self) -> &MobilityGraph {
        &self.flows
    }

    pub fn attributes(&self) -> &[GroupSchema] {
        &self.attributes
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn attribute(&self, name: &str) -> Result<&GroupSchema> {
        Ok(&self.attributes[self.attribute_index(name)?])
    }

    pub fn poi_types(&self) -> &[String] {
        &self.poi_types
    }

    pub fn poi_index(&self, name: &str) -> Option<usize> {
        self.poi_types.iter().position(|t| t == name)
    }

    pub fn distance_km(&self, i: usize, j: usize) -> f64 {
        // centroids are validated at construction
        centroid_distance(&self.cbgs[i], &self.cbgs[j]).unwrap_or(0.0)
    }

    /// Group proportions θ for one attribute.
    pub fn group_proportions(&self, attribute: &str) -> Result<ProportionMatrix> {
        let a = self.attribute_index(attribute)?;
        let n = self.attributes[a].n();
        let rows = self
            .cbgs
            .iter()
            .map(|c| {
                let counts = &c.group_counts[a];
                let total: u64 = counts.iter().sum();
                (total > 0).then(|| counts.iter().map(|&s| s as f64 / total as f64).collect())
            })
            .collect();
        Ok(ProportionMatrix {
            attribute: attribute.to_string(),
            n_groups: n,
            rows,
        })
    }

    pub fn validation_summary(&self) -> ValidationSummary {
        let undefined = self
            .attributes
            .iter()
            .enumerate()
            .map(|(a, attr)| {
                let ids = self
                    .cbgs
                    .iter()
                    .filter(|c| c.group_counts[a].iter().all(|&s| s == 0))
                    .map(|c| c.id.clone())
                    .collect();
                (attr.name.clone(), ids)
            })
            .collect();
        ValidationSummary {
            cbgs: self.cbgs.len(),
            edges: self.flows.edge_count(),
            total_flow: self.flows.total_weight(),
            undefined_demographics: undefined,
            zero_population: self
                .cbgs
                .iter()
                .filter(|c| c.population == 0)
                .map(|c| c.id.clone())
                .collect(),
        }
    }

    /// Hex SHA-256 over the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("dataset serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Copy of the dataset with one CBG's POI densities replaced.
    pub fn with_poi_density(&self, i: usize, density: Vec<f64>) -> Result<Self> {
        let mut cbgs = self.cbgs.clone();
        cbgs[i].poi_density = density;
        Self::new(
            cbgs,
            self.flows.clone(),
            self.attributes.clone(),
            self.poi_types.clone(),
        )
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Builds a dataset with one attribute `income` (groups `lo`, `hi`) and
    /// a single POI type.
    pub fn tiny(cbgs: &[(&str, [u64; 2], (f64, f64))], flows: &[(&str, &str, f64)]) -> CityDataset {
        let records: Vec<CbgRecord> = cbgs
            .iter()
            .map(|(id, counts, (lat, lon))| CbgRecord {
                id: id.to_string(),
                population: counts.iter().sum(),
                centroid: LatLon::new(*lat, *lon),
                boundary: None,
                group_counts: vec![counts.to_vec()],
                poi_density: vec![1.0],
            })
            .collect();
        let nodes: Vec<String> = records.iter().map(|c| c.id.clone()).collect();
        let pos = |id: &str| nodes.iter().position(|n| n == id).unwrap();
        let edges: Vec<Edge> = flows
            .iter()
            .map(|(o, d, w)| Edge {
                origin: pos(o),
                dest: pos(d),
                weight: *w,
            })
            .collect();
        let graph = MobilityGraph::new(nodes.clone(), edges).unwrap();
        CityDataset::new(
            records,
            graph,
            vec![GroupSchema::new("income", vec!["lo".into(), "hi".into()]).unwrap()],
            vec!["food".into()],
        )
        .unwrap()
    }
}
