//! Flow models: gravity baseline and per-group deep gravity networks.

pub mod features;
pub mod gravity;
pub mod mlp;
pub mod train;

pub use train::{
    run_protocol, train, GroupModelSet, NetScorer, Predictor, Prepared, ProtocolResult, TrainConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flow allocation: `total · softmax(scores)`.
pub fn allocate(scores: &[f64], total: f64) -> Vec<f64> {
    mlp::softmax(scores).into_iter().map(|p| p * total).collect()
}

/// Checks the candidate set contract shared by all predictors.
pub fn check_candidates(origin: usize, dests: &[usize], k_dest: usize, id: impl Fn(usize) -> String) -> Result<()> {
    if dests.len() != k_dest {
        return Err(Error::WrongCandidateCount {
            expected: k_dest,
            found: dests.len(),
        });
    }
    if dests.contains(&origin) {
        return Err(Error::SelfPair(id(origin)));
    }
    Ok(())
}

/// The five compared model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "g")]
    G,
    #[serde(rename = "dg")]
    Dg,
    #[serde(rename = "dg+s")]
    DgS,
    #[serde(rename = "dg+v")]
    DgV,
    #[serde(rename = "dg+s+v")]
    DgSV,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::G, Variant::Dg, Variant::DgS, Variant::DgV, Variant::DgSV];

    pub fn label(self) -> &'static str {
        match self {
            Variant::G => "g",
            Variant::Dg => "dg",
            Variant::DgS => "dg+s",
            Variant::DgV => "dg+v",
            Variant::DgSV => "dg+s+v",
        }
    }

    /// One network per social group.
    pub fn segmented(self) -> bool {
        matches!(self, Variant::DgS | Variant::DgSV)
    }

    /// Destination visitor mix among the inputs.
    pub fn with_visitors(self) -> bool {
        matches!(self, Variant::DgV | Variant::DgSV)
    }

    pub fn is_deep(self) -> bool {
        self != Variant::G
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}
