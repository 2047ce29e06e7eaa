//! JSON configuration of model spaces and Lagrangians, plus canonical hashing.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::geometry::{Lagrangian, ModelSpace, Potential, SpaceKind, TrigTerm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    pub kind: SpaceKind,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneFormConfig {
    #[serde(default)]
    pub coefficients: Vec<f64>,
}

/// `{space: {kind, dim}, potential: {terms}, one_form: {coefficients}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagrangianConfig {
    pub space: SpaceConfig,
    #[serde(default)]
    pub potential: PotentialConfig,
    #[serde(default)]
    pub one_form: OneFormConfig,
}

impl LagrangianConfig {
    pub fn build(&self) -> Result<Lagrangian> {
        let space = ModelSpace::new(self.space.kind, self.space.dim)?;
        let potential = Potential::new(space, self.potential.terms.clone())?;
        Lagrangian::new(potential, &self.one_form.coefficients)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl From<&Lagrangian> for LagrangianConfig {
    fn from(lag: &Lagrangian) -> Self {
        let space = lag.space();
        Self {
            space: SpaceConfig {
                kind: space.kind(),
                dim: space.dim(),
            },
            potential: PotentialConfig {
                terms: lag.potential().terms().to_vec(),
            },
            one_form: OneFormConfig {
                coefficients: lag.one_form().to_vec(),
            },
        }
    }
}

/// SHA-256 of the canonical (key-sorted, compact) JSON rendering of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap, so this is canonical
    let canonical = serde_json::to_value(value)?.to_string();
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}
