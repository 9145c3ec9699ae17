use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ParamVector;

/// Where the members of an ensemble came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Provenance {
    Vib {
        k: f64,
        seed: u64,
    },
    Mcmc {
        sigma: f64,
        thin_gap: usize,
        seed: u64,
    },
    /// Copies of one deterministic parameter vector.
    Point,
}

/// A set of parameter vectors representing the weight posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    pub members: Vec<ParamVector>,
    pub provenance: Provenance,
}

impl PosteriorEnsemble {
    pub fn new(members: Vec<ParamVector>, provenance: Provenance) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Degenerate("empty posterior ensemble".into()));
        };
        let len = first.len();
        if let Some(bad) = members.iter().find(|m| m.len() != len) {
            return Err(Error::Shape {
                expected: len,
                got: bad.len(),
            });
        }
        Ok(Self { members, provenance })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.members.first().map_or(0, |m| m.len())
    }
}
