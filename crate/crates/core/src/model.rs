//! Matched-pair data model.
//!
//! A study is a set of matched pairs, each holding exactly one treated and
//! one control unit. Potential outcomes are never stored; only the observed
//! response of each unit is kept, and null hypotheses posit the missing half.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateKind {
    Binary,
    Numeric,
    /// Values are indices into `levels`.
    Categorical { levels: Vec<String> },
}

impl CovariateKind {
    pub fn is_numeric_like(&self) -> bool {
        !matches!(self, CovariateKind::Categorical { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub covariates: Vec<CovariateSpec>,
    pub outcome: OutcomeKind,
}

impl Schema {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::Schema(format!("unknown covariate '{name}'")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.covariates.iter().map(|c| c.name.as_str()).collect()
    }
}

/// One observed unit. Categorical covariates hold their level index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub unit_id: String,
    pub treated: bool,
    pub outcome: f64,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pair_id: String,
    pub treated: ObservationRecord,
    pub control: ObservationRecord,
}

impl MatchedPair {
    /// Treated-minus-control observed outcome.
    pub fn difference(&self) -> f64 {
        self.treated.outcome - self.control.outcome
    }

    /// The covariate value both members share, if they agree.
    pub fn shared(&self, index: usize) -> Option<f64> {
        let t = self.treated.covariates[index];
        let c = self.control.covariates[index];
        (t == c).then_some(t)
    }
}

/// The stratified dataset: pairs plus an optional grouping by tree leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPairSet {
    pub schema: Schema,
    pub pairs: Vec<MatchedPair>,
    /// Leaf position (0-based, in the tree's terminal order) of every pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_of_pair: Option<Vec<usize>>,
}

impl MatchedPairSet {
    pub fn new(schema: Schema, pairs: Vec<MatchedPair>) -> Result<Self> {
        let set = MatchedPairSet {
            schema,
            pairs,
            group_of_pair: None,
        };
        set.validate()?;
        Ok(set)
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> Result<()> {
        let width = self.schema.covariates.len();
        for pair in &self.pairs {
            if !pair.treated.treated || pair.control.treated {
                return Err(Error::Data(format!(
                    "pair {} must hold one treated and one control unit",
                    pair.pair_id
                )));
            }
            for unit in [&pair.treated, &pair.control] {
                if unit.covariates.len() != width {
                    return Err(Error::Schema(format!(
                        "unit {} has {} covariates, schema has {width}",
                        unit.unit_id,
                        unit.covariates.len()
                    )));
                }
                if !unit.outcome.is_finite() {
                    return Err(Error::Data(format!("unit {} has a non-finite outcome", unit.unit_id)));
                }
                if self.schema.outcome == OutcomeKind::Binary && unit.outcome != 0.0 && unit.outcome != 1.0 {
                    return Err(Error::Schema(format!(
                        "unit {} has outcome {} in a binary-outcome dataset",
                        unit.unit_id, unit.outcome
                    )));
                }
            }
        }
        if let Some(groups) = &self.group_of_pair {
            if groups.len() != self.pairs.len() {
                return Err(Error::Data("grouping length differs from pair count".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Total number of units, N = 2 × pairs.
    pub fn unit_count(&self) -> usize {
        2 * self.pairs.len()
    }

    pub fn differences(&self) -> Vec<f64> {
        self.pairs.iter().map(MatchedPair::difference).collect()
    }

    /// Restricts to the pairs whose ids are listed, keeping dataset order.
    pub fn subset(&self, ids: &std::collections::BTreeSet<String>) -> MatchedPairSet {
        let mut pairs = Vec::with_capacity(ids.len());
        let mut groups = Vec::new();
        for (i, p) in self.pairs.iter().enumerate() {
            if ids.contains(&p.pair_id) {
                pairs.push(p.clone());
                if let Some(g) = &self.group_of_pair {
                    groups.push(g[i]);
                }
            }
        }
        MatchedPairSet {
            schema: self.schema.clone(),
            pairs,
            group_of_pair: self.group_of_pair.as_ref().map(|_| groups),
        }
    }

    /// Pair differences split by group; requires an attached grouping.
    pub fn grouped_differences(&self, groups: usize) -> Result<Vec<Vec<f64>>> {
        let assignment = self
            .group_of_pair
            .as_ref()
            .ok_or_else(|| Error::Data("pairs have not been assigned to a tree".into()))?;
        let mut out = vec![Vec::new(); groups];
        for (pair, &g) in self.pairs.iter().zip(assignment) {
            if g >= groups {
                return Err(Error::Data(format!("group index {g} out of range")));
            }
            out[g].push(pair.difference());
        }
        Ok(out)
    }

    /// Pairs split by group, by reference.
    pub fn grouped_pairs(&self, groups: usize) -> Result<Vec<Vec<&MatchedPair>>> {
        let assignment = self
            .group_of_pair
            .as_ref()
            .ok_or_else(|| Error::Data("pairs have not been assigned to a tree".into()))?;
        let mut out = vec![Vec::new(); groups];
        for (pair, &g) in self.pairs.iter().zip(assignment) {
            if g >= groups {
                return Err(Error::Data(format!("group index {g} out of range")));
            }
            out[g].push(pair);
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn schema(names: &[&str], outcome: OutcomeKind) -> Schema {
        Schema {
            covariates: names
                .iter()
                .map(|n| CovariateSpec {
                    name: n.to_string(),
                    kind: CovariateKind::Binary,
                })
                .collect(),
            outcome,
        }
    }

    pub fn pair(id: usize, treated_y: f64, control_y: f64, x: &[f64]) -> MatchedPair {
        MatchedPair {
            pair_id: format!("p{id:05}"),
            treated: ObservationRecord {
                unit_id: format!("t{id:05}"),
                treated: true,
                outcome: treated_y,
                covariates: x.to_vec(),
            },
            control: ObservationRecord {
                unit_id: format!("c{id:05}"),
                treated: false,
                outcome: control_y,
                covariates: x.to_vec(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn unit_count_is_twice_pairs() {
        let s = schema(&["a"], OutcomeKind::Continuous);
        let set = MatchedPairSet::new(s, vec![pair(0, 1.0, 0.0, &[1.0]), pair(1, 0.0, 0.0, &[0.0])]).unwrap();
        assert_eq!(set.unit_count(), 4);
        assert_eq!(set.differences(), vec![1.0, 0.0]);
    }

    #[test]
    fn binary_dataset_rejects_fractional_outcome() {
        let s = schema(&["a"], OutcomeKind::Binary);
        let err = MatchedPairSet::new(s, vec![pair(0, 0.5, 0.0, &[1.0])]).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn covariate_width_must_match_schema() {
        let s = schema(&["a", "b"], OutcomeKind::Continuous);
        assert!(MatchedPairSet::new(s, vec![pair(0, 0.5, 0.0, &[1.0])]).is_err());
    }
}
