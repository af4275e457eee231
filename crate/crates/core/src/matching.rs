//! Greedy nearest-neighbour pair matching within exact strata.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::CohortTable;
use crate::model::{CovariateKind, MatchedPair, MatchedPairSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub pairs: MatchedPairSet,
    /// Within-pair distances, in pair order.
    pub distances: Vec<f64>,
    /// Treated units left without an in-caliper control.
    pub unmatched_treated: Vec<String>,
    pub warnings: Vec<String>,
}

/// Pairs each treated unit, in id order, to the nearest unused control of
/// its exact stratum. Distance is Euclidean after dividing each distance
/// covariate by its cohort standard deviation.
pub fn greedy_match(
    cohort: &CohortTable,
    exact_on: &[&str],
    distance_on: &[&str],
    caliper: Option<f64>,
) -> Result<MatchOutcome> {
    if let Some(c) = caliper {
        if !(c >= 0.0) {
            return Err(Error::Config(format!("caliper {c} must be nonnegative")));
        }
    }
    let schema = &cohort.schema;
    let exact: Vec<usize> = exact_on
        .iter()
        .map(|n| {
            let i = schema.require(n)?;
            match schema.covariates[i].kind {
                CovariateKind::Numeric => Err(Error::Config(format!("exact matching on numeric covariate '{n}'"))),
                _ => Ok(i),
            }
        })
        .collect::<Result<_>>()?;
    let dist: Vec<usize> = distance_on
        .iter()
        .map(|n| {
            let i = schema.require(n)?;
            match schema.covariates[i].kind {
                CovariateKind::Categorical { .. } => {
                    Err(Error::Config(format!("distance on categorical covariate '{n}'")))
                }
                _ => Ok(i),
            }
        })
        .collect::<Result<_>>()?;
    let scale: Vec<f64> = dist
        .iter()
        .map(|&j| {
            let n = cohort.rows.len() as f64;
            let mean = cohort.rows.iter().map(|r| r.covariates[j]).sum::<f64>() / n;
            let var = cohort.rows.iter().map(|r| (r.covariates[j] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();

    // Stratum key: exact covariate codes, compared bitwise.
    let key = |i: usize| -> Vec<u64> { exact.iter().map(|&j| cohort.rows[i].covariates[j].to_bits()).collect() };
    let mut strata: BTreeMap<Vec<u64>, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, r) in cohort.rows.iter().enumerate() {
        let s = strata.entry(key(i)).or_default();
        if r.treated {
            s.0.push(i)
        } else {
            s.1.push(i)
        }
    }
    let by_id = |a: &usize, b: &usize| cohort.rows[*a].unit_id.cmp(&cohort.rows[*b].unit_id);

    let mut matched: Vec<(usize, usize, f64)> = Vec::new();
    let mut unmatched_treated = Vec::new();
    let mut warnings = Vec::new();
    for (k, (mut treated, mut controls)) in strata {
        treated.sort_by(by_id);
        controls.sort_by(by_id);
        if !treated.is_empty() && controls.is_empty() {
            let label: Vec<String> = exact_on
                .iter()
                .zip(&k)
                .map(|(n, bits)| format!("{n}={}", f64::from_bits(*bits)))
                .collect();
            warnings.push(format!(
                "stratum [{}] has {} treated units and no controls",
                label.join(", "),
                treated.len()
            ));
        }
        let mut used = vec![false; controls.len()];
        for t in treated {
            let mut best: Option<(f64, usize)> = None;
            for (ci, &c) in controls.iter().enumerate() {
                if used[ci] {
                    continue;
                }
                let d = dist
                    .iter()
                    .zip(&scale)
                    .map(|(&j, s)| ((cohort.rows[t].covariates[j] - cohort.rows[c].covariates[j]) / s).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, ci));
                }
            }
            match best {
                Some((d, ci)) if caliper.is_none_or(|cal| d <= cal) => {
                    used[ci] = true;
                    matched.push((t, controls[ci], d));
                }
                _ => unmatched_treated.push(cohort.rows[t].unit_id.clone()),
            }
        }
    }
    if matched.is_empty() {
        return Err(Error::Data("no pairs could be formed".into()));
    }
    matched.sort_by(|a, b| by_id(&a.0, &b.0));
    let width = matched.len().to_string().len();
    let pairs = matched
        .iter()
        .enumerate()
        .map(|(k, &(t, c, _))| MatchedPair {
            pair_id: format!("m{:0width$}", k + 1),
            treated: cohort.rows[t].clone(),
            control: cohort.rows[c].clone(),
        })
        .collect();
    unmatched_treated.sort();
    Ok(MatchOutcome {
        pairs: MatchedPairSet::new(schema.clone(), pairs)?,
        distances: matched.iter().map(|m| m.2).collect(),
        unmatched_treated,
        warnings,
    })
}
