//! Covariate balance before and after matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::CohortTable;
use crate::model::{CovariateKind, MatchedPairSet};

/// Balance of one covariate, or one level of a categorical covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub treated_before: f64,
    pub treated_after: f64,
    pub control_before: f64,
    pub control_after: f64,
    /// Spread used for both standardized differences.
    pub pooled_sd: f64,
    /// `None` when the spread is zero but the means differ.
    pub std_diff_before: Option<f64>,
    pub std_diff_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub treated_units: usize,
    pub control_units: usize,
    pub pairs: usize,
    pub rows: Vec<BalanceRow>,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}

fn standardized(diff: f64, sd: f64) -> Option<f64> {
    if diff == 0.0 {
        Some(0.0)
    } else if sd > 0.0 {
        Some(diff / sd)
    } else {
        None
    }
}

/// Standardized differences use the root mean of the two pre-matching
/// group variances in both columns.
pub fn balance(cohort: &CohortTable, pairs: &MatchedPairSet) -> Result<BalanceReport> {
    if cohort.schema != pairs.schema {
        return Err(Error::Schema("pairs and cohort have different schemas".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to assess".into()));
    }
    let mut columns: Vec<(String, Box<dyn Fn(&[f64]) -> f64>)> = Vec::new();
    for (j, c) in cohort.schema.covariates.iter().enumerate() {
        match &c.kind {
            CovariateKind::Categorical { levels } => {
                for (code, level) in levels.iter().enumerate() {
                    let code = code as f64;
                    columns.push((
                        format!("{}={level}", c.name),
                        Box::new(move |x: &[f64]| (x[j] == code) as u8 as f64),
                    ));
                }
            }
            _ => columns.push((c.name.clone(), Box::new(move |x: &[f64]| x[j]))),
        }
    }
    let treated: Vec<&[f64]> = cohort.rows.iter().filter(|r| r.treated).map(|r| r.covariates.as_slice()).collect();
    let control: Vec<&[f64]> = cohort.rows.iter().filter(|r| !r.treated).map(|r| r.covariates.as_slice()).collect();
    let rows = columns
        .iter()
        .map(|(name, f)| {
            let (tb, vt) = mean_var(&treated.iter().map(|x| f(x)).collect::<Vec<_>>());
            let (cb, vc) = mean_var(&control.iter().map(|x| f(x)).collect::<Vec<_>>());
            let ta = mean_var(&pairs.pairs.iter().map(|p| f(&p.treated.covariates)).collect::<Vec<_>>()).0;
            let ca = mean_var(&pairs.pairs.iter().map(|p| f(&p.control.covariates)).collect::<Vec<_>>()).0;
            let sd = ((vt + vc) / 2.0).sqrt();
            BalanceRow {
                covariate: name.clone(),
                treated_before: tb,
                treated_after: ta,
                control_before: cb,
                control_after: ca,
                pooled_sd: sd,
                std_diff_before: standardized(tb - cb, sd),
                std_diff_after: standardized(ta - ca, sd),
            }
        })
        .collect();
    Ok(BalanceReport {
        treated_units: treated.len(),
        control_units: control.len(),
        pairs: pairs.len(),
        rows,
    })
}

impl BalanceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "covariate",
            "treated_before",
            "treated_after",
            "control_before",
            "control_after",
            "pooled_sd",
            "std_diff_before",
            "std_diff_after",
        ])?;
        let sd = |v: Option<f64>| v.map_or_else(|| "inf".to_string(), |x| format!("{x:.6}"));
        for r in &self.rows {
            w.write_record([
                r.covariate.clone(),
                format!("{:.6}", r.treated_before),
                format!("{:.6}", r.treated_after),
                format!("{:.6}", r.control_before),
                format!("{:.6}", r.control_after),
                format!("{:.6}", r.pooled_sd),
                sd(r.std_diff_before),
                sd(r.std_diff_after),
            ])?;
        }
        crate::scan::finish_csv(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{read_cohort, FormatConfig};
    use crate::matching::greedy_match;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cohort(text: &str) -> CohortTable {
        read_cohort(text.as_bytes(), &FormatConfig::default()).unwrap()
    }

    #[test]
    fn identical_groups_have_zero_difference() {
        let c = cohort("id,z,y,x\na,1,0,1\nb,1,0,3\nc,0,0,1\nd,0,0,3\n");
        let m = greedy_match(&c, &[], &["x"], None).unwrap();
        let r = balance(&c, &m.pairs).unwrap();
        assert_eq!(r.rows[0].std_diff_before, Some(0.0));
        assert_eq!(r.rows[0].std_diff_after, Some(0.0));
    }

    #[test]
    fn unit_mean_gap_with_unit_variances() {
        // Treated 0,2 (mean 1, var 2); control -1,1 (mean 0, var 2) -> sd sqrt(2).
        let c = cohort("id,z,y,x\na,1,0,0\nb,1,0,2\nc,0,0,-1\nd,0,0,1\n");
        let m = greedy_match(&c, &[], &["x"], None).unwrap();
        let r = balance(&c, &m.pairs).unwrap();
        assert!((r.rows[0].std_diff_before.unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        let c = cohort("id,z,y,x\na,1,0,0\nb,1,0,2\nc,0,0,-1\nd,0,0,1\ne,1,0,1\nf,0,0,0\n");
        let m = greedy_match(&c, &[], &["x"], None).unwrap();
        let r = balance(&c, &m.pairs).unwrap();
        assert!((r.rows[0].std_diff_before.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_spread_with_unequal_means_is_flagged() {
        let c = cohort("id,z,y,x\na,1,0,1\nb,0,0,0\n");
        let m = greedy_match(&c, &[], &[], None).unwrap();
        let r = balance(&c, &m.pairs).unwrap();
        assert_eq!(r.rows[0].std_diff_before, None);
        assert!(r.to_csv().unwrap().contains("inf"));
    }

    #[test]
    fn exact_matching_zeroes_the_after_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut text = String::from("id,z,y,male,age\n");
        for i in 0..400 {
            let male = rng.random_bool(0.5);
            // Confounded: men are more often treated.
            let z = rng.random_bool(if male { 0.35 } else { 0.15 });
            text.push_str(&format!("u{i:03},{},0,{},{}\n", z as u8, male as u8, 60.0 + 30.0 * rng.random::<f64>()));
        }
        let c = cohort(&text);
        let m = greedy_match(&c, &["male"], &["age"], None).unwrap();
        let r = balance(&c, &m.pairs).unwrap();
        let male = r.rows.iter().find(|r| r.covariate == "male").unwrap();
        assert!(male.std_diff_before.unwrap() > 0.1);
        assert_eq!(male.std_diff_after, Some(0.0));
    }

    #[test]
    fn categorical_levels_get_rows() {
        let c = cohort("id,z,y,r\na,1,0,x\nb,0,0,y\nc,1,0,y\nd,0,0,x\n");
        let m = greedy_match(&c, &["r"], &[], None).unwrap();
        let r = balance(&c, &m.pairs).unwrap();
        let names: Vec<_> = r.rows.iter().map(|r| r.covariate.as_str()).collect();
        assert_eq!(names, vec!["r=x", "r=y"]);
        assert!(r.rows.iter().all(|r| r.std_diff_after == Some(0.0)));
    }
}
