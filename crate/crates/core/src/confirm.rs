//! Confirmation on routed pairs, dispatching on the outcome kind.

use crate::binary::BinaryFamily;
use crate::conversion::ConversionMatrix;
use crate::error::{Error, Result};
use crate::joint::CriticalValues;
use crate::model::{MatchedPairSet, OutcomeKind};
use crate::scan::{
    ci_method_test, deviates_csv, sensitivity_sweep, subgroup_ci_test, CiMethodResult, HypothesisSpec,
    SensitivityReport, SensitivitySpec, SignedRankFamily,
};

fn leaves_of(data: &MatchedPairSet, c: &ConversionMatrix) -> Result<usize> {
    if data.group_of_pair.is_none() {
        return Err(Error::Data("pairs have not been routed through a tree".into()));
    }
    Ok(c.cols())
}

macro_rules! dispatch {
    ($data:expr, $c:expr, |$fam:ident| $body:expr) => {{
        let leaves = leaves_of($data, $c)?;
        match $data.schema.outcome {
            OutcomeKind::Continuous => {
                let $fam = SignedRankFamily::new($data.grouped_differences(leaves)?)?;
                $body
            }
            OutcomeKind::Binary => {
                let $fam = BinaryFamily::new(&$data.grouped_pairs(leaves)?)?;
                $body
            }
        }
    }};
}

/// Global test with signed ranks for continuous outcomes and the
/// attributable-effect family for binary ones.
pub fn joint_test(
    data: &MatchedPairSet,
    c: &ConversionMatrix,
    spec: &HypothesisSpec,
    sensitivity: SensitivitySpec,
    critical: &CriticalValues,
) -> Result<CiMethodResult> {
    dispatch!(data, c, |f| ci_method_test(&f, c, spec, sensitivity, critical))
}

/// Global test for binary outcomes over the compatible δ grid.
pub fn binary_joint_test(
    data: &MatchedPairSet,
    c: &ConversionMatrix,
    spec: &HypothesisSpec,
    sensitivity: SensitivitySpec,
    critical: &CriticalValues,
) -> Result<CiMethodResult> {
    if data.schema.outcome != OutcomeKind::Binary {
        return Err(Error::Schema("binary test on a continuous outcome".into()));
    }
    joint_test(data, c, spec, sensitivity, critical)
}

pub fn subgroup_joint_test(
    data: &MatchedPairSet,
    c: &ConversionMatrix,
    nodes: &[usize],
    spec: &HypothesisSpec,
    sensitivity: SensitivitySpec,
    critical: &CriticalValues,
) -> Result<CiMethodResult> {
    dispatch!(data, c, |f| subgroup_ci_test(&f, c, nodes, spec, sensitivity, critical))
}

pub fn sweep(
    data: &MatchedPairSet,
    c: &ConversionMatrix,
    grid: &[f64],
    spec: &HypothesisSpec,
    critical: &CriticalValues,
) -> Result<SensitivityReport> {
    dispatch!(data, c, |f| sensitivity_sweep(&f, c, grid, spec, critical))
}

/// Deviate table over a set of hypothesized effects.
pub fn deviate_table(data: &MatchedPairSet, c: &ConversionMatrix, effects: &[f64], gamma: f64) -> Result<String> {
    dispatch!(data, c, |f| deviates_csv(&f, c, effects, gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversion::build_conversion_matrix;
    use crate::model::fixtures::{pair, schema};
    use crate::mvn::QmcSettings;
    use crate::tree::{assign_pairs, examples::threshold, TreeBuilder};

    fn routed(outcome: OutcomeKind) -> (MatchedPairSet, ConversionMatrix) {
        let mut b = TreeBuilder::new();
        b.split(0, threshold("x1"));
        let tree = b.finish();
        let pairs = (0..120)
            .map(|i| {
                let x = (i % 2) as f64;
                let (t, c) = match outcome {
                    OutcomeKind::Binary => (((i % 3 == 0) || x == 1.0) as u8 as f64, (i % 5 == 0) as u8 as f64),
                    OutcomeKind::Continuous => (x * 2.0 + (i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()),
                };
                pair(i, t, c, &[x])
            })
            .collect();
        let data = MatchedPairSet::new(schema(&["x1"], outcome), pairs).unwrap();
        let c = build_conversion_matrix(&tree).unwrap();
        (assign_pairs(&tree, &data).unwrap().data, c)
    }

    #[test]
    fn dispatch_follows_outcome_kind() {
        let cv = CriticalValues::new(QmcSettings::default());
        let spec = HypothesisSpec { alpha: 0.04, gamma_ci: 0.01 };
        let g1 = SensitivitySpec::new(1.0).unwrap();
        let (cont, c) = routed(OutcomeKind::Continuous);
        assert!(joint_test(&cont, &c, &spec, g1, &cv).unwrap().reject);
        assert!(matches!(binary_joint_test(&cont, &c, &spec, g1, &cv), Err(Error::Schema(_))));
        let (bin, c) = routed(OutcomeKind::Binary);
        let a = binary_joint_test(&bin, &c, &spec, g1, &cv).unwrap();
        let b = joint_test(&bin, &c, &spec, g1, &cv).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unrouted_pairs_are_rejected() {
        let (mut data, c) = routed(OutcomeKind::Continuous);
        data.group_of_pair = None;
        let cv = CriticalValues::new(QmcSettings::default());
        let spec = HypothesisSpec { alpha: 0.04, gamma_ci: 0.01 };
        assert!(matches!(
            joint_test(&data, &c, &spec, SensitivitySpec::new(1.0).unwrap(), &cv),
            Err(Error::Data(_))
        ));
    }
}
