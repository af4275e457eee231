use hetfx::confirm::{joint_test, subgroup_joint_test};
use hetfx::discovery::{grow, split_sample, GrowthConfig, Method};
use hetfx::joint::CriticalValues;
use hetfx::mvn::QmcSettings;
use hetfx::scan::{HypothesisSpec, SensitivitySpec};
use hetfx::simlab::{generate, Scenario};
use hetfx::{assign_pairs, build_conversion_matrix, OutcomeKind, SplitRule, TreeBuilder};
use proptest::prelude::*;

fn spec() -> HypothesisSpec {
    HypothesisSpec {
        alpha: 0.04,
        gamma_ci: 0.01,
    }
}

#[test]
fn split_grow_and_confirm() {
    let s = Scenario::situation(OutcomeKind::Continuous, 4).unwrap();
    let data = generate(&s, 3).unwrap();
    let plan = split_sample(&data, 0.25, 9).unwrap();
    assert!(plan.discovery_ids.is_disjoint(&plan.confirmation_ids));
    assert_eq!(plan.discovery_ids.len() + plan.confirmation_ids.len(), data.len());

    let grown = grow(&plan.discovery(&data), &GrowthConfig::for_method(Method::Ct)).unwrap();
    assert!(grown.tree.split_covariates().contains("x1"));
    let c = build_conversion_matrix(&grown.tree).unwrap();
    let routed = assign_pairs(&grown.tree, &plan.confirmation(&data)).unwrap().data;
    let critical = CriticalValues::new(QmcSettings::default());
    let global = joint_test(&routed, &c, &spec(), SensitivitySpec::new(1.0).unwrap(), &critical).unwrap();
    assert!(global.reject, "d_min {} kappa {}", global.d_min, global.kappa);
    let (lo, hi) = global.interval.unwrap();
    assert!(lo < 0.55 && 0.55 < hi);

    // The node-wise test can only be weaker than the global one.
    let leaf = grown.tree.terminal_ids()[0];
    let one = subgroup_joint_test(&routed, &c, &[leaf], &spec(), SensitivitySpec::new(1.0).unwrap(), &critical)
        .unwrap();
    assert!(one.kappa <= global.kappa);
}

#[test]
fn larger_bias_never_strengthens_the_evidence() {
    let s = Scenario::situation(OutcomeKind::Binary, 4).unwrap();
    let data = generate(&s, 1).unwrap();
    let mut b = TreeBuilder::new();
    b.split(
        TreeBuilder::ROOT,
        SplitRule::Threshold {
            covariate: "x1".into(),
            threshold: 0.5,
        },
    );
    let tree = b.finish();
    let c = build_conversion_matrix(&tree).unwrap();
    let routed = assign_pairs(&tree, &data).unwrap().data;
    let critical = CriticalValues::new(QmcSettings::default());
    let mut last = f64::INFINITY;
    for gamma in [1.0, 1.1, 1.25, 1.5] {
        let r = joint_test(&routed, &c, &spec(), SensitivitySpec::new(gamma).unwrap(), &critical).unwrap();
        assert!(r.d_min <= last + 1e-12, "gamma {gamma}: {} after {last}", r.d_min);
        last = r.d_min;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_is_a_partition_of_the_requested_size(n in 20usize..400, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let mut s = Scenario::situation(OutcomeKind::Continuous, 1).unwrap();
        s.n_pairs = n;
        let data = generate(&s, 0).unwrap();
        if let Ok(plan) = split_sample(&data, fraction, seed) {
            prop_assert!(plan.discovery_ids.is_disjoint(&plan.confirmation_ids));
            prop_assert_eq!(plan.discovery_ids.len() + plan.confirmation_ids.len(), n);
            prop_assert_eq!(plan.discovery_ids.len(), (fraction * n as f64 + 1e-9).floor() as usize);
        }
    }

    #[test]
    fn every_leaf_column_is_hit_by_its_own_row_and_the_ancestors(depth_splits in proptest::collection::vec(0usize..8, 1..7)) {
        let mut b = TreeBuilder::new();
        let mut open = vec![TreeBuilder::ROOT];
        for pick in depth_splits {
            let id = open.remove(pick % open.len());
            let (l, r) = b.split(id, SplitRule::Threshold { covariate: "x".into(), threshold: 0.5 });
            open.push(l);
            open.push(r);
        }
        let tree = b.finish();
        let c = build_conversion_matrix(&tree).unwrap();
        prop_assert_eq!(c.rows(), 2 * c.cols() - 2);
        // Leaf rows form the identity; each column is covered by its leaf and every non-root ancestor.
        let internal = c.rows() - c.cols();
        for g in 0..c.cols() {
            for h in 0..c.cols() {
                prop_assert_eq!(c.entries[internal + g][h], (g == h) as u8);
            }
        }
        for k in 0..internal {
            let members = c.members(k);
            prop_assert!(members.len() >= 2 && members.len() < c.cols());
            prop_assert_eq!(members.len(), tree.descendant_leaves(c.row_labels[k]).unwrap().len());
        }
    }
}
