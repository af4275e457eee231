//! Wilcoxon signed-rank statistic and its sensitivity bounds.
//!
//! Under a bias of at most Γ, each pair's sign is positive with probability
//! between 1/(1+Γ) and Γ/(1+Γ). The statistic is then bounded in
//! distribution by sums of independent scaled Bernoulli variables.

use crate::error::{Error, Result};

/// The three quantities of one group that every Γ-bound needs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RankSummary {
    /// Sum of ranks of positive adjusted differences.
    pub statistic: f64,
    pub sum_scores: f64,
    pub sum_sq_scores: f64,
    /// Pairs with a nonzero adjusted difference.
    pub used: usize,
}

/// Null moments of one group at a fixed Γ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMoments {
    pub statistic: f64,
    pub mean_upper: f64,
    pub mean_lower: f64,
    /// Shared by both bounding variables.
    pub variance: f64,
}

impl RankSummary {
    pub fn moments(&self, gamma: f64) -> GroupMoments {
        let hi = gamma / (1.0 + gamma);
        let lo = 1.0 / (1.0 + gamma);
        GroupMoments {
            statistic: self.statistic,
            mean_upper: hi * self.sum_scores,
            mean_lower: lo * self.sum_scores,
            variance: hi * (1.0 - hi) * self.sum_sq_scores,
        }
    }
}

/// Ranks |d_i − τ| with average ranks for ties, dropping exact zeros.
///
/// `scratch` is reused between calls to avoid reallocating in scans.
pub fn rank_summary_with(diffs: &[f64], tau: f64, scratch: &mut Vec<(f64, bool)>) -> RankSummary {
    scratch.clear();
    scratch.extend(diffs.iter().filter_map(|&d| {
        let a = d - tau;
        (a != 0.0).then(|| (a.abs(), a > 0.0))
    }));
    scratch.sort_unstable_by(|x, y| x.0.total_cmp(&y.0));
    let mut out = RankSummary {
        used: scratch.len(),
        ..Default::default()
    };
    let mut i = 0;
    while i < scratch.len() {
        let mut j = i + 1;
        while j < scratch.len() && scratch[j].0 == scratch[i].0 {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &(_, pos) in &scratch[i..j] {
            if pos {
                out.statistic += rank;
            }
        }
        let width = (j - i) as f64;
        out.sum_scores += rank * width;
        out.sum_sq_scores += rank * rank * width;
        i = j;
    }
    out
}

pub fn rank_summary(diffs: &[f64], tau: f64) -> RankSummary {
    rank_summary_with(diffs, tau, &mut Vec::with_capacity(diffs.len()))
}

/// Statistic and Γ-bounded null moments for one group at hypothesized effect τ.
pub fn signed_rank_moments(diffs: &[f64], tau: f64, gamma: f64) -> Result<GroupMoments> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("sensitivity parameter {gamma} must be at least 1")));
    }
    if !tau.is_finite() {
        return Err(Error::Config("hypothesized effect must be finite".into()));
    }
    Ok(rank_summary(diffs, tau).moments(gamma))
}

/// Signed deviate for one group: the upper deviate when it is positive, the
/// lower when it is negative, and zero when the statistic sits between the
/// two bounding means.
pub fn clamped_deviate(statistic: f64, mean_upper: f64, mean_lower: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return 0.0;
    }
    let up = (statistic - mean_upper) / sd;
    let down = (statistic - mean_lower) / sd;
    if up > 0.0 {
        up
    } else if down < 0.0 {
        down
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn textbook_example() {
        // |d| = 1,2,3,4,5 with signs + - + + -; positive ranks 1+3+4.
        let m = signed_rank_moments(&[1.0, -2.0, 3.0, 4.0, -5.0], 0.0, 1.0).unwrap();
        assert_eq!(m.statistic, 8.0);
        assert_eq!(m.mean_upper, 7.5);
        assert_eq!(m.mean_lower, 7.5);
        assert_abs_diff_eq!(m.variance, 55.0 / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn ties_get_average_ranks_and_zeros_drop() {
        let s = rank_summary(&[2.0, -2.0, 0.5, 0.0, 2.0], 0.0);
        assert_eq!(s.used, 4);
        // ranks: 0.5 -> 1, the three 2's -> 3 each.
        assert_eq!(s.statistic, 1.0 + 3.0 + 3.0);
        assert_eq!(s.sum_scores, 10.0);
        assert_eq!(s.sum_sq_scores, 1.0 + 27.0);
    }

    #[test]
    fn gamma_bounds_at_three() {
        let m = signed_rank_moments(&[1.0, 2.0, 3.0], 0.0, 3.0).unwrap();
        assert_abs_diff_eq!(m.mean_upper, 0.75 * 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mean_lower, 0.25 * 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.variance, 0.75 * 0.25 * 14.0, epsilon = 1e-12);
    }

    #[test]
    fn gamma_below_one_is_config_error() {
        assert!(matches!(signed_rank_moments(&[1.0], 0.0, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn clamp_is_zero_between_bounds() {
        assert_eq!(clamped_deviate(5.0, 6.0, 4.0, 1.0), 0.0);
        assert_eq!(clamped_deviate(8.0, 6.0, 4.0, 1.0), 2.0);
        assert_eq!(clamped_deviate(1.0, 6.0, 4.0, 1.0), -3.0);
    }

    // Exhaustive enumeration of sign patterns: the Γ = 1 null mean and
    // variance of the statistic must match the closed form.
    #[test]
    fn moments_match_enumeration() {
        let d = [0.3, -1.1, 2.0, 2.0, -0.7, 4.5];
        let s = rank_summary(&d, 0.0);
        let n = d.len();
        let mut abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let (mut m1, mut m2) = (0.0, 0.0);
        for mask in 0..(1u32 << n) {
            let signed: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { abs[i] } else { -abs[i] }).collect();
            let t = rank_summary(&signed, 0.0).statistic;
            m1 += t;
            m2 += t * t;
        }
        let k = (1u32 << n) as f64;
        let mean = m1 / k;
        let var = m2 / k - mean * mean;
        let g = s.moments(1.0);
        assert_abs_diff_eq!(g.mean_upper, mean, epsilon = 1e-9);
        assert_abs_diff_eq!(g.variance, var, epsilon = 1e-9);
    }

    #[test]
    fn untied_ranks_reduce_to_classical_moments() {
        for n in 1..60usize {
            let d: Vec<f64> = (1..=n).map(|i| i as f64 * if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
            let m = signed_rank_moments(&d, 0.0, 1.0).unwrap();
            let i = n as f64;
            assert_eq!(m.mean_upper, i * (i + 1.0) / 4.0);
            assert_eq!(m.variance, i * (i + 1.0) * (2.0 * i + 1.0) / 24.0);
        }
    }

    // Bounding variable at Γ = 2: each rank enters with probability 2/3.
    #[test]
    fn gamma_two_matches_weighted_enumeration() {
        let scores = [1.0, 2.0, 3.0];
        let p = 2.0 / 3.0;
        let (mut m1, mut m2) = (0.0, 0.0);
        for mask in 0..8u32 {
            let mut t = 0.0;
            let mut w = 1.0;
            for (i, q) in scores.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    t += q;
                    w *= p;
                } else {
                    w *= 1.0 - p;
                }
            }
            m1 += w * t;
            m2 += w * t * t;
        }
        let m = signed_rank_moments(&[1.0, -2.0, 3.0], 0.0, 2.0).unwrap();
        assert_abs_diff_eq!(m.mean_upper, m1, epsilon = 1e-12);
        assert_abs_diff_eq!(m.variance, m2 - m1 * m1, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mean_lower, 6.0 - m1, epsilon = 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn upper_deviate_is_nonincreasing_in_gamma(
                d in proptest::collection::vec(-5.0f64..5.0, 1..40),
                tau in -2.0f64..2.0,
                g1 in 1.0f64..4.0, dg in 0.0f64..4.0,
            ) {
                let s = rank_summary(&d, tau);
                prop_assume!(s.used > 0);
                let a = s.moments(g1);
                let b = s.moments(g1 + dg);
                let da = clamped_deviate(a.statistic, a.mean_upper, a.mean_lower, a.variance.sqrt());
                let db = clamped_deviate(b.statistic, b.mean_upper, b.mean_lower, b.variance.sqrt());
                prop_assert!(db.abs() <= da.abs() + 1e-9);
            }

            #[test]
            fn statistic_is_nonincreasing_in_tau(
                d in proptest::collection::vec(-5.0f64..5.0, 1..40),
                t1 in -3.0f64..3.0, dt in 0.0f64..2.0,
            ) {
                let a = rank_summary(&d, t1).statistic;
                let b = rank_summary(&d, t1 + dt).statistic;
                prop_assert!(b <= a + 1e-9);
            }
        }
    }
}
