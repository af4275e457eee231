//! Binary outcomes: attributable-effect nulls, McNemar sensitivity bounds,
//! truncated-product combination and the amplification of Γ.
//!
//! A binary null fixes the average effect δ, which does not determine the
//! unobserved potential outcomes. For each pair the observed difference `a`
//! is paired with an unknown counterpart `b = r_T2 − r_C1` in {−1, 0, 1}.
//! Under the null the pair contributes `a + b` to N_g·δ_g, and twice its
//! estimate has variance 4p(1−p)(a−b)². The worst case over completions is
//! found exactly by dynamic programming along the integer Σb axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::model::MatchedPair;
use crate::normal;
use crate::scan::NullFamily;
use crate::signed_rank::{clamped_deviate, GroupMoments};

fn observed(pair: &MatchedPair) -> Result<i64> {
    let (t, c) = (pair.treated.outcome, pair.control.outcome);
    for v in [t, c] {
        if v != 0.0 && v != 1.0 {
            return Err(Error::Schema(format!("pair {} has a non-binary outcome {v}", pair.pair_id)));
        }
    }
    Ok(t as i64 - c as i64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEstimate {
    pub pairs: usize,
    pub discordant: usize,
    /// Discordant pairs in which the treated unit had the event.
    pub treated_events: usize,
    pub delta_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryEstimate {
    pub delta_hat: f64,
    pub per_group: Vec<GroupEstimate>,
}

/// Average effect estimate, overall and per group.
pub fn binary_estimate(groups: &[Vec<&MatchedPair>]) -> Result<BinaryEstimate> {
    let mut per_group = Vec::with_capacity(groups.len());
    let (mut total, mut n) = (0i64, 0usize);
    for g in groups {
        let (mut sum, mut disc, mut pos) = (0i64, 0, 0);
        for p in g {
            let a = observed(p)?;
            sum += a;
            if a != 0 {
                disc += 1;
            }
            if a == 1 {
                pos += 1;
            }
        }
        per_group.push(GroupEstimate {
            pairs: g.len(),
            discordant: disc,
            treated_events: pos,
            delta_hat: if g.is_empty() { 0.0 } else { sum as f64 / g.len() as f64 },
        });
        total += sum;
        n += g.len();
    }
    if n == 0 {
        return Err(Error::Data("no pairs".into()));
    }
    Ok(BinaryEstimate {
        delta_hat: total as f64 / n as f64,
        per_group,
    })
}

/// Nearest multiples of 1/n_g below and above num/den, as numerators over n_g.
pub fn compatible_bracket(num: i64, den: u64, n_g: u64) -> Result<(i64, i64)> {
    if n_g == 0 || den == 0 {
        return Err(Error::Data("compatible values need a positive group size".into()));
    }
    let scaled = num as i128 * n_g as i128;
    let den = den as i128;
    let lo = scaled.div_euclid(den);
    let hi = if scaled.rem_euclid(den) == 0 { lo } else { lo + 1 };
    Ok((lo as i64, hi as i64))
}

const INFEASIBLE: i32 = i32::MIN;

/// Worst-case variance and mean shift for every feasible null total of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionTable {
    pairs: usize,
    observed_sum: i64,
    /// Indexed by Σb + pairs.
    max_var: Vec<i32>,
    max_shift: Vec<i32>,
}

impl CompletionTable {
    pub fn new(pairs: &[&MatchedPair]) -> Result<Self> {
        let a: Vec<i64> = pairs.iter().map(|p| observed(p)).collect::<Result<_>>()?;
        Ok(Self::from_differences(&a))
    }

    pub fn from_differences(a: &[i64]) -> Self {
        let n = a.len();
        let width = 2 * n + 1;
        let mut var = vec![INFEASIBLE; width];
        let mut shift = vec![INFEASIBLE; width];
        var[n] = 0;
        shift[n] = 0;
        let mut next_v = vec![INFEASIBLE; width];
        let mut next_m = vec![INFEASIBLE; width];
        // After k pairs the reachable sums are within ±k of the centre.
        for (k, &ai) in a.iter().enumerate() {
            next_v.fill(INFEASIBLE);
            next_m.fill(INFEASIBLE);
            for s in n - k..=n + k {
                if var[s] == INFEASIBLE {
                    continue;
                }
                for b in -1i64..=1 {
                    let t = (s as i64 + b) as usize;
                    let gap = (ai - b).abs() as i32;
                    next_v[t] = next_v[t].max(var[s] + gap * gap);
                    next_m[t] = next_m[t].max(shift[s] + gap);
                }
            }
            std::mem::swap(&mut var, &mut next_v);
            std::mem::swap(&mut shift, &mut next_m);
        }
        CompletionTable {
            pairs: n,
            observed_sum: a.iter().sum(),
            max_var: var,
            max_shift: shift,
        }
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    /// N_g = 2 × pairs.
    pub fn units(&self) -> u64 {
        2 * self.pairs as u64
    }

    /// T_g = N_g·δ̂_g.
    pub fn statistic(&self) -> i64 {
        2 * self.observed_sum
    }

    /// Range of null totals N_g·δ_g consistent with the observed data.
    pub fn feasible(&self) -> (i64, i64) {
        let n = self.pairs as i64;
        (self.observed_sum - n, self.observed_sum + n)
    }

    fn index(&self, total: i64) -> Option<usize> {
        let s = total - self.observed_sum + self.pairs as i64;
        (s >= 0 && s < self.max_var.len() as i64).then_some(s as usize)
    }

    /// (max Σ(a−b)², max Σ|a−b|) at null total `total`.
    pub fn bounds(&self, total: i64) -> Option<(i64, i64)> {
        let i = self.index(total)?;
        (self.max_var[i] != INFEASIBLE).then(|| (self.max_var[i] as i64, self.max_shift[i] as i64))
    }

    /// Bounding moments of T_g at null total `total` and sensitivity Γ.
    pub fn moments(&self, total: i64, gamma: f64) -> Option<GroupMoments> {
        let (v, m) = self.bounds(total)?;
        let lambda = (gamma - 1.0) / (gamma + 1.0);
        Some(GroupMoments {
            statistic: self.statistic() as f64,
            mean_upper: total as f64 + lambda * m as f64,
            mean_lower: total as f64 - lambda * m as f64,
            variance: v as f64,
        })
    }
}

/// Largest null variance of T_g over completions with N_g·δ_g = `total`.
///
/// The factor 4p(1−p) is maximized at p = 1/2, which every Γ ≥ 1 allows,
/// so the bound does not depend on Γ beyond validating it.
pub fn worst_case_variance(group: &[&MatchedPair], total: i64, gamma: f64) -> Result<f64> {
    if !(gamma >= 1.0) {
        return Err(Error::Config(format!("sensitivity parameter {gamma} must be at least 1")));
    }
    let table = CompletionTable::new(group)?;
    table
        .bounds(total)
        .map(|(v, _)| v as f64)
        .ok_or_else(|| Error::IncompatibleNull(format!("no completion of the group gives total {total}")))
}

fn deviate_of(m: &GroupMoments) -> f64 {
    clamped_deviate(m.statistic, m.mean_upper, m.mean_lower, m.variance.sqrt())
}

/// Per-group candidate null totals at one δ0.
#[derive(Debug, Clone)]
pub struct BinaryPoint {
    /// Lower and upper compatible totals; equal when δ0 is compatible.
    candidates: Vec<(i64, i64)>,
    notes: Vec<String>,
}

/// Binary outcomes grouped by leaf, indexed by δ0 = k / N.
#[derive(Debug, Clone)]
pub struct BinaryFamily {
    groups: Vec<CompletionTable>,
    pooled: CompletionTable,
}

impl BinaryFamily {
    pub fn new(groups: &[Vec<&MatchedPair>]) -> Result<Self> {
        let tables: Vec<CompletionTable> = groups.iter().map(|g| CompletionTable::new(g)).collect::<Result<_>>()?;
        let all: Vec<&MatchedPair> = groups.iter().flatten().copied().collect();
        if all.is_empty() {
            return Err(Error::Data("no pairs to test".into()));
        }
        Ok(BinaryFamily {
            pooled: CompletionTable::new(&all)?,
            groups: tables,
        })
    }

    /// N, the number of units.
    pub fn units(&self) -> u64 {
        self.pooled.units()
    }

    pub fn tables(&self) -> &[CompletionTable] {
        &self.groups
    }

    fn pooled_deviate(&self, k: i64, gamma: f64) -> f64 {
        self.pooled.moments(k, gamma).map(|m| deviate_of(&m)).unwrap_or(f64::INFINITY)
    }

    /// Brackets δ0 = k/N for every group, falling back to the nearest
    /// feasible total when neither compatible neighbour is attainable.
    pub fn point(&self, k: i64) -> BinaryPoint {
        let n = self.units();
        let mut notes = Vec::new();
        let candidates = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, t)| {
                if t.pairs == 0 {
                    return (0, 0);
                }
                let (lo, hi) = compatible_bracket(k, n, t.units()).expect("positive sizes");
                let (flo, fhi) = t.feasible();
                let clamp = |v: i64| v.clamp(flo, fhi);
                if lo > fhi || hi < flo {
                    notes.push(format!("group {g} has no compatible value near {k}/{n}; bracketed to its boundary"));
                }
                (clamp(lo), clamp(hi))
            })
            .collect();
        BinaryPoint { candidates, notes }
    }
}

impl NullFamily for BinaryFamily {
    type Prepared = BinaryPoint;

    fn pooled_interval(&self, gamma: f64, level: f64) -> Result<(f64, f64)> {
        let z = normal::two_sided_critical(level);
        let (flo, fhi) = self.pooled.feasible();
        let accepted: Vec<i64> = (flo..=fhi).filter(|&k| self.pooled_deviate(k, gamma).abs() <= z).collect();
        let n = self.units() as f64;
        match (accepted.first(), accepted.last()) {
            (Some(&a), Some(&b)) => Ok((a as f64 / n, b as f64 / n)),
            _ => {
                let k = self.pooled.statistic();
                Ok((k as f64 / n, k as f64 / n))
            }
        }
    }

    fn lattice(&self, _: (f64, f64)) -> (f64, f64) {
        (0.0, 1.0 / self.units() as f64)
    }

    fn index_bounds(&self, _: f64, _: f64) -> Option<(i64, i64)> {
        Some(self.pooled.feasible())
    }

    fn prepare(&self, delta0: f64) -> BinaryPoint {
        self.point((delta0 * self.units() as f64).round() as i64)
    }

    fn moments(&self, p: &BinaryPoint, gamma: f64) -> Vec<GroupMoments> {
        self.groups
            .iter()
            .zip(&p.candidates)
            .map(|(t, &(lo, hi))| {
                let a = t.moments(lo, gamma);
                let b = t.moments(hi, gamma);
                match (a, b) {
                    (Some(x), Some(y)) => {
                        if deviate_of(&y).abs() < deviate_of(&x).abs() {
                            y
                        } else {
                            x
                        }
                    }
                    (Some(x), None) | (None, Some(x)) => x,
                    (None, None) => GroupMoments {
                        statistic: 0.0,
                        mean_upper: 0.0,
                        mean_lower: 0.0,
                        variance: 0.0,
                    },
                }
            })
            .collect()
    }

    fn notes(&self, p: &BinaryPoint) -> Vec<String> {
        p.notes.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarBound {
    pub gamma: f64,
    pub discordant: usize,
    pub treated_events: usize,
    /// Upper bound on the one-sided P-value.
    pub p_upper: f64,
    pub note: Option<String>,
}

/// Exact binomial tail up to this many discordant pairs.
pub const EXACT_LIMIT: u64 = 1000;

/// Upper bound on the one-sided McNemar P-value under bias at most Γ.
pub fn mcnemar_upper_p(group: &[&MatchedPair], gamma: f64) -> Result<McNemarBound> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("sensitivity parameter {gamma} must be at least 1")));
    }
    let (mut d, mut t) = (0u64, 0u64);
    for p in group {
        match observed(p)? {
            1 => {
                d += 1;
                t += 1
            }
            -1 => d += 1,
            _ => {}
        }
    }
    let mut note = None;
    let p_upper = if d == 0 {
        note = Some("no discordant pairs".to_string());
        1.0
    } else {
        binomial_upper_tail(d, t, gamma / (1.0 + gamma))?
    };
    Ok(McNemarBound {
        gamma,
        discordant: d as usize,
        treated_events: t as usize,
        p_upper,
        note,
    })
}

/// Pr(Binomial(n, p) ≥ k).
fn binomial_upper_tail(n: u64, k: u64, p: f64) -> Result<f64> {
    if k == 0 {
        return Ok(1.0);
    }
    if n <= EXACT_LIMIT {
        let b = Binomial::new(p, n).map_err(|e| Error::Numeric(e.to_string()))?;
        Ok(b.sf(k - 1).clamp(0.0, 1.0))
    } else {
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        Ok(normal::sf((k as f64 - 0.5 - mean) / sd))
    }
}

/// Default truncation point for the truncated product.
pub const DEFAULT_TRUNCATION: f64 = 0.2;

/// Combined P-value of the truncated product W = Π p_i^{1(p_i ≤ t)}.
pub fn truncated_product(pvalues: &[f64], truncation: f64, reps: usize, seed: u64) -> Result<f64> {
    if pvalues.is_empty() {
        return Err(Error::Data("no P-values to combine".into()));
    }
    if !(truncation > 0.0 && truncation <= 1.0) {
        return Err(Error::Config(format!("truncation {truncation} must lie in (0,1]")));
    }
    if pvalues.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Data("P-values must lie in [0,1]".into()));
    }
    if reps == 0 {
        return Err(Error::Config("at least one Monte Carlo draw is needed".into()));
    }
    let log_w = |ps: &mut dyn Iterator<Item = f64>| -> f64 { ps.filter(|&p| p <= truncation).map(f64::ln).sum() };
    let observed = log_w(&mut pvalues.iter().copied());
    if observed == 0.0 {
        return Ok(1.0);
    }
    const BATCH: usize = 4096;
    let batches = reps.div_ceil(BATCH);
    let k = pvalues.len();
    let hits: usize = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (b as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let count = BATCH.min(reps - b * BATCH);
            (0..count)
                .filter(|_| {
                    let lw = log_w(&mut (0..k).map(|_| 1.0 - rng.random::<f64>()));
                    lw <= observed
                })
                .count()
        })
        .sum();
    Ok(hits as f64 / reps as f64)
}

/// Γ implied by a confounder with treatment odds Λ and outcome odds Δ.
pub fn amplify_point(lambda: f64, delta: f64) -> Result<f64> {
    if !(lambda >= 1.0 && delta >= 1.0) {
        return Err(Error::Config("amplification parameters must be at least 1".into()));
    }
    if lambda.is_infinite() {
        return Ok(delta);
    }
    if delta.is_infinite() {
        return Ok(lambda);
    }
    Ok((delta * lambda + 1.0) / (delta + lambda))
}

/// (Λ, Δ) pairs with the given Γ, for each Δ > Γ on the grid.
pub fn amplify(gamma: f64, deltas: &[f64]) -> Result<Vec<(f64, f64)>> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("sensitivity parameter {gamma} must be at least 1")));
    }
    Ok(deltas
        .iter()
        .filter(|&&d| d > gamma)
        .map(|&d| ((gamma * d - 1.0) / (d - gamma), d))
        .collect())
}
