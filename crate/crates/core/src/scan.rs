//! Tests of no effect modification when the population effect is unknown.
//!
//! The nuisance effect is handled by scanning a lattice of hypothesized
//! values and keeping the least favorable joint statistic. With γ > 0 the
//! lattice covers a (1−γ) confidence interval; with γ = 0 it grows until
//! the statistic is far above the critical value at both ends.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conversion::ConversionMatrix;
use crate::error::{Error, Result};
use crate::joint::{assemble, subgroup_test, CriticalValues, JointDeviates};
use crate::normal;
use crate::signed_rank::{clamped_deviate, rank_summary_with, GroupMoments, RankSummary};

/// Level split between the nuisance interval and the joint test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSpec {
    /// Level of the joint test.
    pub alpha: f64,
    /// Level spent on the confidence interval for the population effect.
    pub gamma_ci: f64,
}

impl HypothesisSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0,1)", self.alpha)));
        }
        if !(self.gamma_ci >= 0.0 && self.alpha + self.gamma_ci < 1.0) {
            return Err(Error::Config(format!("gamma {} must be >= 0 with alpha + gamma < 1", self.gamma_ci)));
        }
        Ok(())
    }
}

/// Sensitivity level Γ ≥ 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySpec {
    pub gamma: f64,
}

impl SensitivitySpec {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma >= 1.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("sensitivity parameter {gamma} must be at least 1")));
        }
        Ok(SensitivitySpec { gamma })
    }
}

/// Level used to place the lattice when no interval level is spent.
pub const REFERENCE_CI_LEVEL: f64 = 0.01;
const POINTS_PER_INTERVAL: usize = 200;
const MAX_POINTS: usize = 1 << 16;

/// A family of null hypotheses indexed by the population effect.
pub trait NullFamily: Sync {
    /// Data reused across sensitivity levels at one hypothesized effect.
    type Prepared: Send + Sync;

    /// Interval of effects not rejected by the pooled test at level `level`.
    fn pooled_interval(&self, gamma: f64, level: f64) -> Result<(f64, f64)>;
    /// Lattice origin and spacing for a given interval.
    fn lattice(&self, interval: (f64, f64)) -> (f64, f64);
    /// Admissible index range on a lattice, if bounded.
    fn index_bounds(&self, origin: f64, step: f64) -> Option<(i64, i64)>;
    fn prepare(&self, effect: f64) -> Self::Prepared;
    fn moments(&self, prepared: &Self::Prepared, gamma: f64) -> Vec<GroupMoments>;
    /// Diagnostics attached to a lattice point.
    fn notes(&self, _prepared: &Self::Prepared) -> Vec<String> {
        Vec::new()
    }
}

/// Continuous outcomes: signed-rank statistics within each leaf.
#[derive(Debug, Clone)]
pub struct SignedRankFamily {
    groups: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    scale: f64,
}

impl SignedRankFamily {
    pub fn new(groups: Vec<Vec<f64>>) -> Result<Self> {
        let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
        if pooled.is_empty() {
            return Err(Error::Data("no pairs to test".into()));
        }
        if pooled.iter().any(|d| !d.is_finite()) {
            return Err(Error::Data("non-finite pair difference".into()));
        }
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let sd = (pooled.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        let spread = pooled.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let scale = if sd > 0.0 {
            sd
        } else if spread > 0.0 {
            spread
        } else {
            1.0
        };
        Ok(SignedRankFamily { groups, pooled, scale })
    }

    pub fn groups(&self) -> &[Vec<f64>] {
        &self.groups
    }

    fn pooled_deviate(&self, tau: f64, gamma: f64, scratch: &mut Vec<(f64, bool)>) -> f64 {
        let m = rank_summary_with(&self.pooled, tau, scratch).moments(gamma);
        clamped_deviate(m.statistic, m.mean_upper, m.mean_lower, m.variance.sqrt())
    }
}

impl NullFamily for SignedRankFamily {
    type Prepared = Vec<RankSummary>;

    fn pooled_interval(&self, gamma: f64, level: f64) -> Result<(f64, f64)> {
        let z = normal::two_sided_critical(level);
        let min = self.pooled.iter().copied().fold(f64::INFINITY, f64::min) - self.scale;
        let max = self.pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max) + self.scale;
        let mut scratch = Vec::with_capacity(self.pooled.len());
        let tol = 1e-7 * self.scale;
        // The pooled deviate is nonincreasing in τ, so each end is the
        // smallest τ satisfying a monotone predicate.
        let mut first_where = |pred: &dyn Fn(f64) -> bool| {
            let (mut a, mut b) = (min, max);
            while b - a > tol {
                let m = 0.5 * (a + b);
                if pred(self.pooled_deviate(m, gamma, &mut scratch)) {
                    b = m;
                } else {
                    a = m;
                }
            }
            b
        };
        let lo = first_where(&|d| d <= z);
        let hi = first_where(&|d| d < -z);
        if hi < lo {
            return Err(Error::Numeric("empty confidence interval".into()));
        }
        Ok((lo, hi))
    }

    fn lattice(&self, (lo, hi): (f64, f64)) -> (f64, f64) {
        let step = ((hi - lo) / POINTS_PER_INTERVAL as f64).max(1e-4 * self.scale);
        (lo, step)
    }

    fn index_bounds(&self, _: f64, _: f64) -> Option<(i64, i64)> {
        None
    }

    fn prepare(&self, tau: f64) -> Vec<RankSummary> {
        let mut scratch = Vec::new();
        self.groups.iter().map(|g| rank_summary_with(g, tau, &mut scratch)).collect()
    }

    fn moments(&self, prepared: &Vec<RankSummary>, gamma: f64) -> Vec<GroupMoments> {
        prepared.iter().map(|s| s.moments(gamma)).collect()
    }
}

/// One lattice point of a scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub tau: f64,
    pub d_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiMethodResult {
    pub gamma: f64,
    pub alpha: f64,
    pub gamma_ci: f64,
    pub reject: bool,
    pub d_min: f64,
    pub tau_at_min: f64,
    pub kappa: f64,
    /// The (1−γ) interval when γ > 0.
    pub interval: Option<(f64, f64)>,
    pub scan: Vec<ScanPoint>,
    pub at_min: JointDeviates,
    pub warnings: Vec<String>,
}

/// Precomputed lattice points, shared across sensitivity levels.
struct Lattice<P> {
    origin: f64,
    step: f64,
    /// Index of `points[0]`.
    first: i64,
    points: Vec<P>,
    bounds: Option<(i64, i64)>,
    /// Extension applied so far on each side.
    grown: (usize, usize),
}

impl<P: Send + Sync> Lattice<P> {
    fn new<F: NullFamily<Prepared = P>>(family: &F, interval: (f64, f64)) -> Self {
        let (origin, step) = family.lattice(interval);
        let bounds = family.index_bounds(origin, step);
        let mut first = ((interval.0 - origin) / step + 1e-9).floor() as i64;
        let mut last = (((interval.1 - origin) / step - 1e-9).ceil() as i64).max(first);
        if let Some((lo, hi)) = bounds {
            first = first.max(lo);
            last = last.min(hi).max(first);
        }
        let mut lat = Lattice {
            origin,
            step,
            first,
            points: Vec::new(),
            bounds,
            grown: (0, 0),
        };
        lat.points = lat.prepare_range(family, first, last);
        lat
    }

    fn value(&self, i: i64) -> f64 {
        self.origin + i as f64 * self.step
    }

    fn last(&self) -> i64 {
        self.first + self.points.len() as i64 - 1
    }

    fn prepare_range<F: NullFamily<Prepared = P>>(&self, family: &F, a: i64, b: i64) -> Vec<P> {
        (a..=b).into_par_iter().map(|i| family.prepare(self.value(i))).collect()
    }

    /// Extends one side by a doubling amount; false when nothing was added.
    fn grow<F: NullFamily<Prepared = P>>(&mut self, family: &F, left: bool) -> bool {
        if self.points.len() >= MAX_POINTS {
            return false;
        }
        let side = if left { self.grown.0 } else { self.grown.1 };
        let by = side.max(POINTS_PER_INTERVAL) as i64;
        if left {
            let mut a = self.first - by;
            if let Some((lo, _)) = self.bounds {
                a = a.max(lo);
            }
            if a >= self.first {
                return false;
            }
            let mut fresh = self.prepare_range(family, a, self.first - 1);
            fresh.append(&mut self.points);
            self.points = fresh;
            self.grown.0 += (self.first - a) as usize;
            self.first = a;
        } else {
            let mut b = self.last() + by;
            if let Some((_, hi)) = self.bounds {
                b = b.min(hi);
            }
            if b <= self.last() {
                return false;
            }
            let fresh = self.prepare_range(family, self.last() + 1, b);
            self.grown.1 += fresh.len();
            self.points.extend(fresh);
        }
        true
    }
}

/// Statistic scanned over the lattice: the global maximum or a restriction.
type Statistic<'a> = &'a (dyn Fn(&JointDeviates) -> Result<f64> + Sync);
/// Critical value matching a statistic.
type Critical<'a> = &'a dyn Fn(&JointDeviates) -> Result<f64>;

fn global_max(j: &JointDeviates) -> Result<f64> {
    Ok(j.d_max)
}

fn d_max_at<F: NullFamily>(
    family: &F,
    c: &ConversionMatrix,
    p: &F::Prepared,
    gamma: f64,
    stat: Statistic,
) -> Result<f64> {
    stat(&assemble(c, &family.moments(p, gamma))?)
}

fn scan_values<F: NullFamily>(
    family: &F,
    c: &ConversionMatrix,
    lat: &Lattice<F::Prepared>,
    range: std::ops::RangeInclusive<usize>,
    gamma: f64,
    stat: Statistic,
) -> Result<Vec<f64>> {
    lat.points[range]
        .par_iter()
        .map(|p| d_max_at(family, c, p, gamma, stat))
        .collect()
}

/// Grows the lattice until both ends clear κ + 2 at level `gamma`.
fn grow_until_clear<F: NullFamily>(
    family: &F,
    c: &ConversionMatrix,
    lat: &mut Lattice<F::Prepared>,
    gamma: f64,
    kappa: f64,
    stat: Statistic,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let target = kappa + 2.0;
    for left in [true, false] {
        loop {
            let end = if left { 0 } else { lat.points.len() - 1 };
            if d_max_at(family, c, &lat.points[end], gamma, stat)? > target {
                break;
            }
            if !lat.grow(family, left) {
                warnings.push(format!(
                    "{} end of the effect scan stops at {:.6} with the statistic below kappa + 2",
                    if left { "lower" } else { "upper" },
                    lat.value(if left { lat.first } else { lat.last() })
                ));
                break;
            }
        }
    }
    Ok(())
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Scans an existing lattice at one sensitivity level.
fn evaluate<F: NullFamily>(
    family: &F,
    c: &ConversionMatrix,
    lat: &Lattice<F::Prepared>,
    gamma: f64,
    stat: Statistic,
    critical: Critical,
) -> Result<(Vec<f64>, usize, JointDeviates, f64)> {
    let values = scan_values(family, c, lat, 0..=lat.points.len() - 1, gamma, stat)?;
    let at = argmin(&values);
    let joint = assemble(c, &family.moments(&lat.points[at], gamma))?;
    let kappa = critical(&joint)?;
    Ok((values, at, joint, kappa))
}

fn result_from<F: NullFamily>(
    family: &F,
    lat: &Lattice<F::Prepared>,
    values: Vec<f64>,
    at: usize,
    joint: JointDeviates,
    kappa: f64,
    gamma: f64,
    spec: &HypothesisSpec,
    interval: Option<(f64, f64)>,
    mut warnings: Vec<String>,
) -> CiMethodResult {
    warnings.extend(family.notes(&lat.points[at]));
    if !joint.excluded.is_empty() {
        warnings.push(format!("nodes {:?} have zero null variance and were left out", joint.excluded));
    }
    let scan = values
        .iter()
        .enumerate()
        .map(|(k, &d)| ScanPoint {
            tau: lat.value(lat.first + k as i64),
            d_max: d,
        })
        .collect();
    CiMethodResult {
        gamma,
        alpha: spec.alpha,
        gamma_ci: spec.gamma_ci,
        reject: values[at] > kappa,
        d_min: values[at],
        tau_at_min: lat.value(lat.first + at as i64),
        kappa,
        interval,
        scan,
        at_min: joint,
        warnings,
    }
}

/// Global test of no effect modification at sensitivity level Γ.
pub fn ci_method_test<F: NullFamily>(
    family: &F,
    c: &ConversionMatrix,
    spec: &HypothesisSpec,
    sensitivity: SensitivitySpec,
    critical: &CriticalValues,
) -> Result<CiMethodResult> {
    let kappa = |j: &JointDeviates| critical.kappa(&j.correlation, spec.alpha);
    scan_test(family, c, spec, sensitivity, &global_max, &kappa, true)
}

/// Test of the subgroup null for the nodes in `nodes`: the restricted
/// maximum must exceed its own critical value at every effect in the
/// interval.
pub fn subgroup_ci_test<F: NullFamily>(
    family: &F,
    c: &ConversionMatrix,
    nodes: &[usize],
    spec: &HypothesisSpec,
    sensitivity: SensitivitySpec,
    critical: &CriticalValues,
) -> Result<CiMethodResult> {
    for &id in nodes {
        c.row_of(id)?;
    }
    let stat = |j: &JointDeviates| match subgroup_stat(j, nodes) {
        Some(d) => Ok(d),
        None => Ok(0.0),
    };
    let kappa = |j: &JointDeviates| Ok(subgroup_test(j, nodes, spec.alpha, critical)?.kappa);
    // A restricted maximum may be monotone across the interval, so an edge
    // minimum is expected here and the interval is never widened.
    scan_test(family, c, spec, sensitivity, &stat, &kappa, false)
}

fn subgroup_stat(j: &JointDeviates, nodes: &[usize]) -> Option<f64> {
    let mut any = false;
    let mut m = 0.0f64;
    for (k, id) in j.node_ids.iter().enumerate() {
        if nodes.contains(id) {
            any = true;
            m = m.max(j.deviates[k].abs());
        }
    }
    any.then_some(m)
}

fn scan_test<F: NullFamily>(
    family: &F,
    c: &ConversionMatrix,
    spec: &HypothesisSpec,
    sensitivity: SensitivitySpec,
    stat: Statistic,
    critical: Critical,
    widen_at_edge: bool,
) -> Result<CiMethodResult> {
    spec.validate()?;
    let gamma = sensitivity.gamma;
    let mut warnings = Vec::new();
    if spec.gamma_ci > 0.0 {
        let interval = family.pooled_interval(gamma, spec.gamma_ci)?;
        let mut lat = Lattice::new(family, interval);
        let (mut values, mut at, mut joint, mut kappa) = evaluate(family, c, &lat, gamma, stat, critical)?;
        if widen_at_edge && (at == 0 || at == values.len() - 1) {
            warnings.push("scan minimum fell on the interval edge; widened once".into());
            lat.grow(family, true);
            lat.grow(family, false);
            (values, at, joint, kappa) = evaluate(family, c, &lat, gamma, stat, critical)?;
        }
        return Ok(result_from(family, &lat, values, at, joint, kappa, gamma, spec, Some(interval), warnings));
    }
    let interval = family.pooled_interval(gamma, REFERENCE_CI_LEVEL)?;
    let mut lat = Lattice::new(family, interval);
    let (_, _, _, kappa) = evaluate(family, c, &lat, gamma, stat, critical)?;
    grow_until_clear(family, c, &mut lat, gamma, kappa, stat, &mut warnings)?;
    let (values, at, joint, kappa) = evaluate(family, c, &lat, gamma, stat, critical)?;
    Ok(result_from(family, &lat, values, at, joint, kappa, gamma, spec, None, warnings))
}

/// Joint deviates at one hypothesized effect.
pub fn deviates_at<F: NullFamily>(family: &F, c: &ConversionMatrix, effect: f64, gamma: f64) -> Result<JointDeviates> {
    SensitivitySpec::new(gamma)?;
    assemble(c, &family.moments(&family.prepare(effect), gamma))
}

/// Deviates of every node (rows) at each effect (columns).
pub fn deviates_csv<F: NullFamily>(family: &F, c: &ConversionMatrix, effects: &[f64], gamma: f64) -> Result<String> {
    let tables: Vec<JointDeviates> = effects.iter().map(|&e| deviates_at(family, c, e, gamma)).collect::<Result<_>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row".to_string(), "node".to_string()];
    header.extend(effects.iter().map(|e| format!("{e}")));
    w.write_record(&header)?;
    for (k, &node) in c.row_labels.iter().enumerate() {
        let mut row = vec![(k + 1).to_string(), node.to_string()];
        for t in &tables {
            let at = t.node_ids.iter().position(|&n| n == node);
            row.push(at.map_or_else(|| "NA".to_string(), |r| format!("{:.4}", t.deviates[r])));
        }
        w.write_record(&row)?;
    }
    finish_csv(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub tau_at_min: f64,
    pub d_min: f64,
    pub kappa: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub alpha: f64,
    pub gamma_ci: f64,
    pub rows: Vec<SweepRow>,
    /// Largest Γ, to three decimals, at which the null is still rejected.
    pub breaking_gamma: Option<f64>,
    /// True when every Γ on the grid rejects.
    pub unbroken: bool,
    /// Per-Γ scan traces.
    pub traces: Vec<CiMethodResult>,
    pub warnings: Vec<String>,
}

impl SensitivityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One line per (Γ, τ) lattice point.
    pub fn traces_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["gamma", "tau", "d_max", "kappa", "reject"])?;
        for t in &self.traces {
            for p in &t.scan {
                w.write_record([
                    t.gamma.to_string(),
                    p.tau.to_string(),
                    p.d_max.to_string(),
                    t.kappa.to_string(),
                    (p.d_max > t.kappa).to_string(),
                ])?;
            }
        }
        finish_csv(w)
    }

    /// One line per Γ at the least favorable τ.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["gamma", "tau", "d_max", "kappa", "reject"])?;
        for r in &self.rows {
            w.write_record([
                r.gamma.to_string(),
                r.tau_at_min.to_string(),
                r.d_min.to_string(),
                r.kappa.to_string(),
                r.reject.to_string(),
            ])?;
        }
        finish_csv(w)
    }
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Runs the global test over an ascending Γ grid starting at 1.
///
/// Γ = 1 uses the interval method as configured. Larger Γ spend no level
/// on the interval (γ = 0) and test at α + γ on a lattice shared by all Γ.
pub fn sensitivity_sweep<F: NullFamily>(
    family: &F,
    c: &ConversionMatrix,
    grid: &[f64],
    spec: &HypothesisSpec,
    critical: &CriticalValues,
) -> Result<SensitivityReport> {
    spec.validate()?;
    if grid.first() != Some(&1.0) {
        return Err(Error::Config("the sensitivity grid must start at 1".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::Config("the sensitivity grid must be strictly ascending".into()));
    }
    let first = ci_method_test(family, c, spec, SensitivitySpec::new(1.0)?, critical)?;
    let mut warnings = first.warnings.clone();
    let mut rows = vec![SweepRow {
        gamma: 1.0,
        tau_at_min: first.tau_at_min,
        d_min: first.d_min,
        kappa: first.kappa,
        reject: first.reject,
    }];
    let mut traces = vec![first];
    let alpha = spec.alpha + spec.gamma_ci;
    let wide = HypothesisSpec { alpha, gamma_ci: 0.0 };
    let kappa_of = |j: &JointDeviates| critical.kappa(&j.correlation, alpha);

    let mut lattice = None;
    if grid.len() > 1 {
        let level = if spec.gamma_ci > 0.0 { spec.gamma_ci } else { REFERENCE_CI_LEVEL };
        let mut lat = Lattice::new(family, family.pooled_interval(1.0, level)?);
        let top = *grid.last().unwrap();
        let (_, _, _, kappa) = evaluate(family, c, &lat, top, &global_max, &kappa_of)?;
        grow_until_clear(family, c, &mut lat, top, kappa, &global_max, &mut warnings)?;
        for &g in &grid[1..] {
            let (values, at, joint, kappa) = evaluate(family, c, &lat, g, &global_max, &kappa_of)?;
            let r = result_from(family, &lat, values, at, joint, kappa, g, &wide, None, Vec::new());
            rows.push(SweepRow {
                gamma: g,
                tau_at_min: r.tau_at_min,
                d_min: r.d_min,
                kappa: r.kappa,
                reject: r.reject,
            });
            traces.push(r);
        }
        lattice = Some(lat);
    }

    for w in rows.windows(2) {
        if w[1].d_min > w[0].d_min + 1e-9 {
            return Err(Error::Numeric(format!(
                "minimum deviate increased from {} at gamma {} to {} at gamma {}",
                w[0].d_min, w[0].gamma, w[1].d_min, w[1].gamma
            )));
        }
    }

    let last_reject = rows.iter().take_while(|r| r.reject).count();
    let (breaking_gamma, unbroken) = match (last_reject, lattice) {
        (0, _) => (None, false),
        (n, _) if n == rows.len() => (Some(rows[n - 1].gamma), true),
        (n, Some(lat)) => {
            // Bisection over thousandths: rejects at `lo`, not at `hi`.
            let rejects = |k: i64| -> Result<bool> {
                let (values, at, _, kappa) = evaluate(family, c, &lat, k as f64 / 1000.0, &global_max, &kappa_of)?;
                Ok(values[at] > kappa)
            };
            let mut lo = (rows[n - 1].gamma * 1000.0).floor() as i64;
            let mut hi = (rows[n].gamma * 1000.0).ceil() as i64;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if rejects(mid)? {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (Some(lo as f64 / 1000.0), false)
        }
        (_, None) => (Some(1.0), false),
    };
    Ok(SensitivityReport {
        alpha: spec.alpha,
        gamma_ci: spec.gamma_ci,
        rows,
        breaking_gamma,
        unbroken,
        traces,
        warnings,
    })
}
