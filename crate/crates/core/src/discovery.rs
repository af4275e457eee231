//! Honest sample splitting and tree growing on the discovery half.
//!
//! Trees are fit to pair differences. Both growers share one recursive
//! partitioner and one cost-complexity pruner; they differ in the node risk
//! and in how cross-validation picks the complexity parameter.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CovariateKind, MatchedPairSet};
use crate::tree::{EffectTree, SplitRule, TreeBuilder};

/// A partition of pair ids into discovery and confirmation halves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub discovery_fraction: f64,
    pub seed: u64,
    pub discovery_ids: BTreeSet<String>,
    pub confirmation_ids: BTreeSet<String>,
}

impl SplitPlan {
    pub fn discovery(&self, data: &MatchedPairSet) -> MatchedPairSet {
        data.subset(&self.discovery_ids)
    }

    pub fn confirmation(&self, data: &MatchedPairSet) -> MatchedPairSet {
        data.subset(&self.confirmation_ids)
    }
}

/// Discovery size for `n` pairs: ⌊fraction·n⌋, with a small allowance so
/// that fractions like 0.1 of 4000 are not lost to rounding.
pub fn discovery_size(n: usize, fraction: f64) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Uniform random partition at the pair level.
pub fn split_sample(data: &MatchedPairSet, fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("discovery fraction {fraction} must lie in (0,1)")));
    }
    if data.len() < 2 {
        return Err(Error::Data("at least two pairs are needed to split".into()));
    }
    let mut ids: Vec<&String> = data.pairs.iter().map(|p| &p.pair_id).collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Data("pair ids are not unique".into()));
    }
    let k = discovery_size(ids.len(), fraction);
    if k == 0 || k == ids.len() {
        return Err(Error::Config(format!(
            "fraction {fraction} of {} pairs leaves one subsample empty",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    Ok(SplitPlan {
        discovery_fraction: fraction,
        seed,
        discovery_ids: ids[..k].iter().map(|s| s.to_string()).collect(),
        confirmation_ids: ids[k..].iter().map(|s| s.to_string()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cart,
    Ct,
}

/// Rule for picking the complexity parameter from the cross-validation curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Simplest tree within one standard error of the minimum.
    OneSe,
    MinCv,
    /// No cross-validation; prune at `fixed_cp`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthConfig {
    pub method: Method,
    pub min_leaf_pairs: usize,
    pub max_depth: usize,
    pub cv_folds: usize,
    /// Candidate complexity parameters, relative to the root risk.
    pub complexity_grid: Vec<f64>,
    /// Anticipated confirmation share; sets the honesty penalty of CT.
    pub honest_fraction_hint: f64,
    /// Defaults to minimum cross-validated error for CART and to a fixed
    /// complexity parameter for CT.
    pub selection: Option<Selection>,
    /// Complexity parameter used by fixed selection.
    pub fixed_cp: f64,
    /// Seed for fold assignment.
    pub seed: u64,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig {
            method: Method::Cart,
            min_leaf_pairs: 25,
            max_depth: 5,
            cv_folds: 10,
            complexity_grid: default_grid(),
            honest_fraction_hint: 0.5,
            selection: None,
            fixed_cp: 0.0025,
            seed: 0,
        }
    }
}

/// Geometric grid from 1e-4 to 0.2.
pub fn default_grid() -> Vec<f64> {
    let (lo, hi, n) = (1e-4f64, 0.2f64, 34);
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

impl GrowthConfig {
    pub fn for_method(method: Method) -> Self {
        GrowthConfig {
            method,
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: GrowthConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let c: GrowthConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_leaf_pairs < 2 {
            return Err(Error::Config("min_leaf_pairs must be at least 2".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        if self.complexity_grid.is_empty()
            || self.complexity_grid.iter().any(|c| !(*c >= 0.0 && c.is_finite()))
            || self.complexity_grid.windows(2).any(|w| w[1] < w[0])
        {
            return Err(Error::Config("complexity_grid must be nonempty, nonnegative and ascending".into()));
        }
        if !(self.fixed_cp >= 0.0 && self.fixed_cp.is_finite()) {
            return Err(Error::Config("fixed_cp must be finite and nonnegative".into()));
        }
        if !(self.honest_fraction_hint > 0.0 && self.honest_fraction_hint < 1.0) {
            return Err(Error::Config("honest_fraction_hint must lie in (0,1)".into()));
        }
        Ok(())
    }

    fn selection(&self) -> Selection {
        // The honest criterion already charges for leaf variance, and its
        // cross-validated curve is too flat to locate a minimum reliably.
        self.selection.unwrap_or(match self.method {
            Method::Cart => Selection::MinCv,
            Method::Ct => Selection::Fixed,
        })
    }

    fn risk(&self) -> Risk {
        match self.method {
            Method::Cart => Risk::Squared,
            Method::Ct => {
                let share = self.honest_fraction_hint;
                Risk::Honest {
                    weight: 1.0 + (1.0 - share) / share,
                }
            }
        }
    }
}

/// One row of the cross-validation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub cp: f64,
    pub error: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrownTree {
    pub method: Method,
    pub tree: EffectTree,
    pub chosen_cp: f64,
    pub cv: Vec<CvRow>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
enum Risk {
    Squared,
    /// Squared error plus `weight` times the within-leaf variance.
    Honest { weight: f64 },
}

impl Risk {
    fn of(&self, s: &Moments) -> f64 {
        let sse = s.sse();
        match *self {
            Risk::Squared => sse,
            Risk::Honest { weight } => {
                let var = if s.n > 1.0 { sse / (s.n - 1.0) } else { 0.0 };
                sse + weight * var
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sumsq: f64,
}

impl Moments {
    fn add(&mut self, y: f64) {
        self.n += 1.0;
        self.sum += y;
        self.sumsq += y * y;
    }

    fn minus(&self, o: &Moments) -> Moments {
        Moments {
            n: self.n - o.n,
            sum: self.sum - o.sum,
            sumsq: self.sumsq - o.sumsq,
        }
    }

    fn mean(&self) -> f64 {
        if self.n > 0.0 {
            self.sum / self.n
        } else {
            0.0
        }
    }

    fn sse(&self) -> f64 {
        if self.n > 0.0 {
            (self.sumsq - self.sum * self.sum / self.n).max(0.0)
        } else {
            0.0
        }
    }
}

/// Covariates and responses in canonical (pair-id) order.
struct Sample {
    y: Vec<f64>,
    /// Per covariate: treated and control values.
    treated: Vec<Vec<f64>>,
    control: Vec<Vec<f64>>,
    /// Covariate indices sorted by name.
    order: Vec<usize>,
    names: Vec<String>,
    categorical: Vec<bool>,
}

impl Sample {
    fn new(data: &MatchedPairSet) -> Result<Self> {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.sort_by(|&a, &b| data.pairs[a].pair_id.cmp(&data.pairs[b].pair_id));
        let p = data.schema.covariates.len();
        let mut treated = vec![Vec::with_capacity(idx.len()); p];
        let mut control = vec![Vec::with_capacity(idx.len()); p];
        let mut y = Vec::with_capacity(idx.len());
        for &i in &idx {
            let pair = &data.pairs[i];
            y.push(pair.difference());
            for k in 0..p {
                treated[k].push(pair.treated.covariates[k]);
                control[k].push(pair.control.covariates[k]);
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite pair difference".into()));
        }
        let names: Vec<String> = data.schema.covariates.iter().map(|c| c.name.clone()).collect();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| names[a].cmp(&names[b]));
        Ok(Sample {
            y,
            treated,
            control,
            order,
            categorical: data
                .schema
                .covariates
                .iter()
                .map(|c| matches!(c.kind, CovariateKind::Categorical { .. }))
                .collect(),
            names,
        })
    }

    fn moments(&self, idx: &[usize]) -> Moments {
        let mut m = Moments::default();
        for &i in idx {
            m.add(self.y[i]);
        }
        m
    }

    fn goes_left(&self, rule: &SplitRule, k: usize, i: usize) -> bool {
        rule.goes_left(self.treated[k][i])
    }
}

#[derive(Debug, Clone)]
struct Node {
    stats: Moments,
    risk: f64,
    split: Option<(SplitRule, usize, usize, usize)>,
}

struct Grower<'a> {
    sample: &'a Sample,
    risk: Risk,
    min_leaf: usize,
    max_depth: usize,
    min_gain: f64,
    nodes: Vec<Node>,
}

struct Candidate {
    gain: f64,
    rule: SplitRule,
    covariate: usize,
    left: Vec<usize>,
    right: Vec<usize>,
}

impl<'a> Grower<'a> {
    fn grow(sample: &'a Sample, idx: Vec<usize>, risk: Risk, cfg: &GrowthConfig) -> Vec<Node> {
        let root_stats = sample.moments(&idx);
        let root_risk = risk.of(&root_stats);
        let mut g = Grower {
            sample,
            risk,
            min_leaf: cfg.min_leaf_pairs,
            max_depth: cfg.max_depth,
            min_gain: cfg.complexity_grid[0] * root_risk,
            nodes: Vec::new(),
        };
        g.build(idx, 0);
        g.nodes
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let stats = self.sample.moments(&idx);
        let id = self.nodes.len();
        self.nodes.push(Node {
            stats,
            risk: self.risk.of(&stats),
            split: None,
        });
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return id;
        }
        if let Some(c) = self.best_split(&idx, &stats) {
            if c.gain > self.min_gain.max(0.0) && c.gain > 1e-12 * self.nodes[id].risk.abs().max(1e-300) {
                let l = self.build(c.left, depth + 1);
                let r = self.build(c.right, depth + 1);
                self.nodes[id].split = Some((c.rule, c.covariate, l, r));
            }
        }
        id
    }

    fn best_split(&self, idx: &[usize], parent: &Moments) -> Option<Candidate> {
        let parent_risk = self.risk.of(parent);
        let mut best: Option<(f64, SplitRule, usize)> = None;
        let mut consider = |gain: f64, rule: SplitRule, k: usize| {
            let better = match &best {
                None => true,
                Some((g, _, _)) => gain > *g + 1e-12 * g.abs().max(1e-12),
            };
            if better {
                best = Some((gain, rule, k));
            }
        };
        for &k in &self.sample.order {
            if self.sample.categorical[k] {
                self.categorical_candidates(idx, k, parent_risk, &mut consider);
            } else {
                self.threshold_candidates(idx, k, parent, parent_risk, &mut consider);
            }
        }
        let (gain, rule, k) = best?;
        let (left, right): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.sample.goes_left(&rule, k, i));
        Some(Candidate {
            gain,
            rule,
            covariate: k,
            left,
            right,
        })
    }

    fn threshold_candidates(
        &self,
        idx: &[usize],
        k: usize,
        parent: &Moments,
        parent_risk: f64,
        consider: &mut impl FnMut(f64, SplitRule, usize),
    ) {
        let t = &self.sample.treated[k];
        let c = &self.sample.control[k];
        let mut sorted: Vec<(f64, f64)> = idx.iter().map(|&i| (t[i], self.sample.y[i])).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Thresholds inside [min, max) of any pair would separate its members.
        let mut blocked: Vec<(f64, f64)> = idx
            .iter()
            .filter(|&&i| t[i] != c[i])
            .map(|&i| (t[i].min(c[i]), t[i].max(c[i])))
            .collect();
        blocked.sort_by(|a, b| a.0.total_cmp(&b.0));
        let is_blocked = |thr: f64| blocked.iter().take_while(|b| b.0 <= thr).any(|b| thr < b.1);
        let mut left = Moments::default();
        for j in 0..sorted.len() - 1 {
            left.add(sorted[j].1);
            if sorted[j].0 == sorted[j + 1].0 {
                continue;
            }
            let nl = j + 1;
            if nl < self.min_leaf || sorted.len() - nl < self.min_leaf {
                continue;
            }
            let thr = 0.5 * (sorted[j].0 + sorted[j + 1].0);
            if is_blocked(thr) {
                continue;
            }
            let right = parent.minus(&left);
            let gain = parent_risk - self.risk.of(&left) - self.risk.of(&right);
            consider(
                gain,
                SplitRule::Threshold {
                    covariate: self.sample.names[k].clone(),
                    threshold: thr,
                },
                k,
            );
        }
    }

    fn categorical_candidates(
        &self,
        idx: &[usize],
        k: usize,
        parent_risk: f64,
        consider: &mut impl FnMut(f64, SplitRule, usize),
    ) {
        let t = &self.sample.treated[k];
        let c = &self.sample.control[k];
        if idx.iter().any(|&i| t[i] != c[i]) {
            return;
        }
        let mut levels: std::collections::BTreeMap<u32, Moments> = Default::default();
        for &i in idx {
            levels.entry(t[i] as u32).or_default().add(self.sample.y[i]);
        }
        let mut ordered: Vec<(u32, Moments)> = levels.into_iter().collect();
        ordered.sort_by(|a, b| a.1.mean().total_cmp(&b.1.mean()).then(a.0.cmp(&b.0)));
        let total = ordered.iter().fold(Moments::default(), |mut acc, (_, m)| {
            acc.n += m.n;
            acc.sum += m.sum;
            acc.sumsq += m.sumsq;
            acc
        });
        let mut left = Moments::default();
        let mut set = BTreeSet::new();
        for (level, m) in &ordered[..ordered.len().saturating_sub(1)] {
            left.n += m.n;
            left.sum += m.sum;
            left.sumsq += m.sumsq;
            set.insert(*level);
            let right = total.minus(&left);
            if (left.n as usize) < self.min_leaf || (right.n as usize) < self.min_leaf {
                continue;
            }
            let gain = parent_risk - self.risk.of(&left) - self.risk.of(&right);
            consider(
                gain,
                SplitRule::Categories {
                    covariate: self.sample.names[k].clone(),
                    left: set.clone(),
                },
                k,
            );
        }
    }
}

/// Which internal nodes survive pruning at penalty `alpha` per leaf.
fn prune(nodes: &[Node], alpha: f64) -> Vec<bool> {
    fn cost(nodes: &[Node], id: usize, alpha: f64, keep: &mut [bool]) -> f64 {
        let leaf = nodes[id].risk + alpha;
        match &nodes[id].split {
            None => leaf,
            Some((_, _, l, r)) => {
                let below = cost(nodes, *l, alpha, keep) + cost(nodes, *r, alpha, keep);
                if below < leaf {
                    keep[id] = true;
                    below
                } else {
                    leaf
                }
            }
        }
    }
    let mut keep = vec![false; nodes.len()];
    cost(nodes, 0, alpha, &mut keep);
    keep
}

/// Leaf of the pruned tree reached by pair `i`.
fn leaf_of(nodes: &[Node], keep: &[bool], sample: &Sample, i: usize) -> usize {
    let mut id = 0;
    loop {
        match &nodes[id].split {
            Some((rule, k, l, r)) if keep[id] => {
                id = if sample.goes_left(rule, *k, i) { *l } else { *r };
            }
            _ => return id,
        }
    }
}

fn to_tree(nodes: &[Node], keep: &[bool]) -> EffectTree {
    let mut b = TreeBuilder::new();
    let mut stack = vec![(0usize, TreeBuilder::ROOT)];
    while let Some((id, at)) = stack.pop() {
        if let Some((rule, _, l, r)) = &nodes[id].split {
            if keep[id] {
                let (bl, br) = b.split(at, rule.clone());
                stack.push((*r, br));
                stack.push((*l, bl));
            }
        }
    }
    b.finish()
}

fn fold_of(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let mut fold = vec![0; n];
    for (rank, &i) in perm.iter().enumerate() {
        fold[i] = rank % folds;
    }
    fold
}

/// Grows, cross-validates and prunes a tree with the configured method.
pub fn grow(data: &MatchedPairSet, config: &GrowthConfig) -> Result<GrownTree> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no discovery pairs".into()));
    }
    let sample = Sample::new(data)?;
    let n = sample.y.len();
    let risk = config.risk();
    let all: Vec<usize> = (0..n).collect();
    let full = Grower::grow(&sample, all.clone(), risk, config);
    let mut notes = Vec::new();
    if full[0].split.is_none() {
        if full[0].stats.sse() == 0.0 {
            notes.push("no structure: all pair differences are identical".to_string());
        } else {
            notes.push("no structure: no admissible split improves the criterion".to_string());
        }
        return Ok(GrownTree {
            method: config.method,
            tree: TreeBuilder::new().finish(),
            chosen_cp: config.complexity_grid[0],
            cv: Vec::new(),
            notes,
        });
    }

    if config.selection() == Selection::Fixed {
        let keep = prune(&full, config.fixed_cp * full[0].risk);
        return Ok(finish(config, &full, &keep, config.fixed_cp, Vec::new(), notes));
    }
    let folds = config.cv_folds.min(n);
    let fold = fold_of(n, folds, config.seed);
    let grid = &config.complexity_grid;
    // losses[c][i]: held-out squared error of pair i under grid value c.
    let mut losses = vec![vec![0.0; n]; grid.len()];
    for f in 0..folds {
        let train: Vec<usize> = all.iter().copied().filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = all.iter().copied().filter(|&i| fold[i] == f).collect();
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let nodes = Grower::grow(&sample, train, risk, config);
        for (c, &cp) in grid.iter().enumerate() {
            let keep = prune(&nodes, cp * nodes[0].risk);
            for &i in &test {
                let fit = nodes[leaf_of(&nodes, &keep, &sample, i)].stats.mean();
                losses[c][i] = (sample.y[i] - fit).powi(2);
            }
        }
    }
    let cv: Vec<CvRow> = grid
        .iter()
        .zip(&losses)
        .map(|(&cp, l)| {
            let total: f64 = l.iter().sum();
            let mean = total / n as f64;
            let var = l.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
            CvRow {
                cp,
                error: total,
                se: (n as f64 * var).sqrt(),
            }
        })
        .collect();
    let best = (0..cv.len())
        .rev()
        .min_by(|&a, &b| cv[a].error.total_cmp(&cv[b].error))
        .expect("nonempty grid");
    let chosen = match config.selection() {
        Selection::MinCv | Selection::Fixed => best,
        Selection::OneSe => {
            let limit = cv[best].error + cv[best].se;
            (0..cv.len()).rev().find(|&c| cv[c].error <= limit).unwrap_or(best)
        }
    };
    let chosen_cp = grid[chosen];
    let keep = prune(&full, chosen_cp * full[0].risk);
    Ok(finish(config, &full, &keep, chosen_cp, cv, notes))
}

fn finish(
    config: &GrowthConfig,
    nodes: &[Node],
    keep: &[bool],
    chosen_cp: f64,
    cv: Vec<CvRow>,
    mut notes: Vec<String>,
) -> GrownTree {
    let tree = to_tree(nodes, keep);
    if tree.is_root_only() {
        notes.push("no structure: pruning removed every split".to_string());
    }
    GrownTree {
        method: config.method,
        tree,
        chosen_cp,
        cv,
        notes,
    }
}

pub fn grow_cart(data: &MatchedPairSet, config: &GrowthConfig) -> Result<GrownTree> {
    grow(
        data,
        &GrowthConfig {
            method: Method::Cart,
            ..config.clone()
        },
    )
}

pub fn grow_ct(data: &MatchedPairSet, config: &GrowthConfig) -> Result<GrownTree> {
    grow(
        data,
        &GrowthConfig {
            method: Method::Ct,
            ..config.clone()
        },
    )
}
