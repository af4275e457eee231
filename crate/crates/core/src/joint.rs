//! Joint deviates for every node of a tree and their simultaneous
//! critical value.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::conversion::ConversionMatrix;
use crate::error::{Error, Result};
use crate::mvn::{equicoordinate_quantile_with, CorrelationFactor, QmcSettings};
use crate::normal;
use crate::signed_rank::{clamped_deviate, GroupMoments};

/// Statistics, bounding means and deviates for the non-root nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDeviates {
    /// Node ids in conversion-matrix row order, degenerate rows removed.
    pub node_ids: Vec<usize>,
    pub statistic: Vec<f64>,
    pub mean_upper: Vec<f64>,
    pub mean_lower: Vec<f64>,
    pub sd: Vec<f64>,
    pub deviates: Vec<f64>,
    pub correlation: Vec<Vec<f64>>,
    pub d_max: f64,
    /// Nodes dropped because their null variance is zero.
    pub excluded: Vec<usize>,
}

/// Maps per-leaf moments through the conversion matrix.
pub fn assemble(c: &ConversionMatrix, leaves: &[GroupMoments]) -> Result<JointDeviates> {
    if leaves.len() != c.cols() {
        return Err(Error::Data(format!(
            "{} leaf groups supplied for a tree with {} leaves",
            leaves.len(),
            c.cols()
        )));
    }
    let mut out = JointDeviates {
        node_ids: Vec::new(),
        statistic: Vec::new(),
        mean_upper: Vec::new(),
        mean_lower: Vec::new(),
        sd: Vec::new(),
        deviates: Vec::new(),
        correlation: Vec::new(),
        d_max: 0.0,
        excluded: Vec::new(),
    };
    let mut members = Vec::new();
    for (k, row) in c.entries.iter().enumerate() {
        let (mut s, mut up, mut lo, mut var) = (0.0, 0.0, 0.0, 0.0);
        for (g, &flag) in row.iter().enumerate() {
            if flag == 1 {
                let m = &leaves[g];
                s += m.statistic;
                up += m.mean_upper;
                lo += m.mean_lower;
                var += m.variance;
            }
        }
        if var <= 0.0 {
            out.excluded.push(c.row_labels[k]);
            continue;
        }
        let sd = var.sqrt();
        let d = clamped_deviate(s, up, lo, sd);
        out.node_ids.push(c.row_labels[k]);
        out.statistic.push(s);
        out.mean_upper.push(up);
        out.mean_lower.push(lo);
        out.sd.push(sd);
        out.deviates.push(d);
        members.push(k);
    }
    if out.node_ids.is_empty() {
        return Err(Error::Data("every node has zero null variance".into()));
    }
    // Σ_jk = Σ_g C_jg C_kg ν_g.
    let n = members.len();
    let mut rho = vec![vec![0.0; n]; n];
    for a in 0..n {
        rho[a][a] = 1.0;
        for b in a + 1..n {
            let cov: f64 = c.entries[members[a]]
                .iter()
                .zip(&c.entries[members[b]])
                .zip(leaves)
                .filter(|((&x, &y), _)| x == 1 && y == 1)
                .map(|(_, m)| m.variance)
                .sum();
            let r = cov / (out.sd[a] * out.sd[b]);
            rho[a][b] = r;
            rho[b][a] = r;
        }
    }
    out.correlation = rho;
    out.d_max = out.deviates.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    Ok(out)
}

/// Memoized critical values keyed by the exact correlation matrix and level.
#[derive(Debug, Default)]
pub struct CriticalValues {
    settings: QmcSettings,
    cache: Mutex<HashMap<(u64, Vec<u64>), f64>>,
}

impl CriticalValues {
    pub fn new(settings: QmcSettings) -> Self {
        CriticalValues {
            settings,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn settings(&self) -> &QmcSettings {
        &self.settings
    }

    /// κ with Pr(max |X_k| ≤ κ) = 1 − α for X ~ N(0, rho).
    pub fn kappa(&self, rho: &[Vec<f64>], alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha {alpha} must lie in (0,1)")));
        }
        if rho.len() == 1 {
            return Ok(normal::two_sided_critical(alpha));
        }
        let key = (alpha.to_bits(), rho.iter().flatten().map(|v| v.to_bits()).collect());
        if let Some(&k) = self.cache.lock().unwrap().get(&key) {
            return Ok(k);
        }
        let factor = CorrelationFactor::new(rho)?;
        let k = equicoordinate_quantile_with(&factor, 1.0 - alpha, &self.settings)?;
        self.cache.lock().unwrap().insert(key, k);
        Ok(k)
    }
}

/// Outcome of testing a set of nodes at level α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupResult {
    pub node_ids: Vec<usize>,
    pub d_max: f64,
    pub kappa: f64,
    pub reject: bool,
}

/// Tests the nodes in `nodes` using the restriction of the joint
/// distribution to those rows. Passing every node gives the global test.
pub fn subgroup_test(
    joint: &JointDeviates,
    nodes: &[usize],
    alpha: f64,
    critical: &CriticalValues,
) -> Result<SubgroupResult> {
    let rows = select_rows(joint, nodes)?;
    let rho: Vec<Vec<f64>> = rows
        .iter()
        .map(|&a| rows.iter().map(|&b| joint.correlation[a][b]).collect())
        .collect();
    let d_max = rows.iter().fold(0.0f64, |m, &r| m.max(joint.deviates[r].abs()));
    let kappa = critical.kappa(&rho, alpha)?;
    Ok(SubgroupResult {
        node_ids: rows.iter().map(|&r| joint.node_ids[r]).collect(),
        d_max,
        kappa,
        reject: d_max > kappa,
    })
}

fn select_rows(joint: &JointDeviates, nodes: &[usize]) -> Result<Vec<usize>> {
    let mut rows = Vec::with_capacity(nodes.len());
    for &id in nodes {
        match joint.node_ids.iter().position(|&n| n == id) {
            Some(r) => {
                if !rows.contains(&r) {
                    rows.push(r)
                }
            }
            None if joint.excluded.contains(&id) => {}
            None => return Err(Error::UnknownNode(id)),
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("no testable nodes in the requested set".into()));
    }
    rows.sort_unstable();
    Ok(rows)
}
