//! Binary partitions of covariate space.
//!
//! Numeric splits send `value <= threshold` to the left child (ties go left);
//! categorical splits send the listed level indices to the left child.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MatchedPairSet, Schema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SplitRule {
    Threshold { covariate: String, threshold: f64 },
    Categories { covariate: String, left: BTreeSet<u32> },
}

impl SplitRule {
    pub fn covariate(&self) -> &str {
        match self {
            SplitRule::Threshold { covariate, .. } | SplitRule::Categories { covariate, .. } => covariate,
        }
    }

    pub fn goes_left(&self, value: f64) -> bool {
        match self {
            SplitRule::Threshold { threshold, .. } => value <= *threshold,
            SplitRule::Categories { left, .. } => value >= 0.0 && left.contains(&(value as u32)),
        }
    }

    /// Edge label for the left or right branch.
    pub fn describe(&self, left: bool, schema: Option<&Schema>) -> String {
        match self {
            SplitRule::Threshold { covariate, threshold } => {
                let op = if left { "<=" } else { ">" };
                format!("{covariate} {op} {threshold}")
            }
            SplitRule::Categories { covariate, left: set } => {
                let levels: Option<&Vec<String>> = schema.and_then(|s| {
                    s.covariates.iter().find(|c| &c.name == covariate).and_then(|c| match &c.kind {
                        crate::model::CovariateKind::Categorical { levels } => Some(levels),
                        _ => None,
                    })
                });
                let name = |i: u32| -> String {
                    levels
                        .and_then(|l| l.get(i as usize).cloned())
                        .unwrap_or_else(|| i.to_string())
                };
                let shown: Vec<String> = if left {
                    set.iter().map(|&i| name(i)).collect()
                } else if let Some(l) = levels {
                    (0..l.len() as u32).filter(|i| !set.contains(i)).map(name).collect()
                } else {
                    return format!("{covariate} not in {{{}}}", join(set.iter().map(|&i| name(i))));
                };
                format!("{covariate} in {{{}}}", join(shown.into_iter()))
            }
        }
    }
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRule>,
    #[serde(default)]
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTree {
    nodes: Vec<TreeNode>,
}

/// A validated binary tree. Construct with [`TreeBuilder`] or [`EffectTree::from_json`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTree", into = "RawTree")]
pub struct EffectTree {
    nodes: Vec<TreeNode>,
    index: BTreeMap<usize, usize>,
    root: usize,
    terminal_ids: Vec<usize>,
    internal_ids: Vec<usize>,
}

impl From<EffectTree> for RawTree {
    fn from(t: EffectTree) -> Self {
        RawTree { nodes: t.nodes }
    }
}

impl TryFrom<RawTree> for EffectTree {
    type Error = Error;
    fn try_from(raw: RawTree) -> Result<Self> {
        EffectTree::from_nodes(raw.nodes)
    }
}

impl EffectTree {
    /// Validates a node list and fixes the terminal and internal orderings.
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        let bad = |m: String| Error::Data(format!("invalid tree: {m}"));
        if nodes.is_empty() {
            return Err(bad("no nodes".into()));
        }
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id, i).is_some() {
                return Err(bad(format!("duplicate node id {}", n.id)));
            }
        }
        let roots: Vec<usize> = nodes.iter().filter(|n| n.parent.is_none()).map(|n| n.id).collect();
        if roots.len() != 1 {
            return Err(bad(format!("expected one root, found {}", roots.len())));
        }
        for n in &nodes {
            match (n.children.len(), &n.split) {
                (0, None) => {}
                (2, Some(rule)) => {
                    if let SplitRule::Threshold { threshold, .. } = rule {
                        if !threshold.is_finite() {
                            return Err(bad(format!("node {} has a non-finite threshold", n.id)));
                        }
                    }
                    for c in &n.children {
                        let child = index.get(c).map(|&i| &nodes[i]).ok_or_else(|| bad(format!("missing child {c}")))?;
                        if child.parent != Some(n.id) {
                            return Err(bad(format!("child {c} does not point back to {}", n.id)));
                        }
                    }
                    if n.children[0] == n.children[1] {
                        return Err(bad(format!("node {} lists the same child twice", n.id)));
                    }
                }
                _ => return Err(bad(format!("node {} must have 0 children or 2 children with a split", n.id))),
            }
            if let Some(p) = n.parent {
                let parent = index.get(&p).map(|&i| &nodes[i]).ok_or_else(|| bad(format!("missing parent {p}")))?;
                if !parent.children.contains(&n.id) {
                    return Err(bad(format!("parent {p} does not list child {}", n.id)));
                }
            }
        }
        let root = roots[0];
        let mut terminal_ids = Vec::new();
        let mut internal_ids = Vec::new();
        let mut seen = 0usize;
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            seen += 1;
            if seen > nodes.len() {
                return Err(bad("cycle detected".into()));
            }
            let node = &nodes[index[&id]];
            if node.children.is_empty() {
                terminal_ids.push(id);
            } else {
                if id != root {
                    internal_ids.push(id);
                }
                stack.push(node.children[1]);
                stack.push(node.children[0]);
            }
        }
        if seen != nodes.len() {
            return Err(bad("unreachable nodes present".into()));
        }
        Ok(EffectTree {
            nodes,
            index,
            root,
            terminal_ids,
            internal_ids,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Result<&TreeNode> {
        self.index.get(&id).map(|&i| &self.nodes[i]).ok_or(Error::UnknownNode(id))
    }

    /// Leaves ℓ1..ℓG in left-to-right order.
    pub fn terminal_ids(&self) -> &[usize] {
        &self.terminal_ids
    }

    /// Non-root internal nodes in preorder.
    pub fn internal_ids(&self) -> &[usize] {
        &self.internal_ids
    }

    pub fn leaf_count(&self) -> usize {
        self.terminal_ids.len()
    }

    pub fn is_root_only(&self) -> bool {
        self.nodes.len() == 1
    }

    /// Positions (in terminal order) of the leaves below `id`.
    pub fn descendant_leaves(&self, id: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        self.node(id)?;
        while let Some(n) = stack.pop() {
            let node = self.node(n)?;
            if node.children.is_empty() {
                out.push(self.terminal_ids.iter().position(|&t| t == n).expect("leaf is terminal"));
            } else {
                stack.extend(node.children.iter().copied());
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// The node itself plus every non-root node below it.
    pub fn subtree_ids(&self, id: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = self.node(n)?;
            if n != self.root {
                out.push(n);
            }
            stack.extend(node.children.iter().rev().copied());
        }
        Ok(out)
    }

    /// Covariates used by any split, sorted and deduplicated.
    pub fn split_covariates(&self) -> BTreeSet<String> {
        self.nodes
            .iter()
            .filter_map(|n| n.split.as_ref().map(|s| s.covariate().to_string()))
            .collect()
    }

    /// Short label such as `l2` for leaves or `l23` for unions of leaves.
    pub fn label(&self, id: usize) -> Result<String> {
        if id == self.root {
            return Ok("root".into());
        }
        let leaves = self.descendant_leaves(id)?;
        let sep = if self.leaf_count() >= 10 { "," } else { "" };
        Ok(format!(
            "l{}",
            leaves.iter().map(|g| (g + 1).to_string()).collect::<Vec<_>>().join(sep)
        ))
    }

    /// Routes a unit to its leaf position given a covariate lookup.
    pub fn leaf_position(&self, value_of: impl Fn(&str) -> Result<f64>) -> Result<usize> {
        let mut id = self.root;
        loop {
            let node = self.node(id)?;
            match &node.split {
                None => return Ok(self.terminal_ids.iter().position(|&t| t == id).expect("leaf")),
                Some(rule) => {
                    let v = value_of(rule.covariate())?;
                    id = if rule.goes_left(v) { node.children[0] } else { node.children[1] };
                }
            }
        }
    }

    /// Conjunction of edge conditions leading to `id`.
    pub fn path_description(&self, id: usize, schema: Option<&Schema>) -> Result<Vec<String>> {
        let mut parts = Vec::new();
        let mut cur = self.node(id)?;
        while let Some(p) = cur.parent {
            let parent = self.node(p)?;
            let rule = parent.split.as_ref().expect("internal node has split");
            parts.push(rule.describe(parent.children[0] == cur.id, schema));
            cur = parent;
        }
        parts.reverse();
        Ok(parts)
    }

    /// DOT rendering; `decorate` may add text and pick solid (true) or dashed boxes.
    pub fn to_dot_with(&self, schema: Option<&Schema>, decorate: impl Fn(usize) -> Option<(String, bool)>) -> String {
        let mut s = String::from("digraph effect_tree {\n  node [shape=box];\n");
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = self.node(id).expect("valid id");
            let mut text = self.label(id).expect("valid id");
            let mut style = "solid";
            if let Some((extra, solid)) = decorate(id) {
                if !extra.is_empty() {
                    text.push_str("\\n");
                    text.push_str(&extra.replace('"', "'"));
                }
                if !solid {
                    style = "dashed";
                }
            }
            let _ = writeln!(s, "  n{id} [label=\"{text}\", style={style}];");
            if let Some(rule) = &node.split {
                for (k, &c) in node.children.iter().enumerate() {
                    let edge = rule.describe(k == 0, schema).replace('"', "'");
                    let _ = writeln!(s, "  n{id} -> n{c} [label=\"{edge}\"];");
                }
                stack.push(node.children[1]);
                stack.push(node.children[0]);
            }
        }
        s.push_str("}\n");
        s
    }

    pub fn to_dot(&self, schema: Option<&Schema>) -> String {
        self.to_dot_with(schema, |_| None)
    }
}

/// Incremental construction; node ids are renumbered in preorder on `finish`.
#[derive(Debug, Default)]
pub struct TreeBuilder {
    nodes: Vec<TreeNode>,
}

impl TreeBuilder {
    pub fn new() -> Self {
        TreeBuilder {
            nodes: vec![TreeNode {
                id: 0,
                parent: None,
                split: None,
                children: Vec::new(),
            }],
        }
    }

    pub const ROOT: usize = 0;

    /// Splits a current leaf and returns (left, right) ids.
    pub fn split(&mut self, id: usize, rule: SplitRule) -> (usize, usize) {
        assert!(self.nodes[id].children.is_empty(), "node {id} already split");
        let left = self.nodes.len();
        let right = left + 1;
        for child in [left, right] {
            self.nodes.push(TreeNode {
                id: child,
                parent: Some(id),
                split: None,
                children: Vec::new(),
            });
        }
        self.nodes[id].split = Some(rule);
        self.nodes[id].children = vec![left, right];
        (left, right)
    }

    pub fn finish(self) -> EffectTree {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            order.push(id);
            let c = &self.nodes[id].children;
            if !c.is_empty() {
                stack.push(c[1]);
                stack.push(c[0]);
            }
        }
        let mut new_id = vec![0usize; self.nodes.len()];
        for (pos, &old) in order.iter().enumerate() {
            new_id[old] = pos;
        }
        let nodes = order
            .iter()
            .map(|&old| {
                let n = &self.nodes[old];
                TreeNode {
                    id: new_id[old],
                    parent: n.parent.map(|p| new_id[p]),
                    split: n.split.clone(),
                    children: n.children.iter().map(|&c| new_id[c]).collect(),
                }
            })
            .collect();
        EffectTree::from_nodes(nodes).expect("builder produces valid trees")
    }
}

/// Result of routing pairs through a tree.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub data: MatchedPairSet,
    /// Leaf positions that received no pairs.
    pub empty_leaves: Vec<usize>,
}

/// Routes every pair to a leaf. Both members must fall on the same side of
/// every split they meet.
pub fn assign_pairs(tree: &EffectTree, data: &MatchedPairSet) -> Result<Assignment> {
    let mut indices = BTreeMap::new();
    for name in tree.split_covariates() {
        indices.insert(name.clone(), data.schema.require(&name)?);
    }
    let mut groups = Vec::with_capacity(data.pairs.len());
    let mut sizes = vec![0usize; tree.leaf_count()];
    for pair in &data.pairs {
        let mut id = tree.root();
        let leaf = loop {
            let node = tree.node(id)?;
            match &node.split {
                None => break tree.terminal_ids().iter().position(|&t| t == id).expect("leaf"),
                Some(rule) => {
                    let k = indices[rule.covariate()];
                    let t = rule.goes_left(pair.treated.covariates[k]);
                    let c = rule.goes_left(pair.control.covariates[k]);
                    if t != c {
                        return Err(Error::PairNotRoutable {
                            pair_id: pair.pair_id.clone(),
                            covariate: rule.covariate().to_string(),
                        });
                    }
                    id = if t { node.children[0] } else { node.children[1] };
                }
            }
        };
        sizes[leaf] += 1;
        groups.push(leaf);
    }
    let mut out = data.clone();
    out.group_of_pair = Some(groups);
    Ok(Assignment {
        data: out,
        empty_leaves: sizes.iter().enumerate().filter(|(_, &n)| n == 0).map(|(g, _)| g).collect(),
    })
}

#[cfg(test)]
pub(crate) mod examples {
    use super::*;

    pub fn threshold(name: &str) -> SplitRule {
        SplitRule::Threshold {
            covariate: name.into(),
            threshold: 0.5,
        }
    }

    /// Female / old male / young male.
    pub fn sex_then_age() -> EffectTree {
        let mut b = TreeBuilder::new();
        let (_, male) = b.split(TreeBuilder::ROOT, threshold("male"));
        b.split(male, threshold("young"));
        b.finish()
    }

    pub fn balanced_four() -> EffectTree {
        let mut b = TreeBuilder::new();
        let (l, r) = b.split(TreeBuilder::ROOT, threshold("x1"));
        b.split(l, threshold("x2"));
        b.split(r, threshold("x2"));
        b.finish()
    }
}
