//! The 0/1 matrix mapping leaf statistics onto every non-root node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::EffectTree;

/// Rows are non-root internal nodes in preorder, followed by the leaves
/// left to right. Columns are the leaves left to right.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionMatrix {
    pub entries: Vec<Vec<u8>>,
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
}

impl ConversionMatrix {
    pub fn rows(&self) -> usize {
        self.entries.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    /// C · v.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.entries
            .iter()
            .map(|row| row.iter().zip(v).filter(|(&c, _)| c == 1).map(|(_, x)| x).sum())
            .collect()
    }

    pub fn row_of(&self, node_id: usize) -> Result<usize> {
        self.row_labels
            .iter()
            .position(|&r| r == node_id)
            .ok_or(Error::UnknownNode(node_id))
    }

    /// Leaf columns contained in row `k`.
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.entries[k]
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 1)
            .map(|(g, _)| g)
            .collect()
    }
}

pub fn build_conversion_matrix(tree: &EffectTree) -> Result<ConversionMatrix> {
    let g = tree.leaf_count();
    if g < 2 {
        return Err(Error::DegenerateTree("a tree with fewer than two leaves has no comparisons".into()));
    }
    let mut entries = Vec::with_capacity(2 * g - 2);
    let mut row_labels = Vec::with_capacity(2 * g - 2);
    for &id in tree.internal_ids().iter().chain(tree.terminal_ids()) {
        let mut row = vec![0u8; g];
        for leaf in tree.descendant_leaves(id)? {
            row[leaf] = 1;
        }
        entries.push(row);
        row_labels.push(id);
    }
    Ok(ConversionMatrix {
        entries,
        row_labels,
        col_labels: tree.terminal_ids().to_vec(),
    })
}
