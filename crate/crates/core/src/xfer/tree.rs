use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PreimageSystem;
use crate::error::{Error, Result};
use crate::model::BranchSet;

/// Parents expanded together; pruning thresholds are fixed per chunk.
const CHUNK: usize = 2048;

/// One generation of a preimage tree, stored column-wise.
#[derive(Debug, Clone, Default)]
pub struct TreeLevel {
    pub points: Vec<Complex64>,
    pub parent: Vec<u32>,
    pub branch: Vec<i64>,
    /// `exp(S_kΦ)` of each node.
    pub weight: Vec<f64>,
    /// Sum of retained weights.
    pub total: f64,
    /// Mass of pruned children.
    pub dropped: f64,
    /// Certified mass of branches beyond the enumerated ones.
    pub branch_tail: f64,
}

impl TreeLevel {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mass lost at this level by truncation and pruning.
    pub fn lost(&self) -> f64 {
        self.dropped + self.branch_tail
    }
}

/// The truncated tree of iterated preimages of a root point.
#[derive(Debug, Clone)]
pub struct PreimageTree {
    pub root: Complex64,
    /// `levels[0]` holds the root with weight 1.
    pub levels: Vec<TreeLevel>,
    /// Bound for `sup L𝟙` used to propagate lost mass to deeper levels.
    pub one_norm: f64,
}

/// JSON summary of a tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeSummary {
    pub root: [f64; 2],
    pub depth: usize,
    pub node_counts: Vec<usize>,
    pub values: Vec<f64>,
    pub tail_certificates: Vec<f64>,
    pub value: f64,
    pub tail_certificate: f64,
}

impl PreimageTree {
    /// Expands `depth` generations of preimages of `root`.
    ///
    /// Parents are expanded in chunks (in parallel within a chunk); children of a
    /// chunk lighter than `node_tol` times the running level mass are dropped and
    /// their mass recorded. The traversal order is fixed, so the tree does not
    /// depend on the worker count.
    pub fn build<S: PreimageSystem>(
        sys: &S,
        root: Complex64,
        depth: usize,
        node_tol: f64,
        node_budget: usize,
    ) -> Result<Self> {
        let mut levels = vec![TreeLevel {
            points: vec![root],
            parent: vec![0],
            branch: vec![0],
            weight: vec![1.0],
            total: 1.0,
            dropped: 0.0,
            branch_tail: 0.0,
        }];
        let mut nodes = 1usize;
        for d in 1..=depth {
            let prev = &levels[d - 1];
            let mut next = TreeLevel::default();
            let mut running = 0.0;
            for start in (0..prev.len()).step_by(CHUNK) {
                let end = (start + CHUNK).min(prev.len());
                let sets: Vec<Result<BranchSet>> = prev.points[start..end]
                    .par_iter()
                    .map(|&w| sys.branch_set(w))
                    .collect();
                let mut chunk_total = 0.0;
                let mut chunk = Vec::with_capacity(sets.len());
                for (off, set) in sets.into_iter().enumerate() {
                    let set = set.map_err(|e| match e {
                        Error::TruncationFailure { .. } => e,
                        other => Error::BranchUndefined {
                            depth: d,
                            source: Box::new(other),
                        },
                    })?;
                    let pw = prev.weight[start + off];
                    chunk_total += pw * set.total_weight();
                    next.branch_tail += pw * set.tail;
                    chunk.push((start + off, pw, set));
                }
                running += chunk_total;
                let threshold = node_tol * running;
                for (pi, pw, set) in chunk {
                    for b in set.branches {
                        let w = pw * b.metric_weight;
                        if w >= threshold && w > 0.0 {
                            next.points.push(b.z);
                            next.parent.push(pi as u32);
                            next.branch.push(b.branch_index);
                            next.weight.push(w);
                        } else {
                            next.dropped += w;
                        }
                    }
                }
                if nodes + next.len() > node_budget {
                    return Err(Error::NodeBudget {
                        budget: node_budget,
                        achieved_depth: d - 1,
                        nodes: nodes + next.len(),
                    });
                }
            }
            next.total = next.weight.iter().sum();
            nodes += next.len();
            levels.push(next);
        }
        Ok(Self {
            root,
            levels,
            one_norm: sys.one_norm_bound(),
        })
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, n: usize) -> &TreeLevel {
        &self.levels[n]
    }

    /// Retained approximation of `L^n𝟙(root)`.
    pub fn value(&self, n: usize) -> f64 {
        self.levels[n].total
    }

    /// Bound for `L^n𝟙(root) − value(n)`.
    ///
    /// Mass lost at level `ℓ` can grow by at most `sup L𝟙` per further level.
    pub fn tail_certificate(&self, n: usize) -> f64 {
        (1..=n)
            .map(|l| self.levels[l].lost() * self.one_norm.powi((n - l) as i32))
            .sum()
    }

    /// Branch word of a node, outermost branch first.
    pub fn word(&self, level: usize, index: usize) -> Vec<i64> {
        let mut word = Vec::with_capacity(level);
        let mut i = index;
        for l in (1..=level).rev() {
            word.push(self.levels[l].branch[i]);
            i = self.levels[l].parent[i] as usize;
        }
        word.reverse();
        word
    }

    /// Ancestor chain of a node: `[node, f(node), …, root]`.
    pub fn ancestors(&self, level: usize, index: usize) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(level + 1);
        let mut i = index;
        for l in (0..=level).rev() {
            out.push(self.levels[l].points[i]);
            if l > 0 {
                i = self.levels[l].parent[i] as usize;
            }
        }
        out
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.levels.iter().map(TreeLevel::len).collect()
    }

    pub fn summary(&self) -> TreeSummary {
        let n = self.depth();
        TreeSummary {
            root: [self.root.re, self.root.im],
            depth: n,
            node_counts: self.node_counts(),
            values: (0..=n).map(|l| self.value(l)).collect(),
            tail_certificates: (0..=n).map(|l| self.tail_certificate(l)).collect(),
            value: self.value(n),
            tail_certificate: self.tail_certificate(n),
        }
    }
}
