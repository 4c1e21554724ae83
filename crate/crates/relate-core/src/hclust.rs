//! Agglomerative clustering of cohorts into a strictly binary dendrogram.

use serde::{Deserialize, Serialize};

use crate::data::natural_cmp;
use crate::dissim::CohortDistanceMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    Average,
    Single,
    Complete,
}

impl std::str::FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Linkage::Average),
            "single" => Ok(Linkage::Single),
            "complete" => Ok(Linkage::Complete),
            other => Err(Error::InvalidParam(format!(
                "unknown linkage {other:?} (expected average, single or complete)"
            ))),
        }
    }
}

/// One agglomeration step; `left`/`right` are node ids (see [`Dendrogram`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
}

/// Strictly binary merge tree over cohorts. Node ids: `0..K` are leaves in
/// cohort-id order, `K + m` is the cluster created by `merges[m]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node < self.leaves.len()
    }

    pub fn root(&self) -> usize {
        self.leaves.len() + self.merges.len() - 1
    }

    pub fn children(&self, node: usize) -> Option<(usize, usize)> {
        if self.is_leaf(node) {
            None
        } else {
            let m = &self.merges[node - self.leaves.len()];
            Some((m.left, m.right))
        }
    }

    pub fn height(&self, node: usize) -> f64 {
        if self.is_leaf(node) {
            0.0
        } else {
            self.merges[node - self.leaves.len()].height
        }
    }

    /// Leaf indices under a node, ascending.
    pub fn leaves_under(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            match self.children(x) {
                None => out.push(x),
                Some((l, r)) => {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Naturally smallest cohort id under a node.
    fn min_label(&self, node: usize) -> &str {
        self.leaves_under(node)
            .iter()
            .map(|&l| self.leaves[l].as_str())
            .min_by(|a, b| natural_cmp(a, b))
            .expect("every node covers a leaf")
    }
}

/// Naive Lance–Williams agglomeration over the off-diagonal cohort
/// distances. Equal-distance candidates resolve to the pair with the
/// lexicographically smallest (min cohort index, max cohort index).
pub fn agglomerate(cdm: &CohortDistanceMatrix, linkage: Linkage) -> Result<Dendrogram> {
    let k = cdm.k();
    if k < 2 {
        return Err(Error::InvalidParam(
            "clustering requires at least two cohorts".into(),
        ));
    }

    struct Cluster {
        node: usize,
        size: usize,
        min_leaf: usize,
    }

    let mut clusters: Vec<Cluster> = (0..k)
        .map(|i| Cluster {
            node: i,
            size: 1,
            min_leaf: i,
        })
        .collect();
    // dist[a][b] between active clusters, indexed by position in `clusters`.
    let mut dist: Vec<Vec<f64>> = (0..k)
        .map(|a| (0..k).map(|b| cdm.get(a, b)).collect())
        .collect();

    let mut merges: Vec<Merge> = Vec::with_capacity(k - 1);
    let mut last_height = f64::NEG_INFINITY;

    while clusters.len() > 1 {
        // Scan pairs ordered by (min_leaf, min_leaf) so strict `<` keeps the
        // lexicographically smallest pair among exact ties.
        let mut order: Vec<usize> = (0..clusters.len()).collect();
        order.sort_by_key(|&a| clusters[a].min_leaf);
        let mut best: Option<(f64, usize, usize)> = None;
        for (oa, &a) in order.iter().enumerate() {
            for &b in &order[oa + 1..] {
                let d = dist[a][b];
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let (height, a, b) = best.expect("at least one pair");

        // Canonical child order: smaller min leaf on the left.
        let (left_pos, right_pos) = if clusters[a].min_leaf <= clusters[b].min_leaf {
            (a, b)
        } else {
            (b, a)
        };
        merges.push(Merge {
            left: clusters[left_pos].node,
            right: clusters[right_pos].node,
            height,
        });
        debug_assert!(
            height >= last_height - 1e-12,
            "linkage heights went backwards: {last_height} -> {height}"
        );
        last_height = height;

        let new_node = k + merges.len() - 1;
        let (sa, sb) = (clusters[a].size, clusters[b].size);
        let new_cluster = Cluster {
            node: new_node,
            size: sa + sb,
            min_leaf: clusters[a].min_leaf.min(clusters[b].min_leaf),
        };

        // New distances to every other active cluster.
        let mut new_dist: Vec<f64> = Vec::with_capacity(clusters.len());
        for c in 0..clusters.len() {
            if c == a || c == b {
                new_dist.push(0.0);
                continue;
            }
            let (da, db) = (dist[a][c], dist[b][c]);
            new_dist.push(match linkage {
                Linkage::Average => {
                    (sa as f64 * da + sb as f64 * db) / (sa + sb) as f64
                }
                Linkage::Single => da.min(db),
                Linkage::Complete => da.max(db),
            });
        }

        // Drop the two merged clusters (higher index first), append the new.
        let (hi, lo) = if a > b { (a, b) } else { (b, a) };
        for row in &mut dist {
            row.remove(hi);
            row.remove(lo);
        }
        dist.remove(hi);
        dist.remove(lo);
        new_dist.remove(hi);
        new_dist.remove(lo);
        clusters.remove(hi);
        clusters.remove(lo);

        for (row, &d) in dist.iter_mut().zip(&new_dist) {
            row.push(d);
        }
        new_dist.push(0.0);
        dist.push(new_dist);
        clusters.push(new_cluster);
    }

    Ok(Dendrogram {
        leaves: cdm.cohort_ids.clone(),
        merges,
    })
}

/// Quote a label when it contains Newick metacharacters.
fn newick_label(label: &str) -> String {
    if label
        .chars()
        .any(|c| c.is_whitespace() || matches!(c, '(' | ')' | ',' | ':' | ';' | '\''))
    {
        format!("'{}'", label.replace('\'', "''"))
    } else {
        label.to_owned()
    }
}

/// Canonical Newick rendering with branch lengths = parent height − child
/// height; children are ordered by their smallest cohort id.
pub fn to_newick(d: &Dendrogram) -> String {
    fn rec(d: &Dendrogram, node: usize, parent_height: Option<f64>, out: &mut String) {
        match d.children(node) {
            None => out.push_str(&newick_label(&d.leaves[node])),
            Some((l, r)) => {
                let (first, second) =
                    if natural_cmp(d.min_label(l), d.min_label(r)).is_le() {
                        (l, r)
                    } else {
                        (r, l)
                    };
                out.push('(');
                rec(d, first, Some(d.height(node)), out);
                out.push(',');
                rec(d, second, Some(d.height(node)), out);
                out.push(')');
            }
        }
        if let Some(ph) = parent_height {
            out.push_str(&format!(":{}", ph - d.height(node)));
        }
    }
    let mut out = String::new();
    rec(d, d.root(), None, &mut out);
    out.push(';');
    out
}
