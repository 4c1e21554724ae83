//! CART classification trees: Gini splitting over a random covariate
//! subsample, plus split counting along leaf-to-leaf paths.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Cell, CovariateKind, Dataset};
use crate::error::{Error, Result};

/// Branch predicate of a split node; rows satisfying it go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitRule {
    /// value ≤ threshold.
    Threshold { covariate: usize, threshold: f64 },
    /// Level index bit set in the mask.
    LevelSubset { covariate: usize, in_left: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    Split {
        rule: SplitRule,
        left: u32,
        right: u32,
    },
    Leaf {
        /// In-bag class counts at this terminal node.
        counts: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: u32,
    pub parent: Option<u32>,
    pub depth: u32,
    pub kind: NodeKind,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }
}

/// Strictly binary classification tree; node ids are indices into `nodes`,
/// the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

/// Growth controls shared by every tree of a forest.
#[derive(Debug, Clone, Copy)]
pub struct GrowParams {
    pub mtry: usize,
    pub min_leaf: usize,
    pub max_depth: Option<u32>,
}

impl Tree {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: u32) -> &TreeNode {
        &self.nodes[id as usize]
    }

    pub fn leaf_ids(&self) -> Vec<u32> {
        self.nodes
            .iter()
            .filter(|n| n.is_leaf())
            .map(|n| n.id)
            .collect()
    }

    /// Majority class at a leaf; ties go to the lowest class index.
    pub fn leaf_class(&self, leaf: u32) -> usize {
        match &self.node(leaf).kind {
            NodeKind::Leaf { counts } => {
                let mut best = 0;
                for (k, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = k;
                    }
                }
                best
            }
            NodeKind::Split { .. } => panic!("leaf_class on split node"),
        }
    }

    /// Terminal node reached by a (fully observed) row.
    pub fn route(&self, ds: &Dataset, row: usize) -> u32 {
        let mut id = 0u32;
        loop {
            match &self.nodes[id as usize].kind {
                NodeKind::Leaf { .. } => return id,
                NodeKind::Split { rule, left, right } => {
                    let goes_left = match *rule {
                        SplitRule::Threshold {
                            covariate,
                            threshold,
                        } => match ds.value(row, covariate) {
                            Some(Cell::Num(x)) => x <= threshold,
                            _ => panic!("routing requires a complete dataset"),
                        },
                        SplitRule::LevelSubset { covariate, in_left } => {
                            match ds.value(row, covariate) {
                                Some(Cell::Level(l)) => in_left >> l & 1 == 1,
                                _ => panic!("routing requires a complete dataset"),
                            }
                        }
                    };
                    id = if goes_left { *left } else { *right };
                }
            }
        }
    }

    /// Grow a tree on a bootstrap multiset of row indices.
    pub fn grow(
        ds: &Dataset,
        rows: &[usize],
        n_classes: usize,
        gp: &GrowParams,
        rng: &mut ChaCha8Rng,
    ) -> Tree {
        let mut nodes = Vec::new();
        grow_rec(ds, rows.to_vec(), n_classes, gp, rng, &mut nodes, None, 0);
        Tree { nodes }
    }
}

fn class_counts(ds: &Dataset, rows: &[usize], n_classes: usize) -> Vec<u32> {
    let mut counts = vec![0u32; n_classes];
    for &i in rows {
        counts[ds.cohort_of(i)] += 1;
    }
    counts
}

fn gini(counts: &[u32], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

#[allow(clippy::too_many_arguments)]
fn grow_rec(
    ds: &Dataset,
    rows: Vec<usize>,
    n_classes: usize,
    gp: &GrowParams,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<TreeNode>,
    parent: Option<u32>,
    depth: u32,
) -> u32 {
    let id = nodes.len() as u32;
    let counts = class_counts(ds, &rows, n_classes);
    nodes.push(TreeNode {
        id,
        parent,
        depth,
        kind: NodeKind::Leaf {
            counts: counts.clone(),
        },
    });

    let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
    let depth_ok = gp.max_depth.map_or(true, |m| depth < m);
    if pure || !depth_ok || rows.len() < 2 * gp.min_leaf {
        return id;
    }

    // Candidate covariates: mtry drawn without replacement, examined in
    // ascending index order so Gini ties resolve deterministically.
    let p_total = ds.n_covariates();
    let mut candidates = rand::seq::index::sample(rng, p_total, gp.mtry.min(p_total)).into_vec();
    candidates.sort_unstable();

    let parent_gini = gini(&counts, rows.len());
    let mut best: Option<(f64, SplitRule)> = None;
    for &p in &candidates {
        if let Some((gain, rule)) = best_split_on(ds, &rows, &counts, parent_gini, p, gp.min_leaf)
        {
            if best.as_ref().map_or(true, |(g, _)| gain > *g) {
                best = Some((gain, rule));
            }
        }
    }

    let Some((_, rule)) = best else {
        return id;
    };

    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.into_iter().partition(|&i| row_goes_left(ds, i, &rule));
    let left = grow_rec(ds, left_rows, n_classes, gp, rng, nodes, Some(id), depth + 1);
    let right = grow_rec(
        ds, right_rows, n_classes, gp, rng, nodes, Some(id), depth + 1,
    );
    nodes[id as usize].kind = NodeKind::Split { rule, left, right };
    id
}

fn row_goes_left(ds: &Dataset, row: usize, rule: &SplitRule) -> bool {
    match *rule {
        SplitRule::Threshold {
            covariate,
            threshold,
        } => match ds.value(row, covariate) {
            Some(Cell::Num(x)) => x <= threshold,
            _ => panic!("growing requires a complete dataset"),
        },
        SplitRule::LevelSubset { covariate, in_left } => match ds.value(row, covariate) {
            Some(Cell::Level(l)) => in_left >> l & 1 == 1,
            _ => panic!("growing requires a complete dataset"),
        },
    }
}

/// Best split of one covariate: numeric columns scan midpoints between
/// consecutive distinct sorted values; categorical columns enumerate level
/// subsets (all of them while feasible, one-vs-rest beyond that). Returns
/// the strictly positive best gain, scanning candidates in ascending
/// threshold / mask order so equal gains keep the lowest.
fn best_split_on(
    ds: &Dataset,
    rows: &[usize],
    parent_counts: &[u32],
    parent_gini: f64,
    p: usize,
    min_leaf: usize,
) -> Option<(f64, SplitRule)> {
    const MIN_GAIN: f64 = 1e-12;
    let n = rows.len();
    let n_classes = parent_counts.len();

    match ds.schema().kind(p) {
        CovariateKind::Categorical(levels) => {
            let n_levels = levels.len();
            let mut level_counts = vec![vec![0u32; n_classes]; n_levels];
            let mut level_totals = vec![0usize; n_levels];
            for &i in rows {
                let Some(Cell::Level(l)) = ds.value(i, p) else {
                    panic!("growing requires a complete dataset");
                };
                level_counts[l as usize][ds.cohort_of(i)] += 1;
                level_totals[l as usize] += 1;
            }
            let observed: Vec<usize> =
                (0..n_levels).filter(|&l| level_totals[l] > 0).collect();
            if observed.len() < 2 {
                return None;
            }

            // Candidate masks over observed levels: exhaustive (complements
            // deduped by pinning the lowest observed level to the left side)
            // while small, single-level splits otherwise.
            let masks: Vec<u64> = if observed.len() <= 12 {
                let lo = observed[0];
                let mut ms = Vec::new();
                let full: u64 = observed.iter().map(|&l| 1u64 << l).sum();
                for raw in 0u64..(1 << (observed.len() - 1)) {
                    // Spread the raw bits over observed levels above `lo`.
                    let mut mask = 1u64 << lo;
                    for (bit, &l) in observed[1..].iter().enumerate() {
                        if raw >> bit & 1 == 1 {
                            mask |= 1u64 << l;
                        }
                    }
                    if mask != full {
                        ms.push(mask);
                    }
                }
                ms.sort_unstable();
                ms
            } else {
                observed.iter().map(|&l| 1u64 << l).collect()
            };

            let mut best: Option<(f64, SplitRule)> = None;
            for mask in masks {
                let mut left_counts = vec![0u32; n_classes];
                let mut nl = 0usize;
                for &l in &observed {
                    if mask >> l & 1 == 1 {
                        nl += level_totals[l];
                        for k in 0..n_classes {
                            left_counts[k] += level_counts[l][k];
                        }
                    }
                }
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let right_counts: Vec<u32> = parent_counts
                    .iter()
                    .zip(&left_counts)
                    .map(|(&a, &b)| a - b)
                    .collect();
                let w = (nl as f64 * gini(&left_counts, nl)
                    + nr as f64 * gini(&right_counts, nr))
                    / n as f64;
                let gain = parent_gini - w;
                if gain > MIN_GAIN && best.as_ref().map_or(true, |(g, _)| gain > *g) {
                    best = Some((
                        gain,
                        SplitRule::LevelSubset {
                            covariate: p,
                            in_left: mask,
                        },
                    ));
                }
            }
            best
        }
        _ => {
            let mut pairs: Vec<(f64, usize)> = rows
                .iter()
                .map(|&i| {
                    let Some(Cell::Num(x)) = ds.value(i, p) else {
                        panic!("growing requires a complete dataset");
                    };
                    (x, ds.cohort_of(i))
                })
                .collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

            let mut left_counts = vec![0u32; n_classes];
            let mut best: Option<(f64, f64)> = None; // (gain, threshold)
            for i in 1..n {
                left_counts[pairs[i - 1].1] += 1;
                if pairs[i].0 <= pairs[i - 1].0 {
                    continue;
                }
                let (nl, nr) = (i, n - i);
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let right_counts: Vec<u32> = parent_counts
                    .iter()
                    .zip(&left_counts)
                    .map(|(&a, &b)| a - b)
                    .collect();
                let w = (nl as f64 * gini(&left_counts, nl)
                    + nr as f64 * gini(&right_counts, nr))
                    / n as f64;
                let gain = parent_gini - w;
                if gain > MIN_GAIN && best.map_or(true, |(g, _)| gain > g) {
                    best = Some((gain, (pairs[i - 1].0 + pairs[i].0) / 2.0));
                }
            }
            best.map(|(gain, threshold)| {
                (
                    gain,
                    SplitRule::Threshold {
                        covariate: p,
                        threshold,
                    },
                )
            })
        }
    }
}

/// Split (internal) node counts for a leaf pair: `S` over the unique path
/// between the leaves, `R` over the walk leaf_a → root → leaf_b with the
/// root junction counted once. Identical leaves give S = 0 (their ratio
/// contribution is defined as 0).
pub fn path_split_counts(tree: &Tree, leaf_a: u32, leaf_b: u32) -> Result<(u32, u32)> {
    for id in [leaf_a, leaf_b] {
        let node = tree
            .nodes
            .get(id as usize)
            .ok_or_else(|| Error::InvalidParam(format!("node {id} not in tree")))?;
        if !node.is_leaf() {
            return Err(Error::InvalidParam(format!("node {id} is not a leaf")));
        }
    }
    let da = tree.node(leaf_a).depth;
    let db = tree.node(leaf_b).depth;
    if leaf_a == leaf_b {
        return Ok((0, (2 * da).saturating_sub(1)));
    }

    // Lift the deeper leaf, then climb in lockstep to the LCA.
    let (mut a, mut b) = (leaf_a, leaf_b);
    let (mut da_w, mut db_w) = (da, db);
    while da_w > db_w {
        a = tree.node(a).parent.expect("depth implies a parent");
        da_w -= 1;
    }
    while db_w > da_w {
        b = tree.node(b).parent.expect("depth implies a parent");
        db_w -= 1;
    }
    while a != b {
        a = tree.node(a).parent.expect("distinct nodes below the root");
        b = tree.node(b).parent.expect("distinct nodes below the root");
        da_w -= 1;
    }
    let d_lca = da_w;
    Ok((da + db - 2 * d_lca - 1, da + db - 1))
}
