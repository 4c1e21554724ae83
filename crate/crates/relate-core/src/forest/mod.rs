//! Multi-class random forest predicting cohort membership, and the
//! tree-path dissimilarity it induces between participants.

mod impute;
mod tree;

pub use impute::impute_for_fit;
pub use tree::{path_split_counts, GrowParams, NodeKind, SplitRule, Tree, TreeNode};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{mix, tags, tree_stream};

/// Forest fitting knobs. `mtry` defaults to ⌈√P⌉, `min_leaf` to 5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub mtry: usize,
    pub min_leaf: usize,
    pub max_depth: Option<u32>,
    pub seed: u64,
}

impl ForestParams {
    /// Defaults for a dataset with `n_covariates` covariates.
    pub fn new(n_covariates: usize) -> Self {
        ForestParams {
            n_trees: 500,
            mtry: (n_covariates as f64).sqrt().ceil() as usize,
            min_leaf: 5,
            max_depth: None,
            seed: 0,
        }
    }

    fn validate(&self, n_covariates: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidParam("n_trees must be at least 1".into()));
        }
        if self.mtry == 0 || self.mtry > n_covariates {
            return Err(Error::InvalidParam(format!(
                "mtry must be in 1..={n_covariates}, got {}",
                self.mtry
            )));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidParam("min_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

/// A fitted forest: `terminal_of[b][i]` is the terminal node of row `i` in
/// tree `b` (every row routed, in-bag or not).
#[derive(Debug, Clone)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub params: ForestParams,
    pub terminal_of: Vec<Vec<u32>>,
    /// K×K out-of-bag confusion matrix, true cohort in rows.
    pub oob_confusion: Vec<Vec<u32>>,
    pub warnings: Vec<String>,
    n_classes: usize,
}

const FOREST_DOC_VERSION: u32 = 1;

/// On-disk forest document; terminal assignments and the OOB confusion are
/// rebuilt on load by replaying the seeded bootstrap.
#[derive(Serialize, Deserialize)]
struct ForestDoc {
    version: u32,
    params: ForestParams,
    n_rows: usize,
    n_classes: usize,
    trees: Vec<Tree>,
}

/// The N seeded bootstrap draws for one tree. Must stay the first RNG use
/// of a tree's stream: serialization replays it to recover in-bag sets.
fn bootstrap_rows(rng: &mut ChaCha8Rng, n: usize) -> (Vec<usize>, Vec<bool>) {
    let mut rows = Vec::with_capacity(n);
    let mut in_bag = vec![false; n];
    for _ in 0..n {
        let i = rng.gen_range(0..n);
        rows.push(i);
        in_bag[i] = true;
    }
    (rows, in_bag)
}

/// Fit `params.n_trees` CART trees on bootstrap samples of the dataset.
///
/// Missing cells are completed for fitting by [`impute_for_fit`]; the
/// original dataset is left untouched. Per-tree RNG streams are derived as
/// seed ⊕ tree-index, so results do not depend on the worker thread count.
pub fn fit_forest(ds: &Dataset, params: &ForestParams) -> Result<Forest> {
    if ds.n_cohorts() < 2 {
        return Err(Error::InvalidParam(
            "forest fitting requires at least two cohorts".into(),
        ));
    }
    params.validate(ds.n_covariates())?;

    let completed;
    let fit_ds = if ds.has_missing() {
        completed = impute_for_fit(ds, params)?;
        &completed
    } else {
        ds
    };

    let forest = fit_complete(fit_ds, params);
    Ok(forest)
}

/// Growth and routing on an already complete dataset.
pub(crate) fn fit_complete(fit_ds: &Dataset, params: &ForestParams) -> Forest {
    let n = fit_ds.n_rows();
    let k = fit_ds.n_cohorts();
    let gp = GrowParams {
        mtry: params.mtry,
        min_leaf: params.min_leaf,
        max_depth: params.max_depth,
    };

    let grown: Vec<(Tree, Vec<bool>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = tree_stream(params.seed, b as u64);
            let (rows, in_bag) = bootstrap_rows(&mut rng, n);
            let tree = Tree::grow(fit_ds, &rows, k, &gp, &mut rng);
            (tree, in_bag)
        })
        .collect();

    let terminal_of: Vec<Vec<u32>> = grown
        .par_iter()
        .map(|(tree, _)| (0..n).map(|i| tree.route(fit_ds, i)).collect())
        .collect();

    let mut warnings = Vec::new();
    if grown.iter().all(|(t, _)| t.n_nodes() == 1) {
        warnings.push(
            "every tree is a single leaf: the covariates cannot separate the cohorts".into(),
        );
    }

    let in_bags: Vec<Vec<bool>> = grown.iter().map(|(_, ib)| ib.clone()).collect();
    let trees: Vec<Tree> = grown.into_iter().map(|(t, _)| t).collect();
    let oob_confusion = oob_confusion(fit_ds, &trees, &terminal_of, &in_bags, k);

    Forest {
        trees,
        params: params.clone(),
        terminal_of,
        oob_confusion,
        warnings,
        n_classes: k,
    }
}

fn oob_confusion(
    ds: &Dataset,
    trees: &[Tree],
    terminal_of: &[Vec<u32>],
    in_bags: &[Vec<bool>],
    k: usize,
) -> Vec<Vec<u32>> {
    let n = ds.n_rows();
    let mut votes = vec![0u32; n * k];
    let mut any_oob = vec![false; n];
    for (b, tree) in trees.iter().enumerate() {
        for i in 0..n {
            if !in_bags[b][i] {
                votes[i * k + tree.leaf_class(terminal_of[b][i])] += 1;
                any_oob[i] = true;
            }
        }
    }
    let mut confusion = vec![vec![0u32; k]; k];
    for i in 0..n {
        if !any_oob[i] {
            continue;
        }
        let row = &votes[i * k..(i + 1) * k];
        let mut pred = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[pred] {
                pred = c;
            }
        }
        confusion[ds.cohort_of(i)][pred] += 1;
    }
    confusion
}

impl Forest {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_rows(&self) -> usize {
        self.terminal_of.first().map_or(0, Vec::len)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Fraction of out-of-bag predictions matching the true cohort.
    pub fn oob_accuracy(&self) -> f64 {
        let total: u32 = self.oob_confusion.iter().flatten().sum();
        if total == 0 {
            return 0.0;
        }
        let hits: u32 = (0..self.n_classes)
            .map(|kk| self.oob_confusion[kk][kk])
            .sum();
        hits as f64 / total as f64
    }

    /// Tree-path dissimilarity between two rows of the fitting dataset:
    /// the S/R split-count ratio averaged over trees, 0 for same-leaf trees.
    pub fn pair_dissimilarity(&self, i: usize, j: usize) -> f64 {
        let mut total = 0.0;
        for (b, tree) in self.trees.iter().enumerate() {
            let (a, c) = (self.terminal_of[b][i], self.terminal_of[b][j]);
            if a == c {
                continue;
            }
            let (s, r) = path_split_counts(tree, a, c).expect("terminal ids are leaves");
            total += s as f64 / r as f64;
        }
        total / self.trees.len() as f64
    }

    /// Versioned JSON document (params and trees; terminal assignments are
    /// replayed on load).
    pub fn to_json(&self) -> String {
        let doc = ForestDoc {
            version: FOREST_DOC_VERSION,
            params: self.params.clone(),
            n_rows: self.n_rows(),
            n_classes: self.n_classes,
            trees: self.trees.clone(),
        };
        serde_json::to_string(&doc).expect("forest document serializes")
    }

    /// Rebuild a forest from [`Forest::to_json`] output and the dataset it
    /// was fitted on (re-imputing with the stored seed when cells are
    /// missing, so terminal assignments match the original fit).
    pub fn from_json(text: &str, ds: &Dataset) -> Result<Forest> {
        let doc: ForestDoc =
            serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if doc.version != FOREST_DOC_VERSION {
            return Err(Error::Serde(format!(
                "unsupported forest document version {}",
                doc.version
            )));
        }
        if doc.n_rows != ds.n_rows() || doc.n_classes != ds.n_cohorts() {
            return Err(Error::Serde(format!(
                "forest was fitted on {} rows / {} cohorts, dataset has {} / {}",
                doc.n_rows,
                doc.n_classes,
                ds.n_rows(),
                ds.n_cohorts()
            )));
        }
        let completed;
        let fit_ds = if ds.has_missing() {
            completed = impute_for_fit(ds, &doc.params)?;
            &completed
        } else {
            ds
        };
        let n = ds.n_rows();
        let terminal_of: Vec<Vec<u32>> = doc
            .trees
            .par_iter()
            .map(|tree| (0..n).map(|i| tree.route(fit_ds, i)).collect())
            .collect();
        let in_bags: Vec<Vec<bool>> = (0..doc.trees.len())
            .map(|b| {
                let mut rng = tree_stream(doc.params.seed, b as u64);
                bootstrap_rows(&mut rng, n).1
            })
            .collect();
        let oob_confusion =
            oob_confusion(fit_ds, &doc.trees, &terminal_of, &in_bags, doc.n_classes);
        Ok(Forest {
            trees: doc.trees,
            params: doc.params,
            terminal_of,
            oob_confusion,
            warnings: Vec::new(),
            n_classes: doc.n_classes,
        })
    }
}

/// Seed for the internal forest used by fit-time imputation, kept distinct
/// from the main fitting streams.
pub(crate) fn impute_seed(seed: u64) -> u64 {
    mix(seed ^ mix(tags::FIT_IMPUTE))
}
