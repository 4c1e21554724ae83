//! Participant-level pairwise dissimilarity and its cohort-level average.

use std::collections::BTreeSet;
use std::io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::natural_cmp;
use crate::error::{Error, Result};
use crate::forest::{path_split_counts, Forest};
use crate::matrix::Matrix;

/// Symmetric N×N participant dissimilarity, packed strict upper triangle;
/// the diagonal is implicitly 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissimMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DissimMatrix {
    pub fn zeros(n: usize) -> Self {
        DissimMatrix {
            n,
            values: vec![0.0; n * n.saturating_sub(1) / 2],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        self.values[self.idx(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert_ne!(i, j, "diagonal is fixed at 0");
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        let at = self.idx(i, j);
        self.values[at] = value;
    }

    /// Full symmetric expansion as CSV rows, for audit dumps.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{}", self.get(i, j))).collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Split the packed triangle into per-row mutable slices so rows can be
/// filled in parallel.
fn row_slices(packed: &mut [f64], n: usize) -> Vec<&mut [f64]> {
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    let mut rest = packed;
    for i in 0..n.saturating_sub(1) {
        let (head, tail) = rest.split_at_mut(n - 1 - i);
        out.push(head);
        rest = tail;
    }
    out
}

/// All pairwise tree-path dissimilarities of the fitting rows.
///
/// Per tree, the S/R ratio is tabulated once per leaf pair and looked up per
/// row pair; trees are processed in fixed-size batches and accumulated in
/// tree order, so the result is bit-identical for any thread count.
pub fn participant_matrix(forest: &Forest) -> DissimMatrix {
    let n = forest.n_rows();
    let b_total = forest.n_trees();
    let mut packed = vec![0.0f64; n * n.saturating_sub(1) / 2];

    const BATCH: usize = 32;
    let mut batch_start = 0;
    while batch_start < b_total {
        let batch_end = (batch_start + BATCH).min(b_total);
        let tables: Vec<(Vec<u32>, Vec<f64>, usize)> = (batch_start..batch_end)
            .into_par_iter()
            .map(|b| {
                let tree = &forest.trees[b];
                let leaf_ids = tree.leaf_ids();
                let l = leaf_ids.len();
                let mut leaf_index = vec![u32::MAX; tree.n_nodes()];
                for (li, &id) in leaf_ids.iter().enumerate() {
                    leaf_index[id as usize] = li as u32;
                }
                let mut table = vec![0.0f64; l * l];
                for (ai, &a) in leaf_ids.iter().enumerate() {
                    for (bi, &bb) in leaf_ids.iter().enumerate().skip(ai + 1) {
                        let (s, r) =
                            path_split_counts(tree, a, bb).expect("leaf ids are leaves");
                        let ratio = s as f64 / r as f64;
                        table[ai * l + bi] = ratio;
                        table[bi * l + ai] = ratio;
                    }
                }
                let terminals: Vec<u32> = forest.terminal_of[b]
                    .iter()
                    .map(|&t| leaf_index[t as usize])
                    .collect();
                (terminals, table, l)
            })
            .collect();

        row_slices(&mut packed, n)
            .into_par_iter()
            .enumerate()
            .for_each(|(i, row)| {
                for (off, j) in (i + 1..n).enumerate() {
                    let mut acc = row[off];
                    for (terminals, table, l) in &tables {
                        acc += table[terminals[i] as usize * l + terminals[j] as usize];
                    }
                    row[off] = acc;
                }
            });
        batch_start = batch_end;
    }

    for v in &mut packed {
        *v /= b_total as f64;
    }
    DissimMatrix { n, values: packed }
}

/// Cohort-level average distance; the diagonal holds the within-cohort
/// average over ordered distinct pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortDistanceMatrix {
    pub cohort_ids: Vec<String>,
    pub values: Matrix,
    pub warnings: Vec<String>,
}

impl CohortDistanceMatrix {
    pub fn k(&self) -> usize {
        self.cohort_ids.len()
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values.get(k, l)
    }

    /// CSV with a leading cohort-id column and cohort-id header.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["cohort".to_string()];
        header.extend(self.cohort_ids.iter().cloned());
        w.write_record(&header)?;
        for (k, id) in self.cohort_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend((0..self.k()).map(|l| format!("{}", self.get(k, l))));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Average the participant matrix within and between cohorts (labels given
/// per row, cohorts ordered naturally). A single-participant cohort gets a
/// 0 diagonal entry and a warning instead of an error.
pub fn cohort_matrix(dm: &DissimMatrix, labels: &[String]) -> Result<CohortDistanceMatrix> {
    if labels.len() != dm.n() {
        return Err(Error::InvalidParam(format!(
            "{} labels for a {}-row dissimilarity matrix",
            labels.len(),
            dm.n()
        )));
    }
    let mut cohort_ids: Vec<String> = labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    cohort_ids.sort_by(|a, b| natural_cmp(a, b));
    let k = cohort_ids.len();
    let rows_of: Vec<Vec<usize>> = cohort_ids
        .iter()
        .map(|id| {
            (0..labels.len())
                .filter(|&i| &labels[i] == id)
                .collect::<Vec<_>>()
        })
        .collect();

    let mut warnings = Vec::new();
    let mut values = Matrix::zeros(k, k);
    for ka in 0..k {
        for kb in ka..k {
            let (ra, rb) = (&rows_of[ka], &rows_of[kb]);
            let entry = if ka == kb {
                let m = ra.len();
                if m < 2 {
                    warnings.push(format!(
                        "cohort {} has a single participant; its within-cohort distance is 0",
                        cohort_ids[ka]
                    ));
                    0.0
                } else {
                    let mut sum = 0.0;
                    for (ai, &i) in ra.iter().enumerate() {
                        for &j in &ra[ai + 1..] {
                            sum += dm.get(i, j);
                        }
                    }
                    2.0 * sum / (m * (m - 1)) as f64
                }
            } else {
                let mut sum = 0.0;
                for &i in ra {
                    for &j in rb {
                        sum += dm.get(i, j);
                    }
                }
                sum / (ra.len() * rb.len()) as f64
            };
            values.set(ka, kb, entry);
            values.set(kb, ka, entry);
        }
    }

    Ok(CohortDistanceMatrix {
        cohort_ids,
        values,
        warnings,
    })
}
