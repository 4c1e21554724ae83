//! Stage 2: recursive two-sample testing along the dendrogram.
//!
//! Cohorts start as their own groups. Walking the dendrogram bottom-up, the
//! groups resolved on the left branch are tested against the groups resolved
//! on the right branch; a pair whose p-value clears the user threshold is
//! merged, and when several candidate merges compete for the same group the
//! highest p-value wins. Each test is restricted to covariates that are
//! sufficiently observed in every involved cohort; rows with missing cells
//! are dropped, or optionally completed by a seeded hot-deck draw from the
//! pooled pair.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bgtest::bg_test;
use crate::data::{encode, natural_cmp, observed_columns, Dataset};
use crate::error::{Error, Result};
use crate::hclust::Dendrogram;
use crate::rng::{mix, stream, tags};

/// Knobs for [`recursive_bg`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecurseParams {
    /// Merge when p ≥ alpha. 0 merges everything; values above 1 merge
    /// nothing (p never exceeds 1).
    pub alpha: f64,
    /// Complete missing cells by hot-deck draws within the tested pair
    /// instead of dropping incomplete rows.
    pub impute: bool,
    /// At a node joining one cohort with a two-cohort subtree, test all three
    /// cohort pairs jointly instead of strict left-vs-right recursion.
    pub leaf_exhaustive: bool,
    /// Divide alpha by the number of tests at each node. Off by default: a
    /// single threshold is applied throughout.
    pub bonferroni: bool,
    /// Permutations per test.
    pub n_perm: u32,
    pub seed: u64,
    /// A covariate enters a test only if its missing fraction is below this
    /// in every involved cohort.
    pub observed_threshold: f64,
}

impl Default for RecurseParams {
    fn default() -> Self {
        RecurseParams {
            alpha: 0.05,
            impute: false,
            leaf_exhaustive: false,
            bonferroni: false,
            n_perm: 999,
            seed: 0,
            observed_threshold: 0.6,
        }
    }
}

/// Final partition of the cohorts. Each group is named after its naturally
/// smallest member cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    group_of: BTreeMap<String, String>,
    groups: BTreeMap<String, Vec<String>>,
}

impl GroupAssignment {
    fn new(groups_members: Vec<Vec<String>>) -> Self {
        let mut group_of = BTreeMap::new();
        let mut groups = BTreeMap::new();
        for mut members in groups_members {
            members.sort_by(|a, b| natural_cmp(a, b));
            let id = members[0].clone();
            for m in &members {
                let clash = group_of.insert(m.clone(), id.clone());
                debug_assert!(clash.is_none(), "cohort {m} assigned twice");
            }
            groups.insert(id, members);
        }
        GroupAssignment { group_of, groups }
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Group ID a cohort landed in.
    pub fn group_of(&self, cohort: &str) -> Option<&str> {
        self.group_of.get(cohort).map(String::as_str)
    }

    /// Cohort → group map, for flat export.
    pub fn group_of_map(&self) -> &BTreeMap<String, String> {
        &self.group_of
    }

    /// Group ID → naturally sorted member cohorts.
    pub fn groups(&self) -> &BTreeMap<String, Vec<String>> {
        &self.groups
    }
}

/// What happened to one tested pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    #[serde(rename = "merged")]
    Merged,
    #[serde(rename = "kept-separate")]
    KeptSeparate,
    #[serde(rename = "kept-separate (insufficient data)")]
    Insufficient,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Merged => "merged",
            Decision::KeptSeparate => "kept-separate",
            Decision::Insufficient => "kept-separate (insufficient data)",
        })
    }
}

/// One row of the test log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub left: String,
    pub right: String,
    pub columns_used: Vec<String>,
    pub m: usize,
    pub n: usize,
    /// Absent when the pair had too little data to test.
    pub p_value: Option<f64>,
    pub decision: Decision,
    pub imputed: bool,
}

/// Chronological log of every pair examined during the recursion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TestTrace {
    pub records: Vec<TestRecord>,
}

impl TestTrace {
    /// CSV export; `columns_used` is `;`-joined, absent p-values are `NA`.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "left",
            "right",
            "columns_used",
            "m",
            "n",
            "p_value",
            "decision",
            "imputed",
        ])?;
        for r in &self.records {
            w.write_record([
                r.left.as_str(),
                r.right.as_str(),
                &r.columns_used.join(";"),
                &r.m.to_string(),
                &r.n.to_string(),
                &r.p_value.map_or_else(|| "NA".into(), |p| format!("{p}")),
                &r.decision.to_string(),
                if r.imputed { "true" } else { "false" },
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Greedy merge plan for one round of candidate pairs (all with p ≥ alpha):
/// repeatedly take the highest-p candidate whose two groups are both still
/// unmerged this round; ties go to the pair whose merged group would get the
/// smaller ID.
pub fn resolve_ambiguity(candidates: &[(String, String, f64)]) -> Vec<(String, String)> {
    let ordered_pair = |i: usize| -> (&str, &str) {
        let (a, b, _) = &candidates[i];
        if natural_cmp(a, b) == Ordering::Greater {
            (b, a)
        } else {
            (a, b)
        }
    };
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| {
        candidates[j]
            .2
            .total_cmp(&candidates[i].2)
            .then_with(|| {
                let (li, hi) = ordered_pair(i);
                let (lj, hj) = ordered_pair(j);
                natural_cmp(li, lj).then(natural_cmp(hi, hj))
            })
    });
    let mut used: BTreeSet<&str> = BTreeSet::new();
    let mut plan = Vec::new();
    for i in order {
        let (a, b, _) = &candidates[i];
        if used.contains(a.as_str()) || used.contains(b.as_str()) {
            continue;
        }
        used.insert(a);
        used.insert(b);
        plan.push((a.clone(), b.clone()));
    }
    plan
}

/// Fill missing cells of the listed columns, for rows of the listed cohorts,
/// by drawing uniformly from the values observed within that same set of
/// cohorts. Each cell's draw depends only on (seed, cohort, row, column) and
/// the column's own donor pool — never on fills of other cells.
pub fn impute_within_group(
    ds: &Dataset,
    cohorts: &[String],
    columns: &[String],
    seed: u64,
) -> Result<Dataset> {
    let cohort_idx = cohorts
        .iter()
        .map(|c| {
            ds.cohort_ids()
                .iter()
                .position(|k| k == c)
                .ok_or_else(|| Error::InvalidParam(format!("unknown cohort {c:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let col_idx = columns
        .iter()
        .map(|name| {
            ds.schema()
                .index_of(name)
                .ok_or_else(|| Error::Schema(format!("unknown covariate {name:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    hot_deck_fill(ds, &cohort_idx, &col_idx, seed)
}

fn cell_stream(seed: u64, cohort: usize, row: usize, col: usize) -> rand_chacha::ChaCha8Rng {
    let k = mix(row as u64)
        ^ mix(col as u64).rotate_left(17)
        ^ mix(cohort as u64).rotate_left(34);
    stream(seed, tags::HOT_DECK, k)
}

fn hot_deck_fill(
    ds: &Dataset,
    cohorts: &[usize],
    columns: &[usize],
    seed: u64,
) -> Result<Dataset> {
    let rows: Vec<usize> = cohorts.iter().flat_map(|&c| ds.rows_of_cohort(c)).collect();
    let mut out = ds.clone();
    for &col in columns {
        let donors: Vec<_> = rows
            .iter()
            .filter_map(|&r| ds.value(r, col))
            .collect();
        if donors.is_empty() {
            return Err(Error::AllMissing(ds.schema().name(col).to_string()));
        }
        for &row in &rows {
            if ds.is_missing(row, col) {
                let mut rng = cell_stream(seed, ds.cohort_of(row), row, col);
                let pick = rng.gen_range(0..donors.len());
                out.set_cell(row, col, donors[pick]);
            }
        }
    }
    Ok(out)
}

/// A group of cohorts mid-recursion; `min` is the smallest member index and
/// doubles as the group's identity.
#[derive(Debug, Clone)]
struct CGroup {
    min: usize,
    members: Vec<usize>,
}

struct Driver<'a> {
    ds: &'a Dataset,
    params: &'a RecurseParams,
    /// Dataset cohort index of each dendrogram leaf.
    leaf_cohort: Vec<usize>,
    trace: Vec<TestRecord>,
    test_counter: u64,
}

/// Outcome of testing one group pair.
struct PairOutcome {
    row: usize,
    p_value: Option<f64>,
}

impl<'a> Driver<'a> {
    fn label(&self, cohort: usize) -> &str {
        &self.ds.cohort_ids()[cohort]
    }

    /// Run one test between two groups and append its trace row.
    fn test_pair(&mut self, a: &CGroup, b: &CGroup) -> Result<PairOutcome> {
        let left = self.label(a.min).to_string();
        let right = self.label(b.min).to_string();
        let test_seed = mix(self.params.seed ^ mix(self.test_counter));
        self.test_counter += 1;

        let pair_cohorts: Vec<usize> = {
            let mut v = [a.members.as_slice(), b.members.as_slice()].concat();
            v.sort_unstable();
            v
        };
        let mut cols = observed_columns(self.ds, &pair_cohorts, self.params.observed_threshold);

        let rows_a: Vec<usize> = a
            .members
            .iter()
            .flat_map(|&c| self.ds.rows_of_cohort(c))
            .collect();
        let rows_b: Vec<usize> = b
            .members
            .iter()
            .flat_map(|&c| self.ds.rows_of_cohort(c))
            .collect();

        let selection_has_missing = |rows: &[usize], cols: &[usize]| {
            rows.iter()
                .any(|&r| cols.iter().any(|&c| self.ds.is_missing(r, c)))
        };

        // Resolve missingness: complete the pair's columns in a working copy,
        // or drop incomplete rows.
        let mut work: Option<Dataset> = None;
        let mut imputed = false;
        let (rows_a, rows_b) = if self.params.impute {
            imputed = selection_has_missing(&rows_a, &cols)
                || selection_has_missing(&rows_b, &cols);
            if imputed {
                loop {
                    match hot_deck_fill(self.ds, &pair_cohorts, &cols, self.params.seed) {
                        Ok(w) => {
                            work = Some(w);
                            break;
                        }
                        // Defensive: the observed-columns filter normally
                        // removes columns with no donors in a cohort.
                        Err(Error::AllMissing(name)) => {
                            let p = self.ds.schema().index_of(&name).unwrap();
                            cols.retain(|&c| c != p);
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            (rows_a, rows_b)
        } else {
            let keep = |rows: Vec<usize>| -> Vec<usize> {
                rows.into_iter()
                    .filter(|&r| cols.iter().all(|&c| !self.ds.is_missing(r, c)))
                    .collect()
            };
            (keep(rows_a), keep(rows_b))
        };
        let ds = work.as_ref().unwrap_or(self.ds);

        let (m, n) = (rows_a.len(), rows_b.len());
        let mut record = TestRecord {
            left,
            right,
            columns_used: cols.iter().map(|&c| ds.schema().name(c).to_string()).collect(),
            m,
            n,
            p_value: None,
            decision: Decision::Insufficient,
            imputed,
        };
        if m < 2 || n < 2 || cols.is_empty() {
            self.trace.push(record);
            return Ok(PairOutcome {
                row: self.trace.len() - 1,
                p_value: None,
            });
        }

        // Pooled standardization over both sides, then split back apart.
        let rows_all = [rows_a.as_slice(), rows_b.as_slice()].concat();
        let enc = encode(ds, &rows_all, &cols, true)?;
        if enc.values.n_cols() == 0 {
            record.columns_used.clear();
            self.trace.push(record);
            return Ok(PairOutcome {
                row: self.trace.len() - 1,
                p_value: None,
            });
        }
        record
            .columns_used
            .retain(|name| !enc.dropped.contains(name));

        let (x, y) = enc.values.split_at_row(m);
        let r = bg_test(&x, &y, self.params.n_perm, test_seed)?;
        record.p_value = Some(r.p_value);
        record.decision = Decision::KeptSeparate;
        self.trace.push(record);
        Ok(PairOutcome {
            row: self.trace.len() - 1,
            p_value: Some(r.p_value),
        })
    }

    /// Test the listed group pairs, then merge every candidate pair the
    /// greedy plan accepts. Returns the surviving groups sorted by ID.
    fn joint_round(
        &mut self,
        mut groups: Vec<CGroup>,
        pairs: &[(usize, usize)],
    ) -> Result<Vec<CGroup>> {
        let mut outcomes = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            let out = self.test_pair(&groups[i], &groups[j])?;
            outcomes.push((i, j, out));
        }
        let n_tests = outcomes
            .iter()
            .filter(|(_, _, o)| o.p_value.is_some())
            .count();
        let alpha_eff = if self.params.bonferroni && n_tests > 0 {
            self.params.alpha / n_tests as f64
        } else {
            self.params.alpha
        };

        let mut candidates = Vec::new();
        let mut row_of_pair = BTreeMap::new();
        for (i, j, out) in &outcomes {
            if let Some(p) = out.p_value {
                if p >= alpha_eff {
                    let la = self.label(groups[*i].min).to_string();
                    let lb = self.label(groups[*j].min).to_string();
                    row_of_pair.insert((*i, *j), out.row);
                    candidates.push((la, lb, p, *i, *j));
                }
            }
        }
        let plan = resolve_ambiguity(
            &candidates
                .iter()
                .map(|(a, b, p, _, _)| (a.clone(), b.clone(), *p))
                .collect::<Vec<_>>(),
        );

        let mut merged_into: BTreeMap<usize, usize> = BTreeMap::new();
        for (pa, pb) in &plan {
            let &(_, _, _, i, j) = candidates
                .iter()
                .find(|(a, b, _, _, _)| a == pa && b == pb)
                .expect("planned pair came from the candidate list");
            self.trace[row_of_pair[&(i, j)]].decision = Decision::Merged;
            merged_into.insert(j, i);
        }

        for (j, i) in merged_into.iter().rev() {
            let absorbed = std::mem::take(&mut groups[*j].members);
            let host = &mut groups[*i];
            host.members.extend(absorbed);
            host.members.sort_unstable();
            host.min = host.members[0];
        }
        groups.retain(|g| !g.members.is_empty());
        groups.sort_by_key(|g| g.min);
        Ok(groups)
    }

    fn cross_round(&mut self, left: Vec<CGroup>, right: Vec<CGroup>) -> Result<Vec<CGroup>> {
        let n_left = left.len();
        let mut groups = left;
        groups.extend(right);
        let pairs: Vec<(usize, usize)> = (0..n_left)
            .flat_map(|i| (n_left..groups.len()).map(move |j| (i, j)))
            .collect();
        self.joint_round(groups, &pairs)
    }

    /// True when the node joins one leaf with a subtree of exactly two leaves.
    fn is_leaf_triple(&self, d: &Dendrogram, node: usize) -> bool {
        let Some((l, r)) = d.children(node) else {
            return false;
        };
        let two_leaf = |x: usize| {
            d.children(x)
                .is_some_and(|(a, b)| d.is_leaf(a) && d.is_leaf(b))
        };
        (d.is_leaf(l) && two_leaf(r)) || (d.is_leaf(r) && two_leaf(l))
    }

    fn resolve(&mut self, d: &Dendrogram, node: usize) -> Result<Vec<CGroup>> {
        if d.is_leaf(node) {
            let c = self.leaf_cohort[node];
            return Ok(vec![CGroup {
                min: c,
                members: vec![c],
            }]);
        }
        if self.params.leaf_exhaustive && self.is_leaf_triple(d, node) {
            let mut cohorts: Vec<usize> = d
                .leaves_under(node)
                .into_iter()
                .map(|leaf| self.leaf_cohort[leaf])
                .collect();
            cohorts.sort_unstable();
            let groups: Vec<CGroup> = cohorts
                .into_iter()
                .map(|c| CGroup {
                    min: c,
                    members: vec![c],
                })
                .collect();
            let pairs = [(0, 1), (0, 2), (1, 2)];
            return self.joint_round(groups, &pairs);
        }
        let (l, r) = d.children(node).expect("internal node");
        let gl = self.resolve(d, l)?;
        let gr = self.resolve(d, r)?;
        self.cross_round(gl, gr)
    }
}

/// Walk the dendrogram bottom-up, testing and merging cohort groups.
///
/// Returns the final partition plus the chronological log of every test.
/// The dataset must be raw: sets completed by fit-time imputation carry
/// model-made values and are rejected here.
pub fn recursive_bg(
    d: &Dendrogram,
    ds: &Dataset,
    params: &RecurseParams,
) -> Result<(GroupAssignment, TestTrace)> {
    if ds.fit_imputed() {
        return Err(Error::InvalidParam(
            "dataset was completed by fit-time imputation; distribution tests need raw data"
                .into(),
        ));
    }
    if !params.alpha.is_finite() || params.alpha < 0.0 {
        return Err(Error::InvalidParam(format!(
            "alpha must be finite and non-negative, got {}",
            params.alpha
        )));
    }
    if params.n_perm < 99 {
        return Err(Error::InvalidParam(format!(
            "n_perm must be at least 99, got {}",
            params.n_perm
        )));
    }
    if !(params.observed_threshold > 0.0 && params.observed_threshold <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "observed threshold must lie in (0, 1], got {}",
            params.observed_threshold
        )));
    }
    let leaf_cohort = d
        .leaves
        .iter()
        .map(|label| {
            ds.cohort_ids()
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| {
                    Error::InvalidParam(format!("dendrogram leaf {label:?} is not a cohort"))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    {
        let mut uniq = leaf_cohort.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != leaf_cohort.len() {
            return Err(Error::InvalidParam(
                "dendrogram leaves repeat a cohort".into(),
            ));
        }
    }

    let mut driver = Driver {
        ds,
        params,
        leaf_cohort,
        trace: Vec::new(),
        test_counter: 0,
    };
    let groups = driver.resolve(d, d.root())?;

    let assignment = GroupAssignment::new(
        groups
            .into_iter()
            .map(|g| {
                g.members
                    .into_iter()
                    .map(|c| ds.cohort_ids()[c].clone())
                    .collect()
            })
            .collect(),
    );
    Ok((
        assignment,
        TestTrace {
            records: driver.trace,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cell, CovariateKind, CovariateSchema, ColumnData};
    use crate::hclust::Merge;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Continuous-only dataset: one block of rows per cohort, shifted by the
    /// given offsets.
    fn gaussian_dataset(
        labels: &[&str],
        rows_per: usize,
        dims: usize,
        shifts: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Dataset {
        let schema = CovariateSchema::new(
            (0..dims)
                .map(|p| (format!("v{p}"), CovariateKind::Continuous))
                .collect(),
        )
        .unwrap();
        let n = labels.len() * rows_per;
        let cohort_col: Vec<String> = labels
            .iter()
            .flat_map(|l| std::iter::repeat(l.to_string()).take(rows_per))
            .collect();
        let mut columns = Vec::new();
        for _ in 0..dims {
            let mut col = Vec::with_capacity(n);
            for (k, _) in labels.iter().enumerate() {
                for _ in 0..rows_per {
                    col.push(rng.sample::<f64, _>(StandardNormal) + shifts[k]);
                }
            }
            columns.push(ColumnData::Numeric(col));
        }
        let missing = vec![vec![false; n]; dims];
        Dataset::new(schema, cohort_col, columns, missing).unwrap()
    }

    fn two_level_dendrogram(labels: &[&str]) -> Dendrogram {
        // Left-deep chain: ((..(0,1),2),..)
        let k = labels.len();
        let mut merges = Vec::new();
        let mut prev = 0usize;
        for i in 1..k {
            merges.push(Merge {
                left: prev,
                right: i,
                height: i as f64,
            });
            prev = k + merges.len() - 1;
        }
        Dendrogram {
            leaves: labels.iter().map(|s| s.to_string()).collect(),
            merges,
        }
    }

    #[test]
    fn ambiguity_prefers_highest_p() {
        let plan = resolve_ambiguity(&[
            ("9".into(), "10".into(), 0.89),
            ("7".into(), "10".into(), 0.41),
        ]);
        assert_eq!(plan, vec![("9".to_string(), "10".to_string())]);
    }

    #[test]
    fn ambiguity_single_candidate_merges() {
        let plan = resolve_ambiguity(&[("a".into(), "b".into(), 0.06)]);
        assert_eq!(plan.len(), 1);
    }

    #[test]
    fn ambiguity_tie_takes_smaller_combined_id() {
        let cands = vec![
            ("2".to_string(), "3".to_string(), 0.5),
            ("1".to_string(), "2".to_string(), 0.5),
        ];
        let plan = resolve_ambiguity(&cands);
        assert_eq!(plan, vec![("1".to_string(), "2".to_string())]);
        assert_eq!(resolve_ambiguity(&cands), plan);
    }

    #[test]
    fn ambiguity_tie_uses_natural_label_order() {
        let plan = resolve_ambiguity(&[
            ("9".into(), "10".into(), 0.5),
            ("2".into(), "10".into(), 0.5),
        ]);
        assert_eq!(plan, vec![("2".to_string(), "10".to_string())]);
    }

    #[test]
    fn ambiguity_disjoint_pairs_all_merge() {
        let plan = resolve_ambiguity(&[
            ("1".into(), "2".into(), 0.5),
            ("3".into(), "4".into(), 0.5),
        ]);
        assert_eq!(plan.len(), 2);
    }

    fn tiny_missing_dataset() -> Dataset {
        // Two cohorts, one continuous column with holes, one categorical.
        let schema = CovariateSchema::new(vec![
            ("x".into(), CovariateKind::Continuous),
            (
                "c".into(),
                CovariateKind::Categorical(vec!["A".into(), "B".into(), "C".into()]),
            ),
        ])
        .unwrap();
        let cohorts: Vec<String> = ["a"; 6].iter().chain(["b"; 6].iter()).map(|s| s.to_string()).collect();
        let x = ColumnData::Numeric(vec![
            1.0, 2.0, 3.0, 0.0, 0.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0,
        ]);
        let c = ColumnData::Categorical(vec![0, 1, 0, 2, 0, 0, 1, 1, 0, 0, 0, 2]);
        let mut missing = vec![vec![false; 12]; 2];
        missing[0][3] = true;
        missing[0][4] = true;
        Dataset::new(schema, cohorts, vec![x, c], missing).unwrap()
    }

    #[test]
    fn impute_identity_on_complete_data() {
        let ds = tiny_missing_dataset();
        let complete = impute_within_group(&ds, &["a".into(), "b".into()], &["c".into()], 7)
            .unwrap();
        // Column "c" had no holes, so nothing may change anywhere.
        assert_eq!(complete, ds);
    }

    #[test]
    fn impute_fills_and_clears_mask() {
        let ds = tiny_missing_dataset();
        let filled = impute_within_group(
            &ds,
            &["a".into(), "b".into()],
            &["x".into(), "c".into()],
            7,
        )
        .unwrap();
        assert!(!filled.has_missing());
        // Donors are the observed values of "x" within the pooled pair.
        let donors = [1.0, 2.0, 3.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        for row in [3usize, 4] {
            match filled.value(row, 0) {
                Some(Cell::Num(v)) => assert!(donors.contains(&v), "fill {v} not a donor"),
                other => panic!("expected numeric fill, got {other:?}"),
            }
        }
    }

    #[test]
    fn impute_single_donor_is_constant() {
        let schema =
            CovariateSchema::new(vec![("x".into(), CovariateKind::Continuous)]).unwrap();
        let cohorts: Vec<String> = (0..5).map(|_| "a".to_string()).collect();
        let col = ColumnData::Numeric(vec![0.0, 7.0, 0.0, 0.0, 0.0]);
        let missing = vec![vec![true, false, true, true, true]];
        let ds = Dataset::new(schema, cohorts, vec![col], missing).unwrap();
        for seed in 0..10 {
            let filled = impute_within_group(&ds, &["a".into()], &["x".into()], seed).unwrap();
            for row in 0..5 {
                assert_eq!(filled.value(row, 0), Some(Cell::Num(7.0)));
            }
        }
    }

    #[test]
    fn impute_fully_missing_column_is_an_error() {
        let schema =
            CovariateSchema::new(vec![("x".into(), CovariateKind::Continuous)]).unwrap();
        let cohorts: Vec<String> = (0..4).map(|_| "a".to_string()).collect();
        let col = ColumnData::Numeric(vec![0.0; 4]);
        let missing = vec![vec![true; 4]];
        let ds = Dataset::new(schema, cohorts, vec![col], missing).unwrap();
        match impute_within_group(&ds, &["a".into()], &["x".into()], 1) {
            Err(Error::AllMissing(name)) => assert_eq!(name, "x"),
            other => panic!("expected all-missing error, got {other:?}"),
        }
    }

    #[test]
    fn impute_is_per_cell_deterministic() {
        let ds = tiny_missing_dataset();
        let a = impute_within_group(&ds, &["a".into(), "b".into()], &["x".into()], 42).unwrap();
        let b = impute_within_group(&ds, &["a".into(), "b".into()], &["x".into()], 42).unwrap();
        assert_eq!(a, b);

        // Punch a hole in the other column; x's donor pool is untouched, so
        // x's fills must not move.
        let schema = ds.schema().clone();
        let cohorts: Vec<String> = (0..12)
            .map(|r| ds.cohort_ids()[ds.cohort_of(r)].clone())
            .collect();
        let mut missing = vec![vec![false; 12]; 2];
        missing[0][3] = true;
        missing[0][4] = true;
        missing[1][7] = true;
        let columns = vec![ds.column(0).clone(), ds.column(1).clone()];
        let ds2 = Dataset::new(schema, cohorts, columns, missing).unwrap();
        let c = impute_within_group(
            &ds2,
            &["a".into(), "b".into()],
            &["x".into(), "c".into()],
            42,
        )
        .unwrap();
        assert_eq!(a.value(3, 0), c.value(3, 0));
        assert_eq!(a.value(4, 0), c.value(4, 0));
    }

    #[test]
    fn imputed_marginal_tracks_donor_marginal() {
        // Categorical column with a known observed distribution; pooled fills
        // over many seeds should match it (chi-square goodness of fit).
        let levels = vec!["A".to_string(), "B".to_string(), "C".to_string()];
        let schema = CovariateSchema::new(vec![(
            "c".into(),
            CovariateKind::Categorical(levels),
        )])
        .unwrap();
        let n_obs = 100usize;
        let n_miss = 40usize;
        let n = n_obs + n_miss;
        let cohorts: Vec<String> = (0..n).map(|_| "a".to_string()).collect();
        // Observed counts: 50 A, 30 B, 20 C.
        let mut vals = Vec::with_capacity(n);
        for i in 0..n_obs {
            vals.push(if i < 50 {
                0
            } else if i < 80 {
                1
            } else {
                2
            });
        }
        vals.extend(std::iter::repeat(0).take(n_miss));
        let mut missing = vec![vec![false; n]];
        for slot in missing[0].iter_mut().skip(n_obs) {
            *slot = true;
        }
        let ds = Dataset::new(schema, cohorts, vec![ColumnData::Categorical(vals)], missing)
            .unwrap();

        let mut counts = [0f64; 3];
        for seed in 0..50u64 {
            let filled = impute_within_group(&ds, &["a".into()], &["c".into()], seed).unwrap();
            for row in n_obs..n {
                match filled.value(row, 0) {
                    Some(Cell::Level(l)) => counts[l as usize] += 1.0,
                    other => panic!("expected level, got {other:?}"),
                }
            }
        }
        let total: f64 = counts.iter().sum();
        let expected = [0.5 * total, 0.3 * total, 0.2 * total];
        let chi2: f64 = counts
            .iter()
            .zip(&expected)
            .map(|(o, e)| (o - e) * (o - e) / e)
            .sum();
        let dist = statrs::distribution::ChiSquared::new(2.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let p = 1.0 - dist.cdf(chi2);
        assert!(p > 0.01, "goodness-of-fit p = {p} (chi2 = {chi2})");
    }

    #[test]
    fn same_distribution_pair_usually_merges() {
        let mut singles = 0;
        for rep in 0..100u64 {
            let mut rng = stream(0x11AA, tags::GENERATE, rep);
            let ds = gaussian_dataset(&["1", "2"], 60, 3, &[0.0, 0.0], &mut rng);
            let d = two_level_dendrogram(&["1", "2"]);
            let params = RecurseParams {
                n_perm: 199,
                seed: rep,
                ..RecurseParams::default()
            };
            let (ga, trace) = recursive_bg(&d, &ds, &params).unwrap();
            assert_eq!(trace.records.len(), 1);
            if ga.n_groups() == 1 {
                singles += 1;
            }
        }
        assert!(singles >= 90, "merged in only {singles}/100 null runs");
    }

    #[test]
    fn shifted_pair_stays_separate() {
        let mut separate = 0;
        for rep in 0..100u64 {
            let mut rng = stream(0x22BB, tags::GENERATE, rep);
            let ds = gaussian_dataset(&["1", "2"], 200, 10, &[0.0, 2.0], &mut rng);
            let d = two_level_dendrogram(&["1", "2"]);
            let params = RecurseParams {
                n_perm: 199,
                seed: rep,
                ..RecurseParams::default()
            };
            let (ga, _) = recursive_bg(&d, &ds, &params).unwrap();
            if ga.n_groups() == 2 {
                separate += 1;
            }
        }
        assert!(separate >= 99, "split in only {separate}/100 shifted runs");
    }

    #[test]
    fn alpha_extremes_bound_the_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = gaussian_dataset(&["1", "2", "3", "4"], 30, 3, &[0.0, 4.0, 8.0, 12.0], &mut rng);
        let d = two_level_dendrogram(&["1", "2", "3", "4"]);

        let all = RecurseParams {
            alpha: 0.0,
            n_perm: 99,
            ..RecurseParams::default()
        };
        let (ga, trace) = recursive_bg(&d, &ds, &all).unwrap();
        assert_eq!(ga.n_groups(), 1);
        let merges = trace
            .records
            .iter()
            .filter(|r| r.decision == Decision::Merged)
            .count();
        assert_eq!(merges, 3);

        let none = RecurseParams {
            alpha: 1.5,
            n_perm: 99,
            ..RecurseParams::default()
        };
        let (ga, _) = recursive_bg(&d, &ds, &none).unwrap();
        assert_eq!(ga.n_groups(), 4);
        for label in ["1", "2", "3", "4"] {
            assert_eq!(ga.group_of(label), Some(label));
        }
    }

    #[test]
    fn trace_replays_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = gaussian_dataset(&["1", "2", "3"], 40, 4, &[0.0, 0.3, 3.0], &mut rng);
        let d = two_level_dendrogram(&["1", "2", "3"]);
        let params = RecurseParams {
            n_perm: 199,
            seed: 1234,
            ..RecurseParams::default()
        };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| recursive_bg(&d, &ds, &params).unwrap())
        };
        let (ga1, t1) = run(1);
        let (ga2, t2) = run(4);
        assert_eq!(ga1, ga2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn partition_counts_match_merge_records() {
        for rep in 0..10u64 {
            let mut rng = stream(0x33CC, tags::GENERATE, rep);
            let shift = if rep % 2 == 0 { 0.0 } else { 2.5 };
            let ds = gaussian_dataset(
                &["1", "2", "3", "4"],
                30,
                3,
                &[0.0, shift, 2.0 * shift, 3.0 * shift],
                &mut rng,
            );
            let d = two_level_dendrogram(&["1", "2", "3", "4"]);
            let params = RecurseParams {
                n_perm: 99,
                seed: rep,
                ..RecurseParams::default()
            };
            let (ga, trace) = recursive_bg(&d, &ds, &params).unwrap();
            assert!((1..=4).contains(&ga.n_groups()));
            let merges = trace
                .records
                .iter()
                .filter(|r| r.decision == Decision::Merged)
                .count();
            assert_eq!(merges, 4 - ga.n_groups());
            // Partition: every cohort in exactly one group.
            let mut seen = BTreeSet::new();
            for members in ga.groups().values() {
                for m in members {
                    assert!(seen.insert(m.clone()), "{m} in two groups");
                }
            }
            assert_eq!(seen.len(), 4);
        }
    }

    #[test]
    fn droped_rows_match_complete_cases() {
        // One cohort has holes in "v0"; with impute off, tested sizes must
        // equal the complete-case counts.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut ds = gaussian_dataset(&["1", "2"], 40, 3, &[0.0, 0.0], &mut rng);
        // Rebuild with missingness on cohort "1" rows 0..10 in column 0.
        let schema = ds.schema().clone();
        let cohorts: Vec<String> = (0..ds.n_rows())
            .map(|r| ds.cohort_ids()[ds.cohort_of(r)].clone())
            .collect();
        let columns: Vec<ColumnData> = (0..3).map(|p| ds.column(p).clone()).collect();
        let mut missing = vec![vec![false; ds.n_rows()]; 3];
        for row in 0..10 {
            missing[0][row] = true;
        }
        ds = Dataset::new(schema, cohorts, columns, missing).unwrap();

        let d = two_level_dendrogram(&["1", "2"]);
        let params = RecurseParams {
            n_perm: 99,
            ..RecurseParams::default()
        };
        let (_, trace) = recursive_bg(&d, &ds, &params).unwrap();
        let rec = &trace.records[0];
        assert_eq!(rec.columns_used, vec!["v0", "v1", "v2"]);
        assert_eq!((rec.m, rec.n), (30, 40));
        assert!(!rec.imputed);

        let with_impute = RecurseParams {
            impute: true,
            n_perm: 99,
            ..RecurseParams::default()
        };
        let (_, trace) = recursive_bg(&d, &ds, &with_impute).unwrap();
        let rec = &trace.records[0];
        assert_eq!((rec.m, rec.n), (40, 40));
        assert!(rec.imputed);
    }

    #[test]
    fn badly_observed_column_is_excluded_only_where_involved() {
        // "v2" is 70% missing in cohort "3" only: pairs without 3 use it,
        // pairs with 3 do not.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let base = gaussian_dataset(&["1", "2", "3"], 40, 3, &[0.0, 0.0, 0.0], &mut rng);
        let schema = base.schema().clone();
        let cohorts: Vec<String> = (0..base.n_rows())
            .map(|r| base.cohort_ids()[base.cohort_of(r)].clone())
            .collect();
        let columns: Vec<ColumnData> = (0..3).map(|p| base.column(p).clone()).collect();
        let mut missing = vec![vec![false; base.n_rows()]; 3];
        let rows3 = base.rows_of_cohort(2);
        for &row in rows3.iter().take(28) {
            missing[2][row] = true;
        }
        let ds = Dataset::new(schema, cohorts, columns, missing).unwrap();

        let d = two_level_dendrogram(&["1", "2", "3"]);
        let params = RecurseParams {
            n_perm: 99,
            ..RecurseParams::default()
        };
        let (_, trace) = recursive_bg(&d, &ds, &params).unwrap();
        for rec in &trace.records {
            let involves_3 = rec.left == "3" || rec.right == "3";
            assert_eq!(
                rec.columns_used.contains(&"v2".to_string()),
                !involves_3,
                "columns {:?} for pair ({}, {})",
                rec.columns_used,
                rec.left,
                rec.right
            );
        }
    }

    #[test]
    fn leaf_triple_mode_tests_all_three_pairs() {
        // Cohorts 9 and 10 share a distribution; 7 is far away. The triple
        // mode examines every pair; strict recursion runs one test fewer.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = gaussian_dataset(&["10", "7", "9"], 50, 3, &[0.0, 5.0, 0.0], &mut rng);
        let d = Dendrogram {
            leaves: vec!["7".into(), "9".into(), "10".into()],
            merges: vec![
                Merge {
                    left: 1,
                    right: 2,
                    height: 0.1,
                },
                Merge {
                    left: 0,
                    right: 3,
                    height: 0.5,
                },
            ],
        };
        let strict = RecurseParams {
            n_perm: 199,
            ..RecurseParams::default()
        };
        let (ga, trace) = recursive_bg(&d, &ds, &strict).unwrap();
        assert_eq!(trace.records.len(), 2);
        assert_eq!(ga.n_groups(), 2);
        assert_eq!(ga.group_of("9"), ga.group_of("10"));
        assert_ne!(ga.group_of("7"), ga.group_of("9"));

        let exhaustive = RecurseParams {
            leaf_exhaustive: true,
            n_perm: 199,
            ..RecurseParams::default()
        };
        let (ga, trace) = recursive_bg(&d, &ds, &exhaustive).unwrap();
        assert_eq!(trace.records.len(), 3);
        let pairs: Vec<(String, String)> = trace
            .records
            .iter()
            .map(|r| (r.left.clone(), r.right.clone()))
            .collect();
        assert_eq!(
            pairs,
            vec![
                ("7".to_string(), "9".to_string()),
                ("7".to_string(), "10".to_string()),
                ("9".to_string(), "10".to_string()),
            ]
        );
        assert_eq!(ga.n_groups(), 2);
        assert_eq!(ga.group_of("9"), ga.group_of("10"));
    }

    #[test]
    fn bonferroni_is_identity_for_a_single_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ds = gaussian_dataset(&["1", "2"], 40, 3, &[0.0, 0.5], &mut rng);
        let d = two_level_dendrogram(&["1", "2"]);
        let off = RecurseParams {
            n_perm: 199,
            ..RecurseParams::default()
        };
        let on = RecurseParams {
            bonferroni: true,
            n_perm: 199,
            ..RecurseParams::default()
        };
        let (ga_off, t_off) = recursive_bg(&d, &ds, &off).unwrap();
        let (ga_on, t_on) = recursive_bg(&d, &ds, &on).unwrap();
        assert_eq!(ga_off, ga_on);
        assert_eq!(t_off, t_on);
    }

    #[test]
    fn singleton_cohort_is_kept_separate_for_lack_of_data() {
        let schema = CovariateSchema::new(vec![
            ("x".into(), CovariateKind::Continuous),
            ("y".into(), CovariateKind::Continuous),
        ])
        .unwrap();
        let mut cohorts = vec!["solo".to_string()];
        cohorts.extend((0..30).map(|_| "big".to_string()));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cols = vec![
            ColumnData::Numeric((0..31).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            ColumnData::Numeric((0..31).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        ];
        let missing = vec![vec![false; 31]; 2];
        let ds = Dataset::new(schema, cohorts, cols, missing).unwrap();
        let d = two_level_dendrogram(&["big", "solo"]);
        let params = RecurseParams {
            n_perm: 99,
            ..RecurseParams::default()
        };
        let (ga, trace) = recursive_bg(&d, &ds, &params).unwrap();
        assert_eq!(ga.n_groups(), 2);
        let rec = &trace.records[0];
        assert_eq!(rec.decision, Decision::Insufficient);
        assert_eq!(rec.p_value, None);
        assert_eq!(rec.decision.to_string(), "kept-separate (insufficient data)");
    }

    #[test]
    fn fit_imputed_dataset_is_rejected() {
        let schema = CovariateSchema::new(vec![
            ("x".into(), CovariateKind::Continuous),
            ("y".into(), CovariateKind::Continuous),
        ])
        .unwrap();
        let cohorts: Vec<String> = (0..20)
            .map(|i| if i < 10 { "1" } else { "2" }.to_string())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cols = vec![
            ColumnData::Numeric((0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            ColumnData::Numeric((0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        ];
        let mut missing = vec![vec![false; 20]; 2];
        missing[0][3] = true;
        let ds = Dataset::new(schema, cohorts, cols, missing).unwrap();
        let completed =
            crate::forest::impute_for_fit(&ds, &crate::forest::ForestParams::new(2)).unwrap();
        assert!(completed.fit_imputed());

        let d = two_level_dendrogram(&["1", "2"]);
        let params = RecurseParams {
            n_perm: 99,
            ..RecurseParams::default()
        };
        match recursive_bg(&d, &completed, &params) {
            Err(Error::InvalidParam(msg)) => assert!(msg.contains("fit-time imputation")),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_round_trips_through_a_reader() {
        let trace = TestTrace {
            records: vec![
                TestRecord {
                    left: "1".into(),
                    right: "2".into(),
                    columns_used: vec!["x".into(), "y".into()],
                    m: 30,
                    n: 40,
                    p_value: Some(0.25),
                    decision: Decision::Merged,
                    imputed: false,
                },
                TestRecord {
                    left: "1".into(),
                    right: "solo".into(),
                    columns_used: vec![],
                    m: 70,
                    n: 1,
                    p_value: None,
                    decision: Decision::Insufficient,
                    imputed: true,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        trace.write_csv(&path).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][2], "x;y");
        assert_eq!(&rows[0][5], "0.25");
        assert_eq!(&rows[1][5], "NA");
        assert_eq!(&rows[1][6], "kept-separate (insufficient data)");
    }
}
