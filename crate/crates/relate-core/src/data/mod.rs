//! Typed tabular dataset with cohort membership and explicit missingness.

mod csv_io;
mod encode;

pub use csv_io::{load_csv, write_csv, SchemaSource, DEFAULT_NA};
pub use encode::{encode, EncodedColumn, EncodedMatrix};

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kind of a covariate column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    Binary,
    Count,
    /// Ordered, duplicate-free list of levels.
    Categorical(Vec<String>),
}

impl CovariateKind {
    pub fn name(&self) -> &'static str {
        match self {
            CovariateKind::Continuous => "continuous",
            CovariateKind::Binary => "binary",
            CovariateKind::Count => "count",
            CovariateKind::Categorical(_) => "categorical",
        }
    }

    pub fn is_numeric(&self) -> bool {
        !matches!(self, CovariateKind::Categorical(_))
    }
}

/// Ordered list of named, typed covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    entries: Vec<(String, CovariateKind)>,
}

impl CovariateSchema {
    /// Validates name uniqueness and categorical level lists.
    pub fn new(entries: Vec<(String, CovariateKind)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (name, kind) in &entries {
            if !seen.insert(name.clone()) {
                return Err(Error::Schema(format!("duplicate covariate name {name:?}")));
            }
            if let CovariateKind::Categorical(levels) = kind {
                if levels.is_empty() {
                    return Err(Error::Schema(format!(
                        "categorical covariate {name:?} has no levels"
                    )));
                }
                let distinct: BTreeSet<_> = levels.iter().collect();
                if distinct.len() != levels.len() {
                    return Err(Error::Schema(format!(
                        "categorical covariate {name:?} has duplicate levels"
                    )));
                }
            }
        }
        Ok(CovariateSchema { entries })
    }

    /// Parse a TOML mapping of covariate name to kind.
    ///
    /// Kinds are given either as a plain string (`age = "continuous"`) or as
    /// a table with levels (`race = { kind = "categorical", levels = ["a", "b"] }`).
    /// Column order always comes from the data file header, so the mapping
    /// itself is unordered.
    pub fn kinds_from_toml(text: &str) -> Result<Vec<(String, CovariateKind)>> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Schema(format!("schema config: {e}")))?;
        let mut out = Vec::new();
        for (name, value) in table {
            let kind = match &value {
                toml::Value::String(s) => match s.as_str() {
                    "continuous" => CovariateKind::Continuous,
                    "binary" => CovariateKind::Binary,
                    "count" => CovariateKind::Count,
                    other => {
                        return Err(Error::Schema(format!(
                            "covariate {name:?}: unknown kind {other:?}"
                        )))
                    }
                },
                toml::Value::Table(t) => {
                    let kind_name = t.get("kind").and_then(|v| v.as_str()).ok_or_else(|| {
                        Error::Schema(format!("covariate {name:?}: missing kind"))
                    })?;
                    if kind_name != "categorical" {
                        return Err(Error::Schema(format!(
                            "covariate {name:?}: only categorical kinds take a table form"
                        )));
                    }
                    let levels = t
                        .get("levels")
                        .and_then(|v| v.as_array())
                        .ok_or_else(|| Error::Schema(format!("covariate {name:?}: missing levels")))?
                        .iter()
                        .map(|v| {
                            v.as_str().map(str::to_owned).ok_or_else(|| {
                                Error::Schema(format!("covariate {name:?}: levels must be strings"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    CovariateKind::Categorical(levels)
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "covariate {name:?}: expected string or table"
                    )))
                }
            };
            out.push((name, kind));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn kind(&self, index: usize) -> &CovariateKind {
        &self.entries[index].1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CovariateKind)> {
        self.entries.iter().map(|(n, k)| (n.as_str(), k))
    }
}

/// One stored cell value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Num(f64),
    /// Index into the covariate's level list.
    Level(u32),
}

/// Column storage: numeric kinds share one representation, categorical
/// columns hold level indices.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    Categorical(Vec<u32>),
}

impl ColumnData {
    fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        }
    }
}

/// Numeric-aware label ordering: integer labels compare numerically,
/// everything else lexicographically, numbers first.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Participant rows with cohort labels, typed covariates and a missingness mask.
///
/// Immutable after construction; all operations on it are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: CovariateSchema,
    /// Distinct cohort labels in natural order.
    cohort_ids: Vec<String>,
    /// Per row, index into `cohort_ids`.
    cohort_of: Vec<u32>,
    /// P columns of length N.
    columns: Vec<ColumnData>,
    /// P masks of length N; `true` means the cell is missing.
    missing: Vec<Vec<bool>>,
    /// Set when the dataset was completed by fit-time imputation. Such data
    /// is only suitable for forest fitting, never for distribution testing.
    fit_imputed: bool,
}

impl Dataset {
    /// Assemble a dataset, validating dimensions and cohort coverage.
    pub fn new(
        schema: CovariateSchema,
        cohort_labels: Vec<String>,
        columns: Vec<ColumnData>,
        missing: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let n = cohort_labels.len();
        if columns.len() != schema.len() || missing.len() != schema.len() {
            return Err(Error::Schema(format!(
                "expected {} columns, got {} value columns and {} masks",
                schema.len(),
                columns.len(),
                missing.len()
            )));
        }
        for (p, col) in columns.iter().enumerate() {
            if col.len() != n || missing[p].len() != n {
                return Err(Error::Schema(format!(
                    "column {:?} length mismatch",
                    schema.name(p)
                )));
            }
            match (col, schema.kind(p)) {
                (ColumnData::Numeric(_), k) if k.is_numeric() => {}
                (ColumnData::Categorical(levels), CovariateKind::Categorical(list)) => {
                    for (&l, &m) in levels.iter().zip(&missing[p]) {
                        if !m && l as usize >= list.len() {
                            return Err(Error::Schema(format!(
                                "column {:?}: level index {} out of range",
                                schema.name(p),
                                l
                            )));
                        }
                    }
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "column {:?}: storage does not match declared kind",
                        schema.name(p)
                    )))
                }
            }
        }

        let mut cohort_ids: Vec<String> = cohort_labels
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        cohort_ids.sort_by(|a, b| natural_cmp(a, b));
        if cohort_ids.is_empty() {
            return Err(Error::Schema("dataset has no rows".into()));
        }
        let cohort_of = cohort_labels
            .iter()
            .map(|l| cohort_ids.iter().position(|c| c == l).unwrap() as u32)
            .collect();

        Ok(Dataset {
            schema,
            cohort_ids,
            cohort_of,
            columns,
            missing,
            fit_imputed: false,
        })
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    /// Number of rows N.
    pub fn n_rows(&self) -> usize {
        self.cohort_of.len()
    }

    /// Number of covariates P.
    pub fn n_covariates(&self) -> usize {
        self.schema.len()
    }

    /// Number of distinct cohorts K.
    pub fn n_cohorts(&self) -> usize {
        self.cohort_ids.len()
    }

    /// Distinct cohort labels in natural order.
    pub fn cohort_ids(&self) -> &[String] {
        &self.cohort_ids
    }

    /// Cohort index of a row.
    pub fn cohort_of(&self, row: usize) -> usize {
        self.cohort_of[row] as usize
    }

    /// Cohort indices for all rows, in row order.
    pub fn cohort_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.cohort_of.iter().map(|&c| c as usize)
    }

    /// Rows belonging to the given cohort index.
    pub fn rows_of_cohort(&self, cohort: usize) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| self.cohort_of(i) == cohort)
            .collect()
    }

    pub fn is_missing(&self, row: usize, covariate: usize) -> bool {
        self.missing[covariate][row]
    }

    /// Cell value, or `None` when the cell is masked missing.
    pub fn value(&self, row: usize, covariate: usize) -> Option<Cell> {
        if self.is_missing(row, covariate) {
            return None;
        }
        Some(match &self.columns[covariate] {
            ColumnData::Numeric(v) => Cell::Num(v[row]),
            ColumnData::Categorical(v) => Cell::Level(v[row]),
        })
    }

    pub fn column(&self, covariate: usize) -> &ColumnData {
        &self.columns[covariate]
    }

    pub fn fit_imputed(&self) -> bool {
        self.fit_imputed
    }

    pub(crate) fn mark_fit_imputed(&mut self) {
        self.fit_imputed = true;
    }

    pub(crate) fn mask_cell(&mut self, row: usize, covariate: usize) {
        self.missing[covariate][row] = true;
    }

    pub(crate) fn set_cell(&mut self, row: usize, covariate: usize, cell: Cell) {
        match (&mut self.columns[covariate], cell) {
            (ColumnData::Numeric(v), Cell::Num(x)) => v[row] = x,
            (ColumnData::Categorical(v), Cell::Level(l)) => v[row] = l,
            _ => panic!("cell kind does not match column storage"),
        }
        self.missing[covariate][row] = false;
    }

    /// True when any cell of the dataset is missing.
    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|m| m.iter().any(|&b| b))
    }

    /// Row count per cohort, in cohort order.
    pub fn cohort_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_cohorts()];
        for &c in &self.cohort_of {
            sizes[c as usize] += 1;
        }
        sizes
    }
}

/// Covariates whose per-cohort missing fraction is below `threshold` in
/// every listed cohort. Used to restrict a two-sample comparison to the
/// covariates actually observed on both sides.
pub fn observed_columns(ds: &Dataset, cohorts: &[usize], threshold: f64) -> Vec<usize> {
    debug_assert!(!cohorts.is_empty(), "cohort set must be non-empty");
    let mut rows_per_cohort: Vec<Vec<usize>> =
        cohorts.iter().map(|&c| ds.rows_of_cohort(c)).collect();
    rows_per_cohort.retain(|r| !r.is_empty());

    (0..ds.n_covariates())
        .filter(|&p| {
            rows_per_cohort.iter().all(|rows| {
                let miss = rows.iter().filter(|&&i| ds.is_missing(i, p)).count();
                (miss as f64) < threshold * rows.len() as f64
            })
        })
        .collect()
}
