//! CSV loading and writing with an explicit missingness sentinel.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};

use super::{natural_cmp, ColumnData, CovariateKind, CovariateSchema, Dataset};

/// Missingness sentinel used alongside the empty string.
pub const DEFAULT_NA: &str = "NA";

/// Schema handling for [`load_csv`]: either declared up front or inferred
/// from the file contents.
#[derive(Debug, Clone)]
pub enum SchemaSource {
    Declared(CovariateSchema),
    /// Kinds by name for a subset of columns; the rest are inferred.
    Kinds(Vec<(String, CovariateKind)>),
    Infer,
}

struct RawTable {
    header: Vec<String>,
    /// rows[r][c], raw strings.
    rows: Vec<Vec<String>>,
}

fn read_raw(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;
    let header = reader
        .headers()?
        .iter()
        .map(str::to_owned)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(record.iter().map(str::to_owned).collect());
    }
    Ok(RawTable { header, rows })
}

fn is_missing(raw: &str, sentinel: &str) -> bool {
    raw.is_empty() || raw == sentinel
}

/// Inference rule for an undeclared column: numeric with more than two
/// distinct values is continuous, numeric {0,1} is binary, anything else
/// categorical with observed levels in natural order.
fn infer_kind(name: &str, cells: &[&str]) -> Result<CovariateKind> {
    if cells.is_empty() {
        return Err(Error::AllMissing(name.to_owned()));
    }
    let numeric: Option<Vec<f64>> = cells
        .iter()
        .map(|c| c.parse::<f64>().ok().filter(|x| x.is_finite()))
        .collect();
    if let Some(values) = numeric {
        let mut distinct: Vec<f64> = values.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        if distinct.len() > 2 {
            return Ok(CovariateKind::Continuous);
        }
        if distinct.iter().all(|&x| x == 0.0 || x == 1.0) {
            return Ok(CovariateKind::Binary);
        }
    }
    let mut levels: Vec<String> = cells
        .iter()
        .map(|&c| c.to_owned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    levels.sort_by(|a, b| natural_cmp(a, b));
    Ok(CovariateKind::Categorical(levels))
}

fn parse_numeric(
    raw: &str,
    kind: &CovariateKind,
    row: usize,
    column: &str,
) -> Result<f64> {
    let err = || Error::CellParse {
        row,
        column: column.to_owned(),
        value: raw.to_owned(),
        kind: kind.name(),
    };
    let x: f64 = raw.parse().map_err(|_| err())?;
    if !x.is_finite() {
        return Err(err());
    }
    match kind {
        CovariateKind::Continuous => Ok(x),
        CovariateKind::Binary => {
            if x == 0.0 || x == 1.0 {
                Ok(x)
            } else {
                Err(err())
            }
        }
        CovariateKind::Count => {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x)
            } else {
                Err(err())
            }
        }
        CovariateKind::Categorical(_) => unreachable!("categorical handled separately"),
    }
}

/// Load a dataset from a headered CSV file.
///
/// Empty strings and `sentinel` (default "NA") become missing cells. Every
/// non-cohort column must either appear in the supplied schema or be
/// inferable from its observed values.
pub fn load_csv(
    path: impl AsRef<Path>,
    cohort_column: &str,
    schema: SchemaSource,
    sentinel: &str,
) -> Result<Dataset> {
    let raw = read_raw(path.as_ref())?;
    let cohort_idx = raw
        .header
        .iter()
        .position(|h| h == cohort_column)
        .ok_or_else(|| Error::CohortColumnNotFound(cohort_column.to_owned()))?;

    let covariate_cols: Vec<usize> = (0..raw.header.len()).filter(|&c| c != cohort_idx).collect();

    // Resolve a kind for every covariate column, in header order.
    let mut entries: Vec<(String, CovariateKind)> = Vec::with_capacity(covariate_cols.len());
    for &c in &covariate_cols {
        let name = &raw.header[c];
        let kind = match &schema {
            SchemaSource::Declared(s) => s
                .kind(s.index_of(name).ok_or_else(|| {
                    Error::Schema(format!("column {name:?} not in declared schema"))
                })?)
                .clone(),
            SchemaSource::Kinds(kinds) => {
                match kinds.iter().find(|(n, _)| n == name).map(|(_, k)| k) {
                    Some(k) => k.clone(),
                    None => {
                        let observed: Vec<&str> = raw
                            .rows
                            .iter()
                            .map(|r| r[c].as_str())
                            .filter(|v| !is_missing(v, sentinel))
                            .collect();
                        infer_kind(name, &observed)?
                    }
                }
            }
            SchemaSource::Infer => {
                let observed: Vec<&str> = raw
                    .rows
                    .iter()
                    .map(|r| r[c].as_str())
                    .filter(|v| !is_missing(v, sentinel))
                    .collect();
                infer_kind(name, &observed)?
            }
        };
        entries.push((name.clone(), kind));
    }
    let schema = CovariateSchema::new(entries)?;

    let n = raw.rows.len();
    let mut cohort_labels = Vec::with_capacity(n);
    let mut columns: Vec<ColumnData> = schema
        .iter()
        .map(|(_, k)| {
            if k.is_numeric() {
                ColumnData::Numeric(vec![0.0; n])
            } else {
                ColumnData::Categorical(vec![0; n])
            }
        })
        .collect();
    let mut missing = vec![vec![false; n]; schema.len()];

    for (r, record) in raw.rows.iter().enumerate() {
        let label = &record[cohort_idx];
        if is_missing(label, sentinel) {
            return Err(Error::Schema(format!(
                "row {}: missing cohort label",
                r + 1
            )));
        }
        cohort_labels.push(label.clone());
        for (p, &c) in covariate_cols.iter().enumerate() {
            let rawv = record[c].as_str();
            if is_missing(rawv, sentinel) {
                missing[p][r] = true;
                continue;
            }
            match (schema.kind(p), &mut columns[p]) {
                (CovariateKind::Categorical(levels), ColumnData::Categorical(v)) => {
                    let idx = levels.iter().position(|l| l == rawv).ok_or_else(|| {
                        Error::CellParse {
                            row: r + 1,
                            column: schema.name(p).to_owned(),
                            value: rawv.to_owned(),
                            kind: "categorical",
                        }
                    })?;
                    v[r] = idx as u32;
                }
                (kind, ColumnData::Numeric(v)) => {
                    v[r] = parse_numeric(rawv, kind, r + 1, schema.name(p))?;
                }
                _ => unreachable!("storage allocated from schema"),
            }
        }
    }

    Dataset::new(schema, cohort_labels, columns, missing)
}

/// Write a dataset back to CSV: cohort column first, then covariates in
/// schema order; missing cells become `sentinel`.
pub fn write_csv(
    ds: &Dataset,
    path: impl AsRef<Path>,
    cohort_column: &str,
    sentinel: &str,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec![cohort_column.to_owned()];
    header.extend(ds.schema().iter().map(|(n, _)| n.to_owned()));
    writer.write_record(&header)?;

    for i in 0..ds.n_rows() {
        let mut record = vec![ds.cohort_ids()[ds.cohort_of(i)].clone()];
        for p in 0..ds.n_covariates() {
            record.push(match ds.value(i, p) {
                None => sentinel.to_owned(),
                Some(super::Cell::Num(x)) => format!("{x}"),
                Some(super::Cell::Level(l)) => match ds.schema().kind(p) {
                    CovariateKind::Categorical(levels) => levels[l as usize].clone(),
                    _ => unreachable!(),
                },
            });
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
