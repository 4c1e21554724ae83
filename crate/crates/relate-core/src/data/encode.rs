//! Mixed-type covariates to a real matrix: one-hot categoricals, optional
//! z-scoring of numeric columns over the selected rows.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::{Cell, CovariateKind, Dataset};

/// Provenance of one encoded column.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedColumn {
    /// Index of the source covariate in the dataset schema.
    pub covariate: usize,
    /// Level index when the column is a one-hot indicator.
    pub level: Option<u32>,
    /// (mean, sd) applied when the column was z-scored.
    pub standardization: Option<(f64, f64)>,
}

/// Fully observed numeric view of a row/column selection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMatrix {
    pub values: Matrix,
    pub columns: Vec<EncodedColumn>,
    /// Names of constant numeric covariates dropped under standardization.
    pub dropped: Vec<String>,
}

/// Encode the (rows × columns) selection of a dataset.
///
/// Continuous and count covariates become one column each, z-scored with the
/// sample standard deviation over the selected rows when `standardize` is
/// set; binary covariates one 0/1 column; a categorical covariate with L
/// levels becomes L one-hot columns. Column order follows schema order. A
/// constant numeric column under standardization is dropped and recorded in
/// `dropped` rather than treated as an error.
pub fn encode(
    ds: &Dataset,
    rows: &[usize],
    columns: &[usize],
    standardize: bool,
) -> Result<EncodedMatrix> {
    for &i in rows {
        for &p in columns {
            if ds.is_missing(i, p) {
                return Err(Error::MissingCell {
                    row: i,
                    column: ds.schema().name(p).to_owned(),
                });
            }
        }
    }

    let mut cols: Vec<(EncodedColumn, Vec<f64>)> = Vec::new();
    let mut dropped = Vec::new();

    for &p in columns {
        match ds.schema().kind(p) {
            CovariateKind::Categorical(levels) => {
                let mut indicators = vec![vec![0.0; rows.len()]; levels.len()];
                for (r, &i) in rows.iter().enumerate() {
                    let Some(Cell::Level(l)) = ds.value(i, p) else {
                        unreachable!("missingness checked above");
                    };
                    indicators[l as usize][r] = 1.0;
                }
                for (l, data) in indicators.into_iter().enumerate() {
                    cols.push((
                        EncodedColumn {
                            covariate: p,
                            level: Some(l as u32),
                            standardization: None,
                        },
                        data,
                    ));
                }
            }
            CovariateKind::Binary => {
                let data = numeric_column(ds, rows, p);
                cols.push((
                    EncodedColumn {
                        covariate: p,
                        level: None,
                        standardization: None,
                    },
                    data,
                ));
            }
            CovariateKind::Continuous | CovariateKind::Count => {
                let mut data = numeric_column(ds, rows, p);
                let mut standardization = None;
                if standardize {
                    match sample_mean_sd(&data) {
                        Some((mean, sd)) => {
                            for x in &mut data {
                                *x = (*x - mean) / sd;
                            }
                            standardization = Some((mean, sd));
                        }
                        None => {
                            dropped.push(ds.schema().name(p).to_owned());
                            continue;
                        }
                    }
                }
                cols.push((
                    EncodedColumn {
                        covariate: p,
                        level: None,
                        standardization,
                    },
                    data,
                ));
            }
        }
    }

    let q = cols.len();
    let mut values = Matrix::zeros(rows.len(), q);
    for (c, (_, data)) in cols.iter().enumerate() {
        for (r, &x) in data.iter().enumerate() {
            values.set(r, c, x);
        }
    }
    Ok(EncodedMatrix {
        values,
        columns: cols.into_iter().map(|(meta, _)| meta).collect(),
        dropped,
    })
}

fn numeric_column(ds: &Dataset, rows: &[usize], p: usize) -> Vec<f64> {
    rows.iter()
        .map(|&i| match ds.value(i, p) {
            Some(Cell::Num(x)) => x,
            _ => unreachable!("missingness checked above"),
        })
        .collect()
}

/// Sample mean and sd (n−1 denominator); `None` when fewer than two values
/// or the column is constant.
fn sample_mean_sd(data: &[f64]) -> Option<(f64, f64)> {
    if data.len() < 2 {
        return None;
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd > 0.0 {
        Some((mean, sd))
    } else {
        None
    }
}
