//! Fit-time completion of missing cells, used only so trees can be grown:
//! never feed the result to a distribution test.

use crate::data::{Cell, ColumnData, CovariateKind, Dataset};
use crate::error::{Error, Result};
use crate::rng::tree_stream;

use super::{bootstrap_rows, fit_complete, impute_seed, ForestParams};

/// Two-pass imputation: pass 1 fills every missing cell with the pooled
/// median (numeric) or mode (binary/categorical); pass 2 fits a quarter-size
/// forest on the filled data and replaces each imputed cell with the
/// median/mode of the originally observed values among in-bag rows sharing
/// the cell's terminal node, aggregated across trees. Count cells are
/// rounded back to integers. Returns a complete dataset tagged fit-imputed.
pub fn impute_for_fit(ds: &Dataset, params: &ForestParams) -> Result<Dataset> {
    if !ds.has_missing() {
        return Ok(ds.clone());
    }

    let n = ds.n_rows();
    let mut holes: Vec<(usize, usize)> = Vec::new();
    for p in 0..ds.n_covariates() {
        let mut observed_any = false;
        for i in 0..n {
            if ds.is_missing(i, p) {
                holes.push((i, p));
            } else {
                observed_any = true;
            }
        }
        if !observed_any {
            return Err(Error::AllMissing(ds.schema().name(p).to_owned()));
        }
    }

    // Pass 1: pooled fills.
    let mut filled = ds.clone();
    for p in 0..ds.n_covariates() {
        let fill = pooled_fill(ds, p);
        for i in 0..n {
            if ds.is_missing(i, p) {
                filled.set_cell(i, p, fill);
            }
        }
    }

    // Pass 2: terminal-node neighbourhood refits.
    let small = ForestParams {
        n_trees: (params.n_trees / 4).max(1),
        seed: impute_seed(params.seed),
        ..params.clone()
    };
    let forest = fit_complete(&filled, &small);
    let in_bags: Vec<Vec<bool>> = (0..small.n_trees)
        .map(|b| {
            let mut rng = tree_stream(small.seed, b as u64);
            bootstrap_rows(&mut rng, n).1
        })
        .collect();

    let mut out = filled.clone();
    for &(i, p) in &holes {
        let mut medians: Vec<f64> = Vec::new();
        let mut level_votes: Vec<u32> = match ds.schema().kind(p) {
            CovariateKind::Categorical(levels) => vec![0; levels.len()],
            CovariateKind::Binary => vec![0; 2],
            _ => Vec::new(),
        };
        for b in 0..small.n_trees {
            let terminal = forest.terminal_of[b][i];
            let peers: Vec<usize> = (0..n)
                .filter(|&j| {
                    in_bags[b][j] && forest.terminal_of[b][j] == terminal && !ds.is_missing(j, p)
                })
                .collect();
            if peers.is_empty() {
                continue;
            }
            match ds.schema().kind(p) {
                CovariateKind::Continuous | CovariateKind::Count => {
                    let values: Vec<f64> = peers
                        .iter()
                        .map(|&j| match ds.value(j, p) {
                            Some(Cell::Num(x)) => x,
                            _ => unreachable!(),
                        })
                        .collect();
                    medians.push(median(values));
                }
                CovariateKind::Binary => {
                    let ones = peers
                        .iter()
                        .filter(|&&j| ds.value(j, p) == Some(Cell::Num(1.0)))
                        .count();
                    let mode = usize::from(2 * ones > peers.len());
                    level_votes[mode] += 1;
                }
                CovariateKind::Categorical(_) => {
                    let mut counts = vec![0u32; level_votes.len()];
                    for &j in &peers {
                        let Some(Cell::Level(l)) = ds.value(j, p) else {
                            unreachable!();
                        };
                        counts[l as usize] += 1;
                    }
                    level_votes[argmax(&counts)] += 1;
                }
            }
        }

        // No tree had an informative neighbourhood: keep the pass-1 fill.
        match ds.schema().kind(p) {
            CovariateKind::Continuous => {
                if !medians.is_empty() {
                    let mean = medians.iter().sum::<f64>() / medians.len() as f64;
                    out.set_cell(i, p, Cell::Num(mean));
                }
            }
            CovariateKind::Count => {
                if !medians.is_empty() {
                    let mean = medians.iter().sum::<f64>() / medians.len() as f64;
                    out.set_cell(i, p, Cell::Num(mean.round().max(0.0)));
                }
            }
            CovariateKind::Binary => {
                if level_votes.iter().any(|&v| v > 0) {
                    out.set_cell(i, p, Cell::Num(argmax(&level_votes) as f64));
                }
            }
            CovariateKind::Categorical(_) => {
                if level_votes.iter().any(|&v| v > 0) {
                    out.set_cell(i, p, Cell::Level(argmax(&level_votes) as u32));
                }
            }
        }
    }

    out.mark_fit_imputed();
    Ok(out)
}

/// First index of the maximum, so ties resolve to the lowest level.
fn argmax(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn pooled_fill(ds: &Dataset, p: usize) -> Cell {
    match (ds.schema().kind(p), ds.column(p)) {
        (CovariateKind::Categorical(levels), ColumnData::Categorical(data)) => {
            let mut counts = vec![0u32; levels.len()];
            for (i, &l) in data.iter().enumerate() {
                if !ds.is_missing(i, p) {
                    counts[l as usize] += 1;
                }
            }
            Cell::Level(argmax(&counts) as u32)
        }
        (CovariateKind::Binary, ColumnData::Numeric(data)) => {
            let mut counts = [0u32; 2];
            for (i, &x) in data.iter().enumerate() {
                if !ds.is_missing(i, p) {
                    counts[(x == 1.0) as usize] += 1;
                }
            }
            // Strict majority picks 1; ties go to 0.
            Cell::Num((counts[1] > counts[0]) as usize as f64)
        }
        (kind, ColumnData::Numeric(data)) => {
            let observed: Vec<f64> = data
                .iter()
                .enumerate()
                .filter(|&(i, _)| !ds.is_missing(i, p))
                .map(|(_, &x)| x)
                .collect();
            let m = median(observed);
            if matches!(kind, CovariateKind::Count) {
                Cell::Num(m.round().max(0.0))
            } else {
                Cell::Num(m)
            }
        }
        _ => unreachable!("storage matches schema"),
    }
}
