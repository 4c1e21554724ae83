//! Synthetic multi-cohort study generator and end-to-end evaluation harness.
//!
//! Ten cohorts, fifteen covariates: ten correlated normals, two binaries cut
//! from designated normal margins, one bounded count, and two multi-level
//! categoricals. Cohorts fall into latent clusters; cohorts in one cluster
//! share every generator parameter, clusters are separated by a configurable
//! mean shift (and, in one layout, by their correlation strength). A
//! missingness layer masks chosen covariates within chosen cohorts at
//! controlled rates, with the masking probability driven by an
//! always-observed covariate.

mod metrics;
mod study;

pub use metrics::{evaluate, SimMetrics};
pub use study::{run_study, SimRow, SizeSpec, StudyConfig, StudyResults, SummaryRow};

use rand::Rng;
use rand_distr::{Binomial, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnData, CovariateKind, CovariateSchema, Dataset};
use crate::error::{Error, Result};
use crate::rng::{stream, tags};

pub const N_COHORTS: usize = 10;

/// Desk-scale cohort size pool: a full study stays under minutes.
pub const DESK_SIZES: &[usize] = &[50, 100, 150];

/// Cohort size pool at study scale.
pub const PAPER_SIZES: &[usize] = &[30, 50, 100, 200, 500, 700, 750, 900, 1000, 1200];

/// Per-cluster binomial success probabilities (count covariate).
const BINOM_P: [f64; 4] = [0.3, 0.5, 0.65, 0.8];
/// Base level probabilities for the two categorical covariates; cluster `c`
/// uses the base rotated left by `c`.
const MULTI3_BASE: [f64; 3] = [0.4, 0.35, 0.25];
const MULTI4_BASE: [f64; 4] = [0.35, 0.3, 0.2, 0.15];

/// One cluster layout over the ten cohorts plus the generator parameters of
/// each cluster. Everything here lands in the emitted study config, so a run
/// can be audited and replayed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimCase {
    pub case_id: u8,
    /// Cluster index of each cohort, cohorts "1".."10" in order.
    pub cluster_truth: Vec<u32>,
    /// Mean shift of every normal margin, per cluster.
    pub mean_shift: Vec<f64>,
    /// Exchangeable correlation of the normal block, per cluster.
    pub rho: Vec<f64>,
    /// Success probability of the count covariate, per cluster.
    pub binom_p: Vec<f64>,
    /// Level probabilities of the two categorical covariates, per cluster.
    pub multi3: Vec<[f64; 3]>,
    pub multi4: Vec<[f64; 4]>,
}

impl SimCase {
    /// The five studied layouts. `effect_size` is the per-cluster-step mean
    /// shift in within-cluster standard deviations.
    pub fn paper_case(case_id: u8, effect_size: f64) -> Result<SimCase> {
        let cluster_truth: Vec<u32> = match case_id {
            1 => vec![0; 10],
            2 => vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1],
            3 => vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 2],
            4 => vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1],
            5 => vec![0, 0, 0, 1, 1, 2, 2, 3, 3, 3],
            other => {
                return Err(Error::InvalidParam(format!(
                    "no such simulation case: {other}"
                )))
            }
        };
        let k = *cluster_truth.iter().max().unwrap() as usize + 1;
        let rho = if case_id == 5 {
            vec![0.15, 0.3, 0.45, 0.6]
        } else {
            vec![0.3; k]
        };
        let rotate3 = |c: usize| {
            let mut p = [0.0; 3];
            for (i, slot) in p.iter_mut().enumerate() {
                *slot = MULTI3_BASE[(i + c) % 3];
            }
            p
        };
        let rotate4 = |c: usize| {
            let mut p = [0.0; 4];
            for (i, slot) in p.iter_mut().enumerate() {
                *slot = MULTI4_BASE[(i + c) % 4];
            }
            p
        };
        Ok(SimCase {
            case_id,
            cluster_truth,
            mean_shift: (0..k).map(|c| c as f64 * effect_size).collect(),
            rho,
            binom_p: BINOM_P[..k].to_vec(),
            multi3: (0..k).map(rotate3).collect(),
            multi4: (0..k).map(rotate4).collect(),
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.mean_shift.len()
    }

    /// Truth partition keyed by cohort label.
    pub fn truth_map(&self) -> std::collections::BTreeMap<String, u32> {
        self.cluster_truth
            .iter()
            .enumerate()
            .map(|(i, &c)| ((i + 1).to_string(), c))
            .collect()
    }
}

/// Which slice of the data goes missing: how many cohorts, how many
/// covariates, and the within-block masking rates (cycled across the chosen
/// covariates).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MissScenario {
    pub scenario_id: u8,
    pub n_missing_cohorts: usize,
    pub n_missing_covariates: usize,
    pub rates: Vec<f64>,
}

impl MissScenario {
    /// The five studied scenarios: (2,2), (2,4), (5,2), (5,4), (5,6),
    /// alternating 40%/60% rates.
    pub fn paper_scenario(scenario_id: u8) -> Result<MissScenario> {
        let (n_missing_cohorts, n_missing_covariates) = match scenario_id {
            1 => (2, 2),
            2 => (2, 4),
            3 => (5, 2),
            4 => (5, 4),
            5 => (5, 6),
            other => {
                return Err(Error::InvalidParam(format!(
                    "no such missingness scenario: {other}"
                )))
            }
        };
        Ok(MissScenario {
            scenario_id,
            n_missing_cohorts,
            n_missing_covariates,
            rates: vec![0.4, 0.6],
        })
    }
}

fn covariate_schema() -> CovariateSchema {
    let mut entries: Vec<(String, CovariateKind)> = (1..=10)
        .map(|i| (format!("x{i:02}"), CovariateKind::Continuous))
        .collect();
    entries.push(("b11".into(), CovariateKind::Binary));
    entries.push(("b12".into(), CovariateKind::Binary));
    entries.push(("n13".into(), CovariateKind::Count));
    entries.push((
        "m14".into(),
        CovariateKind::Categorical(vec!["l1".into(), "l2".into(), "l3".into()]),
    ));
    entries.push((
        "m15".into(),
        CovariateKind::Categorical(vec!["l1".into(), "l2".into(), "l3".into(), "l4".into()]),
    ));
    CovariateSchema::new(entries).expect("fixed schema is valid")
}

fn sample_level(rng: &mut impl Rng, probs: &[f64]) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (level, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return level as u32;
        }
    }
    (probs.len() - 1) as u32
}

/// Draw the ten cohorts of a case. Cohort sizes are sampled from `size_pool`;
/// equal seeds give byte-identical datasets.
///
/// Covariates: x01–x10 are margins of a 12-dimensional exchangeable-
/// correlation normal shifted by the cluster's mean; b11/b12 cut the two
/// remaining margins at zero — the unshifted cluster's median, so its binary
/// marginals sit at one half; n13 is binomial(10, p); m14/m15 are
/// categorical.
pub fn generate_cohorts(case: &SimCase, size_pool: &[usize], seed: u64) -> Dataset {
    assert!(!size_pool.is_empty(), "size pool must be non-empty");
    let mut rng = stream(seed, tags::GENERATE, u64::from(case.case_id));
    let sizes: Vec<usize> = (0..N_COHORTS)
        .map(|_| size_pool[rng.gen_range(0..size_pool.len())])
        .collect();
    let n: usize = sizes.iter().sum();

    let mut cohort_labels = Vec::with_capacity(n);
    let mut numeric: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 13];
    let mut cat14 = Vec::with_capacity(n);
    let mut cat15 = Vec::with_capacity(n);

    for (cohort, &size) in sizes.iter().enumerate() {
        let cluster = case.cluster_truth[cohort] as usize;
        let shift = case.mean_shift[cluster];
        let rho = case.rho[cluster];
        let (a, b) = ((1.0 - rho).sqrt(), rho.sqrt());
        let label = (cohort + 1).to_string();
        for _ in 0..size {
            cohort_labels.push(label.clone());
            let shared: f64 = rng.sample(StandardNormal);
            let mut margins = [0.0f64; 12];
            for m in &mut margins {
                let z: f64 = rng.sample(StandardNormal);
                *m = a * z + b * shared + shift;
            }
            for (p, slot) in numeric.iter_mut().take(10).enumerate() {
                slot.push(margins[p]);
            }
            numeric[10].push(if margins[10] > 0.0 { 1.0 } else { 0.0 });
            numeric[11].push(if margins[11] > 0.0 { 1.0 } else { 0.0 });
            let count = rng.sample(Binomial::new(10, case.binom_p[cluster]).unwrap());
            numeric[12].push(count as f64);
            cat14.push(sample_level(&mut rng, &case.multi3[cluster]));
            cat15.push(sample_level(&mut rng, &case.multi4[cluster]));
        }
    }

    let mut columns: Vec<ColumnData> = numeric.into_iter().map(ColumnData::Numeric).collect();
    columns.push(ColumnData::Categorical(cat14));
    columns.push(ColumnData::Categorical(cat15));
    let missing = vec![vec![false; n]; 15];
    Dataset::new(covariate_schema(), cohort_labels, columns, missing)
        .expect("generated data satisfies its own schema")
}

/// Mask cells of randomly chosen (cohort, covariate) blocks.
///
/// Within a block, a row's masking probability is its rate shifted up or down
/// by `min(0.2, rate, 1−rate)` according to whether an always-observed driver
/// covariate sits above its cohort median — missingness depends only on
/// observed values.
pub fn apply_missingness(ds: &Dataset, sc: &MissScenario, seed: u64) -> Dataset {
    assert!(
        sc.n_missing_cohorts <= ds.n_cohorts(),
        "scenario selects more cohorts than exist"
    );
    assert!(
        sc.n_missing_covariates < ds.n_covariates(),
        "scenario must leave at least one covariate observed"
    );
    let mut rng = stream(seed, tags::MISSING, u64::from(sc.scenario_id));
    let mut cohorts =
        rand::seq::index::sample(&mut rng, ds.n_cohorts(), sc.n_missing_cohorts).into_vec();
    cohorts.sort_unstable();
    let mut covs =
        rand::seq::index::sample(&mut rng, ds.n_covariates(), sc.n_missing_covariates).into_vec();
    covs.sort_unstable();

    let driver = (0..ds.n_covariates())
        .find(|p| {
            !covs.contains(p) && matches!(ds.schema().kind(*p), CovariateKind::Continuous)
        })
        .expect("an always-observed continuous driver covariate exists");

    let mut out = ds.clone();
    for (pos, &cov) in covs.iter().enumerate() {
        let rate = sc.rates[pos % sc.rates.len()];
        let delta = rate.min(1.0 - rate).min(0.2);
        for &cohort in &cohorts {
            let rows = ds.rows_of_cohort(cohort);
            let mut driver_vals: Vec<f64> = rows
                .iter()
                .map(|&r| match ds.column(driver) {
                    ColumnData::Numeric(v) => v[r],
                    ColumnData::Categorical(_) => unreachable!("driver is continuous"),
                })
                .collect();
            driver_vals.sort_by(f64::total_cmp);
            let mid = driver_vals.len() / 2;
            let median = if driver_vals.len() % 2 == 0 {
                (driver_vals[mid - 1] + driver_vals[mid]) / 2.0
            } else {
                driver_vals[mid]
            };
            for &row in &rows {
                let v = match ds.column(driver) {
                    ColumnData::Numeric(vals) => vals[row],
                    ColumnData::Categorical(_) => unreachable!(),
                };
                let p = if v > median { rate + delta } else { rate - delta };
                if rng.gen::<f64>() < p {
                    out.mask_cell(row, cov);
                }
            }
        }
    }
    out
}
