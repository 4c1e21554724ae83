//! Browser bindings: three demo entry points over the core pipeline, all
//! JSON-in/JSON-out so the page stays plain JavaScript. Heavy knobs are
//! clamped to keep a click responsive in single-threaded wasm.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use relate_core::{
    agglomerate, bg_statistic, bg_test, cohort_matrix, fit_forest, generate_cohorts,
    mean_distances, participant_matrix, recursive_bg, CohortDistanceMatrix, Dataset, Dendrogram,
    ForestParams, Linkage, Matrix, RecurseParams, SimCase,
};

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StudyDemoConfig {
    case: u8,
    effect_size: f64,
    cohort_size: usize,
    trees: usize,
    perms: u32,
    alpha: f64,
    impute: bool,
    seed: u64,
}

impl Default for StudyDemoConfig {
    fn default() -> Self {
        StudyDemoConfig {
            case: 4,
            effect_size: 1.0,
            cohort_size: 60,
            trees: 60,
            perms: 199,
            alpha: 0.05,
            impute: false,
            seed: 1,
        }
    }
}

#[derive(Serialize)]
struct StudyDemoOutput {
    cohort_ids: Vec<String>,
    truth: std::collections::BTreeMap<String, u32>,
    distance: Vec<Vec<f64>>,
    newick: String,
    dendrogram: Dendrogram,
    groups: serde_json::Value,
    trace: serde_json::Value,
}

fn clamp<T: Ord>(value: T, lo: T, hi: T) -> T {
    value.max(lo).min(hi)
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Fits the demo pipeline up to the dendrogram.
fn pipeline(cfg: &StudyDemoConfig) -> Result<(Dataset, CohortDistanceMatrix, Dendrogram), String> {
    let case = SimCase::paper_case(cfg.case, cfg.effect_size).map_err(err)?;
    let size = clamp(cfg.cohort_size, 20, 150);
    let ds = generate_cohorts(&case, &[size], cfg.seed);
    let mut fp = ForestParams::new(ds.n_covariates());
    fp.n_trees = clamp(cfg.trees, 10, 200);
    fp.seed = cfg.seed;
    let forest = fit_forest(&ds, &fp).map_err(err)?;
    let labels: Vec<String> = ds
        .cohort_indices()
        .map(|c| ds.cohort_ids()[c].clone())
        .collect();
    let cdm = cohort_matrix(&participant_matrix(&forest), &labels).map_err(err)?;
    let dendro = agglomerate(&cdm, Linkage::Average).map_err(err)?;
    Ok((ds, cdm, dendro))
}

fn recurse_params(cfg: &StudyDemoConfig, alpha: f64) -> RecurseParams {
    RecurseParams {
        alpha,
        impute: cfg.impute,
        n_perm: clamp(cfg.perms, 99, 999),
        seed: cfg.seed,
        ..RecurseParams::default()
    }
}

/// Synthetic multi-cohort run: cohort distances, dendrogram, recursive test
/// trace and the final grouping, next to the generator's ground truth.
#[wasm_bindgen]
pub fn run_study_demo(config: &str) -> Result<String, JsError> {
    js(study_demo(config))
}

fn study_demo(config: &str) -> Result<String, String> {
    let cfg: StudyDemoConfig = serde_json::from_str(config).map_err(err)?;
    let case = SimCase::paper_case(cfg.case, cfg.effect_size).map_err(err)?;
    let (ds, cdm, dendro) = pipeline(&cfg)?;
    let (groups, trace) = recursive_bg(&dendro, &ds, &recurse_params(&cfg, cfg.alpha)).map_err(err)?;

    let k = cdm.k();
    let distance: Vec<Vec<f64>> = (0..k)
        .map(|a| (0..k).map(|b| cdm.get(a, b)).collect())
        .collect();
    let out = StudyDemoOutput {
        cohort_ids: cdm.cohort_ids.clone(),
        truth: case.truth_map(),
        distance,
        newick: relate_core::to_newick(&dendro),
        dendrogram: dendro,
        groups: serde_json::to_value(&groups).map_err(err)?,
        trace: serde_json::to_value(&trace.records).map_err(err)?,
    };
    serde_json::to_string(&out).map_err(err)
}

/// The same fitted pipeline regrouped over a grid of thresholds, for an
/// alpha slider: one forest fit, one recursion per grid point.
#[wasm_bindgen]
pub fn run_alpha_sweep_demo(config: &str) -> Result<String, JsError> {
    js(alpha_sweep_demo(config))
}

fn alpha_sweep_demo(config: &str) -> Result<String, String> {
    let cfg: StudyDemoConfig = serde_json::from_str(config).map_err(err)?;
    let (ds, _, dendro) = pipeline(&cfg)?;

    #[derive(Serialize)]
    struct Step {
        alpha: f64,
        n_groups: usize,
        groups: serde_json::Value,
    }
    let grid = [0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5];
    let mut steps = Vec::with_capacity(grid.len());
    for &alpha in &grid {
        let (groups, _) = recursive_bg(&dendro, &ds, &recurse_params(&cfg, alpha)).map_err(err)?;
        steps.push(Step {
            alpha,
            n_groups: groups.n_groups(),
            groups: serde_json::to_value(&groups).map_err(err)?,
        });
    }
    serde_json::to_string(&steps).map_err(err)
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BgDemoConfig {
    shift: f64,
    m: usize,
    n: usize,
    dims: usize,
    perms: u32,
    seed: u64,
}

impl Default for BgDemoConfig {
    fn default() -> Self {
        BgDemoConfig { shift: 0.5, m: 80, n: 80, dims: 3, perms: 499, seed: 1 }
    }
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Approximately standard normal (Irwin-Hall of 12 uniforms, centered).
fn gauss(state: &mut u64) -> f64 {
    (0..12).map(|_| splitmix(state) as f64 / 2f64.powi(64)).sum::<f64>() - 6.0
}

/// Two synthetic normal samples, the test verdict, and the permutation null
/// of the statistic for a histogram.
#[wasm_bindgen]
pub fn run_bgtest_demo(config: &str) -> Result<String, JsError> {
    js(bgtest_demo(config))
}

fn bgtest_demo(config: &str) -> Result<String, String> {
    let cfg: BgDemoConfig = serde_json::from_str(config).map_err(err)?;
    let (m, n) = (clamp(cfg.m, 5, 300), clamp(cfg.n, 5, 300));
    let dims = clamp(cfg.dims, 1, 10);
    let n_perm = clamp(cfg.perms, 99, 999);

    let mut state = cfg.seed ^ 0xD5;
    let fill = |state: &mut u64, rows: usize, shift: f64| {
        let data = (0..rows * dims).map(|_| gauss(state) + shift).collect();
        Matrix::from_rows(rows, dims, data)
    };
    let x = fill(&mut state, m, 0.0);
    let y = fill(&mut state, n, cfg.shift);
    let result = bg_test(&x, &y, n_perm, cfg.seed).map_err(err)?;

    // Re-derive a null sample of the statistic for display: shuffle the
    // pooled rows, split at m, recompute. Independent of the test's own
    // permutation stream, so the histogram is an honest fresh draw.
    let mut pooled = Matrix::zeros(m + n, dims);
    for i in 0..m {
        pooled.row_mut(i).copy_from_slice(x.row(i));
    }
    for j in 0..n {
        pooled.row_mut(m + j).copy_from_slice(y.row(j));
    }
    let mut order: Vec<usize> = (0..m + n).collect();
    let draws = n_perm.min(500);
    let mut null = Vec::with_capacity(draws as usize);
    for _ in 0..draws {
        for i in (1..order.len()).rev() {
            let j = (splitmix(&mut state) % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let xs = pooled.select_rows(&order[..m]);
        let ys = pooled.select_rows(&order[m..]);
        let (ff, gg, fg) = mean_distances(&xs, &ys).map_err(err)?;
        null.push(bg_statistic(ff, gg, fg));
    }

    #[derive(Serialize)]
    struct BgDemoOutput {
        result: relate_core::BGResult,
        null: Vec<f64>,
    }
    serde_json::to_string(&BgDemoOutput { result, null }).map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_demo_reports_all_sections_and_respects_truth() {
        let out = study_demo(r#"{"case": 4, "seed": 3, "trees": 40, "perms": 99}"#).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(doc["cohort_ids"].as_array().unwrap().len(), 10);
        assert_eq!(doc["distance"][0].as_array().unwrap().len(), 10);
        assert!(doc["newick"].as_str().unwrap().ends_with(';'));
        assert_eq!(doc["truth"]["1"], 0);
        assert_eq!(doc["truth"]["6"], 1);
        assert!(!doc["trace"].as_array().unwrap().is_empty());
    }

    #[test]
    fn alpha_sweep_is_monotone_in_group_count() {
        let out = alpha_sweep_demo(r#"{"case": 1, "seed": 5, "trees": 30, "perms": 99, "cohort_size": 30}"#)
            .unwrap();
        let steps: Vec<serde_json::Value> = serde_json::from_str(&out).unwrap();
        assert_eq!(steps.len(), 9);
        let counts: Vec<u64> = steps.iter().map(|s| s["n_groups"].as_u64().unwrap()).collect();
        for w in counts.windows(2) {
            assert!(w[0] <= w[1], "groups must not shrink as alpha rises: {counts:?}");
        }
    }

    #[test]
    fn bgtest_demo_shifts_move_the_p_value() {
        let near = bgtest_demo(r#"{"shift": 0.0, "seed": 9}"#).unwrap();
        let far = bgtest_demo(r#"{"shift": 2.0, "seed": 9}"#).unwrap();
        let near: serde_json::Value = serde_json::from_str(&near).unwrap();
        let far: serde_json::Value = serde_json::from_str(&far).unwrap();
        assert!(far["result"]["p_value"].as_f64().unwrap() <= 0.05);
        assert!(near["result"]["p_value"].as_f64().unwrap() > 0.05);
        assert_eq!(near["null"].as_array().unwrap().len(), 499);
        // Bad knobs surface as errors, not panics.
        assert!(bgtest_demo(r#"{"case": 1}"#).is_err());
        assert!(study_demo(r#"{"case": 9}"#).is_err());
    }
}
