//! Command-line front end.
//!
//! `relate relate` runs the full pipeline on a participant-level CSV: forest
//! dissimilarity, cohort-level clustering, then recursive two-sample testing
//! along the dendrogram. Every result file lands in `--out`, together with a
//! `run_manifest.json` that pins the exact configuration; `--manifest` reruns
//! one verbatim. `relate bgtest` applies the two-sample distribution test to
//! a pair of plain numeric CSVs, and `relate simulate` drives the synthetic
//! multi-cohort study.
//!
//! Exit codes: 0 on success, 1 for an unusable invocation or configuration,
//! 2 when the data cannot be read or analyzed.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use relate_core::{
    agglomerate, bg_test, cohort_matrix, fit_forest, load_csv, participant_matrix, recursive_bg,
    run_study, to_newick, CovariateSchema, ForestParams, Linkage, Matrix, RecurseParams,
    SchemaSource, SizeSpec, StudyConfig, DEFAULT_NA,
};

#[derive(Parser)]
#[command(name = "relate", version, about = "Group study cohorts that share a covariate distribution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: forest dissimilarity, clustering, recursive testing.
    Relate(RelateArgs),
    /// Two-sample distribution test between two numeric CSV files.
    Bgtest(BgtestArgs),
    /// Synthetic multi-cohort study at configurable scale.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct RelateArgs {
    /// Participant-level CSV, one row per participant.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    input: Option<PathBuf>,

    /// Header name of the cohort ID column.
    #[arg(long = "cohort-col", required_unless_present = "manifest", conflicts_with = "manifest")]
    cohort_col: Option<String>,

    /// Covariate kinds as TOML (`age = "continuous"`); inferred when omitted.
    #[arg(long, conflicts_with = "manifest")]
    schema: Option<PathBuf>,

    /// Merge threshold: two groups join when their test p-value is >= this.
    #[arg(long, conflicts_with = "manifest")]
    alpha: Option<f64>,

    /// Trees in the forest.
    #[arg(long, conflicts_with = "manifest")]
    trees: Option<usize>,

    /// Permutations per test.
    #[arg(long, conflicts_with = "manifest")]
    perms: Option<u32>,

    /// Cluster joining rule: average, single, or complete.
    #[arg(long, conflicts_with = "manifest")]
    linkage: Option<String>,

    /// Hot-deck-complete partially missing rows instead of dropping them.
    #[arg(long, conflicts_with = "manifest")]
    impute: bool,

    /// Also test all cohort pairs where a single cohort meets a pair.
    #[arg(long = "leaf-exhaustive", conflicts_with = "manifest")]
    leaf_exhaustive: bool,

    #[arg(long, conflicts_with = "manifest")]
    seed: Option<u64>,

    /// Output directory, created if absent; all files are written here.
    #[arg(long)]
    out: PathBuf,

    /// Worker threads (default: all cores; the RELATE_THREADS variable is
    /// honored when the flag is absent). Results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,

    /// Re-run a previous analysis from its run_manifest.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct BgtestArgs {
    /// First sample, CSV with a header row.
    file_a: PathBuf,
    /// Second sample, CSV with a header row.
    file_b: PathBuf,
    /// Comma-separated column names (default: every column that parses as
    /// numeric in both files). Values are used as-is, unstandardized.
    #[arg(long, value_delimiter = ',')]
    columns: Vec<String>,
    /// Permutations.
    #[arg(long, default_value_t = 999)]
    perms: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Study configuration TOML; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Draw cohort sizes from the full published pool instead of the config's.
    #[arg(long)]
    paper: bool,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for results.csv and summary.json.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores, or RELATE_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

/// Why a run stopped, shaped for the exit code it maps to.
enum Failure {
    /// Unusable invocation or configuration: exit 1.
    Config(String),
    /// The data could not be read or analyzed: exit 2.
    Data(String),
}

fn core_failure(e: relate_core::Error) -> Failure {
    match e {
        relate_core::Error::InvalidParam(msg) => Failure::Config(msg),
        other => Failure::Data(other.to_string()),
    }
}

/// Everything that determines the result of one `relate` run. Written next
/// to the outputs; `--manifest` replays it, so the analysis is reproducible
/// from this file and the input CSV alone. Threads and output location are
/// deliberately absent: neither affects the numbers.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunManifest {
    tool: String,
    tool_version: String,
    input: PathBuf,
    cohort_col: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema: Option<PathBuf>,
    alpha: f64,
    trees: usize,
    perms: u32,
    linkage: String,
    impute: bool,
    leaf_exhaustive: bool,
    seed: u64,
}

impl RunManifest {
    fn from_args(a: &RelateArgs) -> Self {
        RunManifest {
            tool: "relate".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            input: a.input.clone().expect("clap requires --input"),
            cohort_col: a.cohort_col.clone().expect("clap requires --cohort-col"),
            schema: a.schema.clone(),
            alpha: a.alpha.unwrap_or(0.05),
            trees: a.trees.unwrap_or(500),
            perms: a.perms.unwrap_or(999),
            linkage: a.linkage.clone().unwrap_or_else(|| "average".into()),
            impute: a.impute,
            leaf_exhaustive: a.leaf_exhaustive,
            seed: a.seed.unwrap_or(0),
        }
    }

    fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        if m.tool != "relate" {
            return Err(Failure::Config(format!(
                "{}: not a relate run manifest (tool = {:?})",
                path.display(),
                m.tool
            )));
        }
        Ok(m)
    }

    fn validate(&self) -> Result<(), Failure> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 || self.alpha >= 1.0 {
            return Err(Failure::Config(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        self.linkage
            .parse::<Linkage>()
            .map_err(|e| Failure::Config(e.to_string()))?;
        Ok(())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(f) = run(cli) {
        let (code, msg) = match f {
            Failure::Config(m) => (1, m),
            Failure::Data(m) => (2, m),
        };
        eprintln!("error: {msg}");
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Relate(a) => {
            init_threads(a.threads)?;
            let manifest = match &a.manifest {
                Some(path) => RunManifest::load(path)?,
                None => RunManifest::from_args(&a),
            };
            manifest.validate()?;
            cmd_relate(&manifest, &a.out)
        }
        Command::Bgtest(a) => {
            init_threads(None)?;
            cmd_bgtest(&a)
        }
        Command::Simulate(a) => {
            init_threads(a.threads)?;
            cmd_simulate(&a)
        }
    }
}

/// Sizes the global worker pool from the flag, then RELATE_THREADS, then the
/// machine. Must run before any parallel work.
fn init_threads(flag: Option<usize>) -> Result<(), Failure> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("RELATE_THREADS") {
            Ok(s) => s.trim().parse::<usize>().map_err(|_| {
                Failure::Config(format!("RELATE_THREADS must be a positive integer, got {s:?}"))
            })?,
            Err(_) => return Ok(()),
        },
    };
    if n == 0 {
        return Err(Failure::Config("threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(format!("thread pool: {e}")))
}

/// A permutation p-value can never fall below 1/(perms+1). When that floor
/// reaches `alpha` no test can reject and every cohort merges — legal, but
/// almost certainly a misconfiguration worth flagging.
fn warn_unreachable_alpha(alpha: f64, perms: u32) {
    let floor = 1.0 / (1.0 + f64::from(perms));
    if floor >= alpha {
        eprintln!(
            "warning: alpha {alpha} is unreachable with {perms} permutations \
             (smallest possible p-value is {floor:.4}); no test can reject, \
             so all cohorts will merge into one group"
        );
    }
}

fn cmd_relate(m: &RunManifest, out: &Path) -> Result<(), Failure> {
    let schema_source = match &m.schema {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let kinds = CovariateSchema::kinds_from_toml(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            SchemaSource::Kinds(kinds)
        }
        None => SchemaSource::Infer,
    };
    let ds = load_csv(&m.input, &m.cohort_col, schema_source, DEFAULT_NA)
        .map_err(|e| Failure::Data(format!("{}: {e}", m.input.display())))?;
    let linkage: Linkage = m.linkage.parse().map_err(core_failure)?;

    let mut fp = ForestParams::new(ds.n_covariates());
    fp.n_trees = m.trees;
    fp.seed = m.seed;
    let forest = fit_forest(&ds, &fp).map_err(core_failure)?;
    for w in &forest.warnings {
        eprintln!("warning: {w}");
    }

    let labels: Vec<String> = ds
        .cohort_indices()
        .map(|c| ds.cohort_ids()[c].clone())
        .collect();
    let pm = participant_matrix(&forest);
    let cm = cohort_matrix(&pm, &labels).map_err(core_failure)?;
    for w in &cm.warnings {
        eprintln!("warning: {w}");
    }
    let dendro = agglomerate(&cm, linkage).map_err(core_failure)?;

    warn_unreachable_alpha(m.alpha, m.perms);
    let rp = RecurseParams {
        alpha: m.alpha,
        impute: m.impute,
        leaf_exhaustive: m.leaf_exhaustive,
        n_perm: m.perms,
        seed: m.seed,
        ..RecurseParams::default()
    };
    let (groups, trace) = recursive_bg(&dendro, &ds, &rp).map_err(core_failure)?;

    fs::create_dir_all(out).map_err(|e| Failure::Config(format!("{}: {e}", out.display())))?;
    write_text(out, "dendrogram.newick", &(to_newick(&dendro) + "\n"))?;
    write_json(out, "dendrogram.json", &dendro)?;
    let file = File::create(out.join("cohort_distance.csv"))
        .map_err(|e| Failure::Data(format!("{}: {e}", out.join("cohort_distance.csv").display())))?;
    cm.write_csv(file).map_err(core_failure)?;
    trace.write_csv(out.join("trace.csv")).map_err(core_failure)?;
    write_json(out, "groups.json", &groups)?;
    write_json(out, "run_manifest.json", m)?;

    println!("{} cohorts -> {} group(s)", cm.k(), groups.n_groups());
    for (id, members) in groups.groups() {
        println!("  {id}: {}", members.join(", "));
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    write_text(dir, name, &(text + "\n"))
}

/// One CSV file held as strings, pre-selection.
struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table, Failure> {
    let mut rdr = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(String::from).collect());
    }
    Ok(Table { headers, rows })
}

impl Table {
    /// The column as numbers, or None if any cell refuses to parse.
    fn numeric_column(&self, j: usize) -> Option<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                r.get(j)
                    .and_then(|c| c.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
            })
            .collect()
    }

    /// The named column as numbers; addressing errors by file, row, column.
    fn parse_column(&self, path: &Path, name: &str) -> Result<Vec<f64>, Failure> {
        let j = self.headers.iter().position(|h| h == name).ok_or_else(|| {
            Failure::Data(format!("{}: column {name:?} not found", path.display()))
        })?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let cell = r.get(j).map(|s| s.trim()).unwrap_or("");
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Failure::Data(format!(
                            "{}: row {}, column {name:?}: cannot parse {cell:?} as a number",
                            path.display(),
                            i + 2,
                        ))
                    })
            })
            .collect()
    }
}

fn columns_to_matrix(columns: &[Vec<f64>], n_rows: usize) -> Matrix {
    let mut m = Matrix::zeros(n_rows, columns.len());
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

fn cmd_bgtest(a: &BgtestArgs) -> Result<(), Failure> {
    let ta = read_table(&a.file_a)?;
    let tb = read_table(&a.file_b)?;

    let names: Vec<String> = if a.columns.is_empty() {
        ta.headers
            .iter()
            .enumerate()
            .filter(|(j, h)| {
                ta.numeric_column(*j).is_some()
                    && tb
                        .headers
                        .iter()
                        .position(|g| g == *h)
                        .is_some_and(|k| tb.numeric_column(k).is_some())
            })
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        a.columns.clone()
    };
    if names.is_empty() {
        return Err(Failure::Data(format!(
            "no shared numeric columns between {} and {}",
            a.file_a.display(),
            a.file_b.display()
        )));
    }

    let cols_a = names
        .iter()
        .map(|n| ta.parse_column(&a.file_a, n))
        .collect::<Result<Vec<_>, _>>()?;
    let cols_b = names
        .iter()
        .map(|n| tb.parse_column(&a.file_b, n))
        .collect::<Result<Vec<_>, _>>()?;
    let x = columns_to_matrix(&cols_a, ta.rows.len());
    let y = columns_to_matrix(&cols_b, tb.rows.len());

    let mut result = bg_test(&x, &y, a.perms, a.seed).map_err(core_failure)?;
    result.columns_used = names;
    let text = serde_json::to_string_pretty(&result).map_err(|e| Failure::Data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            StudyConfig::from_toml(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => StudyConfig::default(),
    };
    if a.paper {
        cfg.sizes = SizeSpec::Named("paper".into());
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    warn_unreachable_alpha(cfg.alpha, cfg.perms);

    let results = run_study(&cfg).map_err(core_failure)?;
    fs::create_dir_all(&a.out)
        .map_err(|e| Failure::Config(format!("{}: {e}", a.out.display())))?;
    results
        .write_rows_csv(a.out.join("results.csv"))
        .map_err(core_failure)?;
    results
        .write_summary_json(a.out.join("summary.json"))
        .map_err(core_failure)?;

    println!("scenario  case  correct     wrong  mean_ari");
    for s in &results.summary {
        println!(
            "{:>8}  {:>4}  {:>3}/{:<3}  {:>8}  {:>8.3}",
            s.scenario, s.case, s.n_correct_cluster_count, s.n_sims, s.total_wrong_assignments,
            s.mean_ari
        );
    }
    println!("outputs in {}", a.out.display());
    Ok(())
}
