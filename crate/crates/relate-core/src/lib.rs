//! Grouping study cohorts by covariate distribution.
//!
//! Two stages: a multi-class random forest predicting cohort membership
//! yields a tree-path dissimilarity between participants, averaged into a
//! cohort-level distance matrix and clustered into a dendrogram; then an
//! energy-style two-sample test run recursively along the dendrogram merges
//! cohorts whose multivariate covariate distributions are indistinguishable.

pub mod bgtest;
pub mod data;
pub mod dissim;
pub mod error;
pub mod forest;
pub mod hclust;
pub mod matrix;
pub mod recurse;
pub mod rng;
pub mod simulate;

pub use bgtest::{bg_statistic, bg_test, mean_distances, BGResult};
pub use data::{
    encode, load_csv, observed_columns, write_csv, CovariateKind, CovariateSchema, Dataset,
    EncodedMatrix, SchemaSource, DEFAULT_NA,
};
pub use dissim::{cohort_matrix, participant_matrix, CohortDistanceMatrix, DissimMatrix};
pub use error::{Error, Result};
pub use forest::{fit_forest, impute_for_fit, path_split_counts, Forest, ForestParams, Tree};
pub use hclust::{agglomerate, to_newick, Dendrogram, Linkage};
pub use matrix::Matrix;
pub use recurse::{
    impute_within_group, recursive_bg, resolve_ambiguity, Decision, GroupAssignment,
    RecurseParams, TestRecord, TestTrace,
};
pub use simulate::{
    apply_missingness, evaluate, generate_cohorts, run_study, MissScenario, SimCase, SimMetrics,
    SimRow, SizeSpec, StudyConfig, StudyResults, SummaryRow,
};
