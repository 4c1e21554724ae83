//! Scoring a recovered partition against the generating truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::recurse::GroupAssignment;

/// How one replicate fared. `evaluate` fills the accuracy fields; the study
/// runner fills the timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimMetrics {
    /// Found exactly as many groups as the truth has clusters.
    pub correct_cluster_count: bool,
    /// Cohorts left over after the best one-to-one pairing of found groups
    /// with truth clusters.
    pub n_wrong_assignments: usize,
    /// Adjusted Rand index between the two partitions of the cohorts.
    pub ari: f64,
    pub rf_seconds: f64,
    pub bg_seconds: f64,
}

/// Score a found partition against the truth (cohort label → cluster).
///
/// Wrong assignments count the cohorts not covered by a maximum-weight
/// one-to-one matching between found groups and truth clusters, weighted by
/// overlap size.
pub fn evaluate(found: &GroupAssignment, truth: &BTreeMap<String, u32>) -> SimMetrics {
    assert!(
        found.group_of_map().len() == truth.len()
            && found.group_of_map().keys().all(|c| truth.contains_key(c)),
        "found partition and truth cover different cohorts"
    );
    let n = truth.len();

    // Contingency table between found groups and truth clusters.
    let group_index: BTreeMap<&String, usize> = found
        .groups()
        .keys()
        .enumerate()
        .map(|(i, g)| (g, i))
        .collect();
    let mut cluster_ids: Vec<u32> = truth.values().copied().collect();
    cluster_ids.sort_unstable();
    cluster_ids.dedup();
    let n_groups = group_index.len();
    let n_clusters = cluster_ids.len();
    let mut overlap = vec![vec![0usize; n_clusters]; n_groups];
    for (cohort, group) in found.group_of_map() {
        let g = group_index[group];
        let c = cluster_ids
            .iter()
            .position(|&k| k == truth[cohort])
            .unwrap();
        overlap[g][c] += 1;
    }

    // Maximum-weight matching over subsets of truth clusters.
    let full = 1usize << n_clusters;
    let mut best = vec![0usize; full];
    for row in &overlap {
        let mut next = best.clone();
        for mask in 0..full {
            for (c, &w) in row.iter().enumerate() {
                if mask & (1 << c) == 0 {
                    let with = best[mask] + w;
                    let slot = &mut next[mask | (1 << c)];
                    if with > *slot {
                        *slot = with;
                    }
                }
            }
        }
        best = next;
    }
    let matched = *best.iter().max().unwrap();

    SimMetrics {
        correct_cluster_count: n_groups == n_clusters,
        n_wrong_assignments: n - matched,
        ari: adjusted_rand(&overlap, n),
        rf_seconds: 0.0,
        bg_seconds: 0.0,
    }
}

fn binom2(k: usize) -> f64 {
    (k * k.saturating_sub(1) / 2) as f64
}

fn adjusted_rand(overlap: &[Vec<usize>], n: usize) -> f64 {
    let row_sums: Vec<usize> = overlap.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..overlap[0].len())
        .map(|c| overlap.iter().map(|r| r[c]).sum())
        .collect();
    let sum_ij: f64 = overlap.iter().flatten().map(|&x| binom2(x)).sum();
    let sum_a: f64 = row_sums.iter().map(|&x| binom2(x)).sum();
    let sum_b: f64 = col_sums.iter().map(|&x| binom2(x)).sum();
    let expected = sum_a * sum_b / binom2(n);
    let maximum = (sum_a + sum_b) / 2.0;
    if maximum == expected {
        // Both partitions trivial (e.g. single cluster on both sides).
        return 1.0;
    }
    (sum_ij - expected) / (maximum - expected)
}
