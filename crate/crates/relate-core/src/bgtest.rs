//! Two-sample multivariate equality-of-distribution test built on mean
//! pairwise Euclidean distances, with a permutation null.
//!
//! The statistic compares the bivariate summaries [mu_ff, mu_fg] and
//! [mu_fg, mu_gg]: under equal distributions all three mean distances agree,
//! so the squared gap between the summaries is near zero. Inference is by
//! random re-splits of the pooled rows; the pooled pairwise-distance matrix
//! is computed once and every permutation only re-indexes it.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{euclidean, Matrix};
use crate::rng::{stream, tags};

/// Outcome of one two-sample distance test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BGResult {
    /// Mean pairwise distance within the first sample.
    pub mu_ff: f64,
    /// Mean pairwise distance within the second sample.
    pub mu_gg: f64,
    /// Mean distance between samples.
    pub mu_fg: f64,
    /// (mu_ff − mu_fg)² + (mu_gg − mu_fg)².
    pub statistic: f64,
    /// (1 + #{T_perm ≥ T_obs}) / (1 + n_perm); always in (0, 1].
    pub p_value: f64,
    pub n_perm: u32,
    pub m: usize,
    pub n: usize,
    /// Covariates the row blocks were built from. Empty when the caller works
    /// on raw matrices; the recursive driver fills it in.
    pub columns_used: Vec<String>,
}

/// Mean within- and between-sample pairwise Euclidean distances
/// (mu_ff, mu_gg, mu_fg).
pub fn mean_distances(x: &Matrix, y: &Matrix) -> Result<(f64, f64, f64)> {
    check_shapes(x, y)?;
    let (m, n) = (x.n_rows(), y.n_rows());
    let mut ff = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            ff += euclidean(x.row(i), x.row(j));
        }
    }
    let mut gg = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            gg += euclidean(y.row(i), y.row(j));
        }
    }
    let mut fg = 0.0;
    for i in 0..m {
        for j in 0..n {
            fg += euclidean(x.row(i), y.row(j));
        }
    }
    Ok((ff / binom2(m), gg / binom2(n), fg / (m as f64 * n as f64)))
}

/// Squared gap between the two bivariate mean-distance summaries.
pub fn bg_statistic(mu_ff: f64, mu_gg: f64, mu_fg: f64) -> f64 {
    let a = mu_ff - mu_fg;
    let b = mu_gg - mu_fg;
    a * a + b * b
}

/// Run the test: observed statistic plus a seeded permutation p-value.
///
/// Permutations re-split the pooled m+n rows into sizes (m, n) uniformly at
/// random, each from its own stream derived from `(seed, permutation index)`,
/// so the p-value does not depend on thread count.
pub fn bg_test(x: &Matrix, y: &Matrix, n_perm: u32, seed: u64) -> Result<BGResult> {
    check_shapes(x, y)?;
    if n_perm < 99 {
        return Err(Error::InvalidParam(format!(
            "n_perm must be at least 99, got {n_perm}"
        )));
    }
    let (m, n) = (x.n_rows(), y.n_rows());
    let n_tot = m + n;

    // Pooled distances, computed once. Row sums let each permutation recover
    // all three block sums from just the pairs inside its smaller side.
    let mut d = vec![0.0; n_tot * n_tot];
    for i in 0..n_tot {
        for j in i + 1..n_tot {
            let a = if i < m { x.row(i) } else { y.row(i - m) };
            let b = if j < m { x.row(j) } else { y.row(j - m) };
            let v = euclidean(a, b);
            d[i * n_tot + j] = v;
            d[j * n_tot + i] = v;
        }
    }
    let rowsums: Vec<f64> = (0..n_tot)
        .map(|i| d[i * n_tot..(i + 1) * n_tot].iter().sum())
        .collect();
    let s_all = rowsums.iter().sum::<f64>() / 2.0;

    let identity: Vec<u32> = (0..n_tot as u32).collect();
    let (mu_ff, mu_gg, mu_fg) =
        split_means(&d, &rowsums, s_all, n_tot, &identity[..m], &identity[m..]);
    let t_obs = bg_statistic(mu_ff, mu_gg, mu_fg);

    let exceed = (0..n_perm)
        .into_par_iter()
        .filter(|&p| {
            let mut rng = stream(seed, tags::PERMUTATION, u64::from(p));
            let mut pool: Vec<u32> = (0..n_tot as u32).collect();
            for i in 0..m {
                let j = rng.gen_range(i..n_tot);
                pool.swap(i, j);
            }
            let (xs, ys) = pool.split_at(m);
            let (ff, gg, fg) = split_means(&d, &rowsums, s_all, n_tot, xs, ys);
            bg_statistic(ff, gg, fg) >= t_obs
        })
        .count();

    Ok(BGResult {
        mu_ff,
        mu_gg,
        mu_fg,
        statistic: t_obs,
        p_value: (1 + exceed) as f64 / f64::from(1 + n_perm),
        n_perm,
        m,
        n,
        columns_used: Vec::new(),
    })
}

fn check_shapes(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.n_rows() < 2 || y.n_rows() < 2 {
        return Err(Error::InsufficientSample {
            m: x.n_rows(),
            n: y.n_rows(),
        });
    }
    if x.n_cols() != y.n_cols() {
        return Err(Error::InvalidParam(format!(
            "samples have {} and {} columns; they must match",
            x.n_cols(),
            y.n_cols()
        )));
    }
    if x.n_cols() == 0 {
        return Err(Error::InvalidParam(
            "samples need at least one column".into(),
        ));
    }
    Ok(())
}

fn binom2(k: usize) -> f64 {
    (k * (k - 1) / 2) as f64
}

/// Mean distances for one split of the pooled rows. Pair sums are taken over
/// the smaller side only; the cross and other-side sums follow from the row
/// sums and the grand total.
fn split_means(
    d: &[f64],
    rowsums: &[f64],
    s_all: f64,
    n_tot: usize,
    xs: &[u32],
    ys: &[u32],
) -> (f64, f64, f64) {
    let (small, small_is_x) = if xs.len() <= ys.len() {
        (xs, true)
    } else {
        (ys, false)
    };
    let mut within = 0.0;
    for (a, &ia) in small.iter().enumerate() {
        let row = &d[ia as usize * n_tot..(ia as usize + 1) * n_tot];
        for &ib in &small[a + 1..] {
            within += row[ib as usize];
        }
    }
    let side_rows: f64 = small.iter().map(|&i| rowsums[i as usize]).sum();
    let cross = (side_rows - 2.0 * within).max(0.0);
    let other = (s_all - within - cross).max(0.0);
    let (sum_xx, sum_yy) = if small_is_x {
        (within, other)
    } else {
        (other, within)
    };
    let (m, n) = (xs.len(), ys.len());
    (
        sum_xx / binom2(m),
        sum_yy / binom2(n),
        cross / (m as f64 * n as f64),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, shift: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal) + shift)
            .collect();
        Matrix::from_rows(rows, cols, data)
    }

    #[test]
    fn hand_example_means() {
        let x = Matrix::from_rows(2, 1, vec![0.0, 2.0]);
        let y = Matrix::from_rows(2, 1, vec![1.0, 3.0]);
        let (ff, gg, fg) = mean_distances(&x, &y).unwrap();
        assert_eq!((ff, gg, fg), (2.0, 2.0, 1.5));
    }

    #[test]
    fn hand_example_statistic() {
        assert_eq!(bg_statistic(2.0, 2.0, 1.5), 0.5);
    }

    #[test]
    fn duplicated_sample_has_equal_within_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, 7, 3, 0.0);
        let (ff, gg, _) = mean_distances(&x, &x).unwrap();
        assert_eq!(ff, gg);
    }

    #[test]
    fn identical_points_give_zeros_and_p_one() {
        let x = Matrix::from_rows(3, 2, vec![1.5; 6]);
        let y = Matrix::from_rows(4, 2, vec![1.5; 8]);
        assert_eq!(mean_distances(&x, &y).unwrap(), (0.0, 0.0, 0.0));
        let r = bg_test(&x, &y, 99, 5).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn statistic_swap_symmetry_and_null_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a: f64 = rng.gen_range(0.0..5.0);
            let b: f64 = rng.gen_range(0.0..5.0);
            let c: f64 = rng.gen_range(0.0..5.0);
            assert_eq!(bg_statistic(a, b, c), bg_statistic(b, a, c));
        }
        assert_eq!(bg_statistic(1.7, 1.7, 1.7), 0.0);
    }

    #[test]
    fn too_small_sample_is_an_error() {
        let x = Matrix::from_rows(1, 2, vec![0.0, 0.0]);
        let y = Matrix::from_rows(3, 2, vec![0.0; 6]);
        match mean_distances(&x, &y) {
            Err(Error::InsufficientSample { m: 1, n: 3 }) => {}
            other => panic!("expected insufficient-sample error, got {other:?}"),
        }
        match bg_test(&x, &y, 99, 0) {
            Err(Error::InsufficientSample { .. }) => {}
            other => panic!("expected insufficient-sample error, got {other:?}"),
        }
    }

    #[test]
    fn bad_params_are_errors() {
        let x = Matrix::from_rows(2, 2, vec![0.0; 4]);
        let y3 = Matrix::from_rows(2, 3, vec![0.0; 6]);
        assert!(matches!(
            bg_test(&x, &y3, 99, 0),
            Err(Error::InvalidParam(_))
        ));
        let y = Matrix::from_rows(2, 2, vec![0.0; 4]);
        assert!(matches!(
            bg_test(&x, &y, 98, 0),
            Err(Error::InvalidParam(_))
        ));
        let e0 = Matrix::from_rows(2, 0, vec![]);
        assert!(matches!(
            mean_distances(&e0, &e0),
            Err(Error::InvalidParam(_))
        ));
    }

    #[test]
    fn cached_split_matches_direct_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for rep in 0..25 {
            let m = rng.gen_range(2..=15);
            let n = rng.gen_range(2..=15);
            let q = rng.gen_range(1..=4);
            let x = randn(&mut rng, m, q, 0.0);
            let y = randn(&mut rng, n, q, 0.3);
            let (ff, gg, fg) = mean_distances(&x, &y).unwrap();
            let r = bg_test(&x, &y, 99, rep).unwrap();
            assert!((r.mu_ff - ff).abs() <= 1e-12, "ff {} vs {}", r.mu_ff, ff);
            assert!((r.mu_gg - gg).abs() <= 1e-12, "gg {} vs {}", r.mu_gg, gg);
            assert!((r.mu_fg - fg).abs() <= 1e-12, "fg {} vs {}", r.mu_fg, fg);
            assert_eq!(r.statistic, bg_statistic(r.mu_ff, r.mu_gg, r.mu_fg));
        }
    }

    #[test]
    fn statistic_invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, 9, 3, 0.0);
        let y = randn(&mut rng, 14, 3, 1.0);
        let a = bg_test(&x, &y, 99, 1).unwrap();
        let b = bg_test(&y, &x, 99, 1).unwrap();
        assert!((a.statistic - b.statistic).abs() <= 1e-12);
        assert!((a.mu_ff - b.mu_gg).abs() <= 1e-12);
        assert!((a.mu_gg - b.mu_ff).abs() <= 1e-12);
    }

    #[test]
    fn statistic_invariant_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let q = 3;
        let x = randn(&mut rng, 10, q, 0.0);
        let y = randn(&mut rng, 12, q, 0.7);

        // Random orthogonal matrix via Gram–Schmidt on a Gaussian draw.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < q {
            let mut v: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
            for u in &basis {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for vi in &mut v {
                    *vi /= norm;
                }
                basis.push(v);
            }
        }
        let rotate = |mat: &Matrix| {
            let mut out = Matrix::zeros(mat.n_rows(), q);
            for i in 0..mat.n_rows() {
                for (j, u) in basis.iter().enumerate() {
                    let dot: f64 = mat.row(i).iter().zip(u).map(|(a, b)| a * b).sum();
                    out.set(i, j, dot);
                }
            }
            out
        };

        let plain = bg_test(&x, &y, 99, 2).unwrap();
        let turned = bg_test(&rotate(&x), &rotate(&y), 99, 2).unwrap();
        assert!(
            (plain.statistic - turned.statistic).abs() <= 1e-9,
            "{} vs {}",
            plain.statistic,
            turned.statistic
        );
    }

    #[test]
    fn p_value_is_identical_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = randn(&mut rng, 20, 4, 0.0);
        let y = randn(&mut rng, 25, 4, 0.4);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| bg_test(&x, &y, 199, 77).unwrap())
        };
        let (a, b, c) = (run(1), run(2), run(8));
        assert_eq!(a.p_value, b.p_value);
        assert_eq!(a.p_value, c.p_value);
        assert_eq!(a.statistic, b.statistic);
    }

    #[test]
    fn null_rejection_rate_is_calibrated() {
        // Both samples from the same 5-D standard normal; the test should
        // reject at alpha = 0.05 about 5% of the time.
        let mut rejected = 0;
        for rep in 0..500u64 {
            let mut rng = stream(0xCA11B, tags::GENERATE, rep);
            let x = randn(&mut rng, 200, 5, 0.0);
            let y = randn(&mut rng, 200, 5, 0.0);
            let r = bg_test(&x, &y, 999, rep).unwrap();
            if r.p_value < 0.05 {
                rejected += 1;
            }
        }
        let rate = rejected as f64 / 500.0;
        assert!(
            (0.02..=0.09).contains(&rate),
            "null rejection rate {rate} outside [0.02, 0.09]"
        );
    }

    #[test]
    fn unit_shift_is_detected() {
        let mut rejected = 0;
        for rep in 0..50u64 {
            let mut rng = stream(0x5F1F7, tags::GENERATE, rep);
            let x = randn(&mut rng, 100, 5, 0.0);
            let y = randn(&mut rng, 100, 5, 1.0);
            let r = bg_test(&x, &y, 999, rep).unwrap();
            if r.p_value < 0.05 {
                rejected += 1;
            }
        }
        assert!(rejected >= 45, "only {rejected}/50 shifted pairs rejected");
    }

    #[test]
    fn duplicated_rows_rarely_reject() {
        let mut high = 0;
        for rep in 0..100u64 {
            let mut rng = stream(0xD0B1E, tags::GENERATE, rep);
            let x = randn(&mut rng, 40, 3, 0.0);
            let r = bg_test(&x, &x, 199, rep).unwrap();
            if r.p_value > 0.05 {
                high += 1;
            }
        }
        assert!(high >= 95, "p > 0.05 in only {high}/100 duplicated runs");
    }

    #[test]
    fn p_values_are_near_uniform_under_the_null() {
        let mut ps = Vec::with_capacity(500);
        for rep in 0..500u64 {
            let mut rng = stream(0x0F1CE, tags::GENERATE, rep);
            let x = randn(&mut rng, 30, 3, 0.0);
            let y = randn(&mut rng, 30, 3, 0.0);
            ps.push(bg_test(&x, &y, 199, rep).unwrap().p_value);
        }
        ps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = ps.len() as f64;
        let mut ks: f64 = 0.0;
        for (i, p) in ps.iter().enumerate() {
            let hi = (i + 1) as f64 / n - p;
            let lo = p - i as f64 / n;
            ks = ks.max(hi.max(lo));
        }
        assert!(ks < 0.1, "KS distance from uniform = {ks}");
    }
}
