//! Rank statistics for before/after perplexity comparisons: Wilcoxon
//! signed-rank, Cliff's delta and Spearman's rho.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::intervention::ErasureResult;

/// Largest sample size for which the Wilcoxon p-value is computed exactly.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

impl PairedSample {
    pub fn new(before: Vec<f64>, after: Vec<f64>) -> Result<Self> {
        if before.len() != after.len() {
            return Err(Error::LengthMismatch(before.len(), after.len()));
        }
        if before.is_empty() {
            return Err(Error::EmptyInput);
        }
        check_finite(&before)?;
        check_finite(&after)?;
        Ok(PairedSample { before, after })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    /// Wilcoxon only: the negative-rank sum, so either convention can be
    /// reported (the min-convention statistic is the smaller of the two).
    pub statistic_alt: Option<f64>,
    pub p_value: f64,
    pub effect_size: Option<f64>,
    /// Observations that entered the test.
    pub n: usize,
    pub method_note: String,
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput)
    }
}

/// 1-based average ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Sizes of tie groups among `x`.
fn tie_sizes(x: &[f64]) -> Vec<usize> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let j = s[i..].iter().take_while(|&&v| v == s[i]).count();
        out.push(j);
        i += j;
    }
    out
}

/// Nonzero differences `after - before` with their doubled average ranks
/// (integers, so the exact null distribution can be counted without
/// rounding).
fn signed_ranks(s: &PairedSample) -> (Vec<f64>, Vec<u64>) {
    let d: Vec<f64> = s
        .before
        .iter()
        .zip(&s.after)
        .map(|(b, a)| a - b)
        .filter(|&d| d != 0.0)
        .collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let r2 = average_ranks(&abs).iter().map(|r| (2.0 * r) as u64).collect();
    (d, r2)
}

/// Number of sign assignments giving each doubled positive-rank sum.
fn null_counts(r2: &[u64]) -> Vec<u64> {
    let total: u64 = r2.iter().sum();
    let mut c = vec![0u64; total as usize + 1];
    c[0] = 1;
    let mut hi = 0usize;
    for &r in r2 {
        let r = r as usize;
        for s in (0..=hi).rev() {
            if c[s] != 0 {
                c[s + r] += c[s];
            }
        }
        hi += r;
    }
    c
}

/// Exact two-sided p: the share of sign assignments whose rank sum lies at
/// least as far from the null mean as the observed one.
fn exact_p(r2: &[u64], w2: u64) -> f64 {
    let total: u64 = r2.iter().sum();
    // Distances are compared doubled again to stay in integers.
    let dev = (2 * w2).abs_diff(total);
    let counts = null_counts(r2);
    let hits: u64 = counts
        .iter()
        .enumerate()
        .filter(|&(s, _)| (2 * s as u64).abs_diff(total) >= dev)
        .map(|(_, &c)| c)
        .sum();
    hits as f64 / 2f64.powi(r2.len() as i32)
}

/// Normal approximation with tie and continuity corrections.
fn approx_p(n: usize, w: f64, abs_d: &[f64]) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let ties: f64 = tie_sizes(abs_d).iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.sf(z)).min(1.0)
}

fn wilcoxon_with(s: &PairedSample, force_approx: bool) -> Result<TestResult> {
    let (d, r2) = signed_ranks(s);
    if d.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = d.len();
    let w2: u64 = d.iter().zip(&r2).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total2: u64 = r2.iter().sum();
    let w_plus = w2 as f64 / 2.0;
    let w_minus = (total2 - w2) as f64 / 2.0;
    let (p, note) = if n <= EXACT_MAX_N && !force_approx {
        (exact_p(&r2, w2), format!("exact over 2^{n} sign assignments"))
    } else {
        let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        (
            approx_p(n, w_plus, &abs),
            "normal approximation, tie and continuity corrected".to_string(),
        )
    };
    Ok(TestResult {
        statistic: w_plus,
        statistic_alt: Some(w_minus),
        p_value: p.clamp(0.0, 1.0),
        effect_size: None,
        n,
        method_note: note,
    })
}

/// Two-sided Wilcoxon signed-rank test on `after - before`, zero differences
/// dropped. The statistic is the positive-rank sum.
pub fn wilcoxon_signed_rank(s: &PairedSample) -> Result<TestResult> {
    wilcoxon_with(s, false)
}

/// Same test with the normal approximation at any n.
pub fn wilcoxon_signed_rank_approx(s: &PairedSample) -> Result<TestResult> {
    wilcoxon_with(s, true)
}

/// Cliff's delta between two groups: the share of pairs where x wins minus
/// the share where y wins. O((m+n) log n).
pub fn cliffs_delta(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_finite(x)?;
    check_finite(y)?;
    let mut ys = y.to_vec();
    ys.sort_by(f64::total_cmp);
    let (mut gt, mut lt) = (0u64, 0u64);
    for &v in x {
        gt += ys.partition_point(|&u| u < v) as u64;
        lt += (ys.len() - ys.partition_point(|&u| u <= v)) as u64;
    }
    Ok((gt as f64 - lt as f64) / (x.len() as f64 * y.len() as f64))
}

/// Paired dominance: the share of pairs where `after` exceeds `before` minus
/// the share where it falls short.
pub fn cliffs_delta_paired(s: &PairedSample) -> f64 {
    let (mut gt, mut lt) = (0i64, 0i64);
    for (b, a) in s.before.iter().zip(&s.after) {
        if a > b {
            gt += 1;
        } else if a < b {
            lt += 1;
        }
    }
    (gt - lt) as f64 / s.before.len() as f64
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman's rho with a two-tailed p from Student's t on n - 2 degrees of
/// freedom. Without ties rho uses the sum of squared rank differences;
/// with ties it is the Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::TooFewObservations { needed: 3, got: n });
    }
    check_finite(x)?;
    check_finite(y)?;
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let constant = |r: &[f64]| r.iter().all(|&v| v == r[0]);
    if constant(&rx) || constant(&ry) {
        return Err(Error::ConstantInput);
    }
    let tie_free = tie_sizes(x).len() == n && tie_sizes(y).len() == n;
    let rho = if tie_free {
        let d2: u64 = rx
            .iter()
            .zip(&ry)
            .map(|(a, b)| {
                let d = (*a as i64 - *b as i64).unsigned_abs();
                d * d
            })
            .sum();
        let nn = n as u64;
        1.0 - (6 * d2) as f64 / (nn * (nn * nn - 1)) as f64
    } else {
        pearson(&rx, &ry).clamp(-1.0, 1.0)
    };
    let (p, note) = if rho.abs() == 1.0 {
        let fact: f64 = (1..=n).map(|k| k as f64).product();
        ((2.0 / fact).min(1.0), "perfect rank agreement, permutation bound 2/n!".to_string())
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        ((2.0 * dist.sf(t.abs())).min(1.0), format!("t approximation, {} df", n - 2))
    };
    Ok(TestResult {
        statistic: rho,
        statistic_alt: None,
        p_value: p,
        effect_size: None,
        n,
        method_note: note,
    })
}

/// Tests over a completed erasure run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rq2Stats {
    /// Before vs after target perplexity. `effect_size` holds Cliff's delta
    /// of the after group over the before group.
    pub wilcoxon: TestResult,
    pub cliffs_delta_paired: f64,
    /// Set size against target ratio.
    pub size_vs_ratio_target: Option<TestResult>,
    /// Inner intersection against control ratio.
    pub inner_vs_ratio_ctrl: Option<TestResult>,
}

/// Skipped relations (empty sets) are left out. Correlations that cannot be
/// computed (fewer than 3 points, constant input) come back as `None`.
pub fn rq2_stats(results: &[ErasureResult], inner: Option<&BTreeMap<String, f64>>) -> Result<Rq2Stats> {
    let used: Vec<&ErasureResult> = results.iter().filter(|r| !r.skipped).collect();
    let sample = PairedSample::new(
        used.iter().map(|r| r.ppl_target_before).collect(),
        used.iter().map(|r| r.ppl_target_after).collect(),
    )?;
    let mut wilcoxon = wilcoxon_signed_rank(&sample)?;
    wilcoxon.effect_size = Some(cliffs_delta(&sample.after, &sample.before)?);
    let soft = |r: Result<TestResult>| match r {
        Ok(t) => Ok(Some(t)),
        Err(Error::ConstantInput | Error::TooFewObservations { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    let size_vs_ratio_target = soft(spearman(
        &used.iter().map(|r| r.n_suppressed as f64).collect::<Vec<_>>(),
        &used.iter().map(|r| r.ratio_target).collect::<Vec<_>>(),
    ))?;
    let inner_vs_ratio_ctrl = match inner {
        None => None,
        Some(m) => {
            let pairs: Vec<(f64, f64)> = used
                .iter()
                .filter_map(|r| m.get(&r.relation_id).map(|&i| (i, r.ratio_ctrl)))
                .collect();
            soft(spearman(
                &pairs.iter().map(|p| p.0).collect::<Vec<_>>(),
                &pairs.iter().map(|p| p.1).collect::<Vec<_>>(),
            ))?
        }
    };
    Ok(Rq2Stats {
        cliffs_delta_paired: cliffs_delta_paired(&sample),
        wilcoxon,
        size_vs_ratio_target,
        inner_vs_ratio_ctrl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn paired(d: &[f64]) -> PairedSample {
        PairedSample::new(vec![0.0; d.len()], d.to_vec()).unwrap()
    }

    /// Two-sided p by walking every sign assignment.
    fn enumerate_p(d: &[f64]) -> f64 {
        let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
        let r = average_ranks(&nz.iter().map(|v| v.abs()).collect::<Vec<_>>());
        let n = nz.len();
        let total: f64 = r.iter().sum();
        let w: f64 = nz.iter().zip(&r).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
        let dev = (w - total / 2.0).abs();
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum();
            if (s - total / 2.0).abs() >= dev {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    }

    fn cliffs_oracle(x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0i64;
        for a in x {
            for b in y {
                s += (a > b) as i64 - (a < b) as i64;
            }
        }
        s as f64 / (x.len() * y.len()) as f64
    }

    #[test]
    fn five_positive_differences() {
        let t = wilcoxon_signed_rank(&paired(&[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        assert_eq!(t.statistic, 15.0);
        assert_eq!(t.statistic_alt, Some(0.0));
        assert_eq!(t.p_value, 0.0625);
    }

    #[test]
    fn all_zero_differences_rejected() {
        let s = PairedSample::new(vec![1.0, 2.0], vec![1.0, 2.0]).unwrap();
        assert!(matches!(wilcoxon_signed_rank(&s), Err(Error::AllZeroDifferences)));
    }

    #[test]
    fn exact_matches_enumeration_up_to_twelve() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.random_range(1..=12);
            // Small integer grid so ties and zeros both show up.
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-4..=4) as f64).collect();
            if d.iter().all(|&v| v == 0.0) {
                continue;
            }
            let t = wilcoxon_signed_rank(&paired(&d)).unwrap();
            assert_eq!(t.p_value, enumerate_p(&d), "{d:?}");
        }
    }

    #[test]
    fn exact_and_approx_agree_at_twenty_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let d: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.5)).collect();
            let s = paired(&d);
            let e = wilcoxon_signed_rank(&s).unwrap();
            let a = wilcoxon_signed_rank_approx(&s).unwrap();
            assert!((e.p_value - a.p_value).abs() <= 0.01, "{} vs {}", e.p_value, a.p_value);
        }
    }

    #[test]
    fn large_n_uses_approximation() {
        let d: Vec<f64> = (1..=40).map(|v| v as f64).collect();
        let t = wilcoxon_signed_rank(&paired(&d)).unwrap();
        assert!(t.method_note.starts_with("normal"));
        assert!(t.p_value < 1e-6);
    }

    #[test]
    fn cliffs_examples() {
        assert_eq!(cliffs_delta(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cliffs_delta(&[1.0, 5.0], &[1.0, 5.0]).unwrap(), 0.0);
        assert_eq!(cliffs_delta(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), -0.5);
        assert!(matches!(cliffs_delta(&[], &[1.0]), Err(Error::EmptyInput)));
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let t = spearman(&x, &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert_eq!(t.statistic, 0.6);
        let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        let t = spearman(&x, &sq).unwrap();
        assert_eq!(t.statistic, 1.0);
        assert_eq!(t.p_value, 2.0 / 24.0);
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap().statistic, -1.0);
        assert!(matches!(spearman(&x, &[1.0; 4]), Err(Error::ConstantInput)));
        assert!(matches!(spearman(&x, &[1.0; 3]), Err(Error::LengthMismatch(4, 3))));
    }

    #[test]
    fn spearman_with_ties_is_rank_pearson() {
        let x = [1.0, 2.0, 2.0, 3.0, 5.0];
        let y = [2.0, 1.0, 3.0, 3.0, 4.0];
        let t = spearman(&x, &y).unwrap();
        assert_eq!(t.statistic, pearson(&average_ranks(&x), &average_ranks(&y)));
    }

    #[test]
    fn spearman_p_matches_reference() {
        // scipy.stats.spearmanr on this input.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 1.0, 4.0, 3.0, 5.0];
        let t = spearman(&x, &y).unwrap();
        assert!((t.statistic - 0.8).abs() < 1e-15);
        assert!((t.p_value - 0.10408803866182788).abs() < 1e-12, "{}", t.p_value);
    }

    fn sample(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((-20i32..20).prop_map(|v| v as f64 / 2.0), n)
    }

    proptest! {
        #[test]
        fn cliffs_matches_pair_count(x in sample(1..30), y in sample(1..30)) {
            let d = cliffs_delta(&x, &y).unwrap();
            prop_assert_eq!(d, cliffs_oracle(&x, &y));
            prop_assert_eq!(d, -cliffs_delta(&y, &x).unwrap());
            prop_assert!(d.abs() <= 1.0);
        }

        #[test]
        fn spearman_closed_form_without_ties(perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle()) {
            let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
            let y: Vec<f64> = perm.iter().map(|&v| v as f64).collect();
            let d2: usize = perm.iter().enumerate().map(|(i, &p)| (i.abs_diff(p)).pow(2)).sum();
            let oracle = 1.0 - (6 * d2) as f64 / (12.0 * 143.0);
            prop_assert_eq!(spearman(&x, &y).unwrap().statistic, oracle);
        }

        #[test]
        fn rank_statistics_ignore_increasing_transforms(x in sample(3..20), y in sample(3..20)) {
            let n = x.len().min(y.len());
            let (x, y) = (&x[..n], &y[..n]);
            let f = |v: &[f64]| v.iter().map(|a| (a / 3.0).exp() + 7.0).collect::<Vec<_>>();
            prop_assert_eq!(cliffs_delta(x, y).unwrap(), cliffs_delta(&f(x), &f(y)).unwrap());
            match (spearman(x, y), spearman(&f(x), &f(y))) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
            // Signed-rank works on differences, so only increasing affine
            // maps keep it unchanged.
            let g = |v: &[f64]| v.iter().map(|a| 2.0 * a + 7.0).collect::<Vec<_>>();
            let s = PairedSample::new(x.to_vec(), y.to_vec()).unwrap();
            let t = PairedSample::new(g(x), g(y)).unwrap();
            match (wilcoxon_signed_rank(&s), wilcoxon_signed_rank(&t)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.p_value, b.p_value),
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
        }
    }
}
