//! Rank correlations, resampling inference, group tests, agreement and
//! reliability coefficients.

use crate::error::{Error, Result};
use crate::scalar::{mean, quantile_sorted, Scalar};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use std::collections::{BTreeMap, BTreeSet};

pub fn check_finite<T: Scalar>(xs: &[T], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NanInput(what))
    }
}

fn check_pair<T: Scalar>(x: &[T], y: &[T], needed: usize, what: &'static str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < needed {
        return Err(Error::TooShort {
            what,
            needed,
            have: x.len(),
        });
    }
    check_finite(x, what)?;
    check_finite(y, what)
}

/// Average ranks starting at 1; tied values share the mean of their ranks.
pub fn ranks<T: Scalar>(xs: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite input"));
    let mut out = vec![T::zero(); xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = T::from_usize_lossy(i + j + 2) * T::half();
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Sizes of tie groups among the values.
fn tie_sizes<T: Scalar>(xs: &[T]) -> Vec<usize> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite input"));
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        sizes.push(j - i + 1);
        i = j + 1;
    }
    sizes
}

pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y, 2, "pearson")?;
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return Err(Error::ConstantInput("correlation"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt()))
        .max(-T::one())
        .min(T::one()))
}

pub fn spearman<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y, 2, "spearman")?;
    pearson(&ranks(x), &ranks(y))
}

/// Percentile bootstrap interval bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapInterval {
    pub lo: f64,
    pub hi: f64,
    pub undefined: usize,
    pub n_boot: usize,
}

/// Index vectors for `n_boot` resamples of `n` items, drawn from one seeded
/// stream so the result does not depend on thread scheduling.
pub fn bootstrap_indices(n: usize, n_boot: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_boot)
        .map(|_| (0..n).map(|_| rng.random_range(0..n)).collect())
        .collect()
}

/// 2.5/97.5 percentiles of `statistic` over item resamples. The statistic
/// receives resampled item indices and returns `None` where undefined.
pub fn percentile_bootstrap<F>(
    n: usize,
    statistic: F,
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapInterval>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    percentile_bootstrap_level(n, statistic, n_boot, seed, 0.95)
}

pub fn percentile_bootstrap_level<F>(
    n: usize,
    statistic: F,
    n_boot: usize,
    seed: u64,
    level: f64,
) -> Result<BootstrapInterval>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if n < 10 {
        return Err(Error::TooShort {
            what: "bootstrap",
            needed: 10,
            have: n,
        });
    }
    if n_boot == 0 {
        return Err(Error::InvalidArgument("n_boot must be at least 1".into()));
    }
    let draws = bootstrap_indices(n, n_boot, seed);
    let stats: Vec<Option<f64>> = draws.par_iter().map(|idx| statistic(idx)).collect();
    let mut defined: Vec<f64> = stats
        .into_iter()
        .flatten()
        .filter(|v| v.is_finite())
        .collect();
    let undefined = n_boot - defined.len();
    if undefined * 5 > n_boot || defined.is_empty() {
        return Err(Error::UnstableResampling {
            undefined,
            total: n_boot,
        });
    }
    defined.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapInterval {
        lo: quantile_sorted(&defined, alpha),
        hi: quantile_sorted(&defined, 1.0 - alpha),
        undefined,
        n_boot,
    })
}

/// Resamples paired vectors and bootstraps a two-sample statistic.
pub fn bootstrap_paired<F>(
    x: &[f64],
    y: &[f64],
    statistic: F,
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapInterval>
where
    F: Fn(&[f64], &[f64]) -> Option<f64> + Sync,
{
    check_pair(x, y, 10, "bootstrap")?;
    percentile_bootstrap(
        x.len(),
        |idx| {
            let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            statistic(&xs, &ys)
        },
        n_boot,
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PermutationResult {
    pub observed: f64,
    /// 95th percentile of |statistic| under the null.
    pub null_q95: f64,
    /// Fraction of null draws at or below the observed value.
    pub tail_quantile: f64,
    /// Two-sided p with the +1 correction.
    pub p: f64,
    pub n_perm: usize,
}

/// Permutation null for `statistic(x, y)`, shuffling `y`.
pub fn permutation_null<F>(
    x: &[f64],
    y: &[f64],
    statistic: F,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationResult>
where
    F: Fn(&[f64], &[f64]) -> Option<f64> + Sync,
{
    permutation_null_within(x, y, None, statistic, n_perm, seed)
}

/// As [`permutation_null`], but shuffles `y` only within strata when given.
pub fn permutation_null_within<F>(
    x: &[f64],
    y: &[f64],
    strata: Option<&[usize]>,
    statistic: F,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationResult>
where
    F: Fn(&[f64], &[f64]) -> Option<f64> + Sync,
{
    check_pair(x, y, 10, "permutation")?;
    if n_perm == 0 {
        return Err(Error::InvalidArgument("n_perm must be at least 1".into()));
    }
    let observed = statistic(x, y).ok_or(Error::ConstantInput("observed statistic undefined"))?;
    let groups: Vec<Vec<usize>> = match strata {
        None => vec![(0..y.len()).collect()],
        Some(s) => {
            if s.len() != y.len() {
                return Err(Error::DimensionMismatch {
                    expected: y.len(),
                    found: s.len(),
                });
            }
            let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &g) in s.iter().enumerate() {
                by.entry(g).or_default().push(i);
            }
            by.into_values().collect()
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<f64>> = (0..n_perm)
        .map(|_| {
            let mut yp = y.to_vec();
            for g in &groups {
                let mut vals: Vec<f64> = g.iter().map(|&i| y[i]).collect();
                vals.shuffle(&mut rng);
                for (&i, v) in g.iter().zip(vals) {
                    yp[i] = v;
                }
            }
            yp
        })
        .collect();
    let null: Vec<f64> = perms
        .par_iter()
        .map(|yp| statistic(x, yp))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .filter(|v| v.is_finite())
        .collect();
    let undefined = n_perm - null.len();
    if undefined * 5 > n_perm || null.is_empty() {
        return Err(Error::UnstableResampling {
            undefined,
            total: n_perm,
        });
    }
    let exceed = null.iter().filter(|v| v.abs() >= observed.abs()).count();
    let below = null.iter().filter(|&&v| v <= observed).count();
    let mut abs: Vec<f64> = null.iter().map(|v| v.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(PermutationResult {
        observed,
        null_q95: quantile_sorted(&abs, 0.95),
        tail_quantile: below as f64 / null.len() as f64,
        p: (1 + exceed) as f64 / (null.len() + 1) as f64,
        n_perm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KruskalWallis {
    pub h: f64,
    pub df: usize,
    pub p: f64,
}

/// Kruskal–Wallis H with tie correction; empty groups are ignored.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis> {
    let groups: Vec<&Vec<f64>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if groups.len() < 2 {
        return Err(Error::TooShort {
            what: "kruskal-wallis groups",
            needed: 2,
            have: groups.len(),
        });
    }
    let all: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    check_finite(&all, "kruskal-wallis")?;
    let n = all.len() as f64;
    let ties: f64 = tie_sizes(&all)
        .iter()
        .map(|&t| (t as f64).powi(3) - t as f64)
        .sum();
    let correction = 1.0 - ties / (n.powi(3) - n);
    if correction <= 0.0 {
        return Err(Error::ConstantInput("kruskal-wallis"));
    }
    let r = ranks(&all);
    let mut offset = 0;
    let mut s = 0.0;
    for g in &groups {
        let rs: f64 = r[offset..offset + g.len()].iter().sum();
        s += rs * rs / g.len() as f64;
        offset += g.len();
    }
    let h = (12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / correction;
    let h = h.max(0.0);
    let df = groups.len() - 1;
    let p = ChiSquared::new(df as f64)
        .map(|c| c.sf(h))
        .unwrap_or(f64::NAN);
    Ok(KruskalWallis { h, df, p })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wilcoxon {
    /// min(W+, W−).
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub n: usize,
    pub z: f64,
    pub p: f64,
}

/// Signed-rank test on paired differences with a tie-corrected normal
/// approximation. Zero differences are dropped.
pub fn wilcoxon_signed_rank(differences: &[f64]) -> Result<Wilcoxon> {
    check_finite(differences, "wilcoxon")?;
    let d: Vec<f64> = differences.iter().copied().filter(|&x| x != 0.0).collect();
    if d.is_empty() {
        return Err(Error::ConstantInput("all differences zero"));
    }
    if d.len() < 6 {
        return Err(Error::TooShort {
            what: "wilcoxon nonzero differences",
            needed: 6,
            have: d.len(),
        });
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let r = ranks(&abs);
    let w_plus: f64 = d
        .iter()
        .zip(&r)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = d.len() as f64;
    let total = n * (n + 1.0) / 2.0;
    let w_minus = total - w_plus;
    let ties: f64 = tie_sizes(&abs)
        .iter()
        .map(|&t| (t as f64).powi(3) - t as f64)
        .sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    let w = w_plus.min(w_minus);
    let z = (w - total / 2.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * normal.cdf(-z.abs())).min(1.0);
    Ok(Wilcoxon {
        w,
        w_plus,
        w_minus,
        n: d.len(),
        z,
        p,
    })
}

/// Cohen's κ for two raters; `None` when expected agreement is 1.
pub fn cohens_kappa<L: Ord + Clone>(a: &[L], b: &[L]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::TooShort {
            what: "kappa",
            needed: 1,
            have: 0,
        });
    }
    let n = a.len() as f64;
    let cats: BTreeSet<&L> = a.iter().chain(b).collect();
    let mut ca: BTreeMap<&L, usize> = BTreeMap::new();
    let mut cb: BTreeMap<&L, usize> = BTreeMap::new();
    let mut agree = 0usize;
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        agree += (x == y) as usize;
    }
    let po = agree as f64 / n;
    let pe: f64 = cats
        .iter()
        .map(|c| {
            ca.get(c).copied().unwrap_or(0) as f64 * cb.get(c).copied().unwrap_or(0) as f64
                / (n * n)
        })
        .sum();
    if (1.0 - pe).abs() < 1e-15 {
        return Ok(None);
    }
    Ok(Some((po - pe) / (1.0 - pe)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Icc {
    /// Raw estimate; may be negative.
    pub icc: f64,
    /// Set when the raw estimate is ≤ 0.
    pub clipped: bool,
    pub ms_between: f64,
    pub ms_within: f64,
    pub mean_group_size: f64,
}

/// One-way random-effects ICC(1,1); unbalanced groups use the mean size.
pub fn icc_1_1(groups: &[Vec<f64>]) -> Result<Icc> {
    let groups: Vec<&Vec<f64>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if groups.len() < 2 {
        return Err(Error::TooShort {
            what: "icc groups",
            needed: 2,
            have: groups.len(),
        });
    }
    for g in &groups {
        check_finite(g, "icc")?;
    }
    let g = groups.len();
    let total: usize = groups.iter().map(|v| v.len()).sum();
    if total == g {
        return Err(Error::Degenerate("no within-group replication".into()));
    }
    let grand = groups.iter().flat_map(|v| v.iter()).sum::<f64>() / total as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for v in &groups {
        let m = mean(v);
        ssb += v.len() as f64 * (m - grand).powi(2);
        ssw += v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let msb = ssb / (g - 1) as f64;
    let msw = ssw / (total - g) as f64;
    let k = total as f64 / g as f64;
    let denom = msb + (k - 1.0) * msw;
    if denom <= 0.0 {
        return Err(Error::ConstantInput("icc"));
    }
    let icc = (msb - msw) / denom;
    Ok(Icc {
        icc,
        clipped: icc <= 0.0,
        ms_between: msb,
        ms_within: msw,
        mean_group_size: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn correlation_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman::<f64>(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert!((spearman(&x, &rev).unwrap() + 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        // hand value: x=[1,2,3], y=[1,3,2]: sxy=1, sxx=syy=2 -> 0.5
        assert!((pearson::<f64>(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::ConstantInput(_))
        ));
        assert!(matches!(
            spearman(&[1.0, f64::NAN], &[1.0, 2.0]),
            Err(Error::NanInput(_))
        ));
    }

    #[test]
    fn spearman_with_ties_matches_brute_force() {
        // rank oracle: rank = 1 + #{smaller} + (#{equal} - 1)/2
        let x = [1.0, 2.0, 2.0, 4.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        let brute = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|a| {
                    let less = v.iter().filter(|b| *b < a).count() as f64;
                    let eq = v.iter().filter(|b| *b == a).count() as f64;
                    1.0 + less + (eq - 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (brute(&x), brute(&y));
        let mx = rx.iter().sum::<f64>() / 4.0;
        let my = ry.iter().sum::<f64>() / 4.0;
        let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let den = (rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>()
            * ry.iter().map(|b| (b - my).powi(2)).sum::<f64>())
        .sqrt();
        assert!((spearman(&x, &y).unwrap() - num / den).abs() < 1e-15);
    }

    #[test]
    fn spearman_monotone_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..50).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let fx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let gy: Vec<f64> = y.iter().map(|v| v.powi(3) + 2.0).collect();
        assert_eq!(spearman(&x, &y).unwrap(), spearman(&fx, &gy).unwrap());
        let (rx, ry) = (ranks(&x), ranks(&y));
        assert!((spearman(&rx, &ry).unwrap() - pearson(&rx, &ry).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let data = vec![2.5; 20];
        let ci = percentile_bootstrap(
            20,
            |idx| Some(idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64),
            200,
            1,
        )
        .unwrap();
        assert_eq!((ci.lo, ci.hi), (2.5, 2.5));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..40).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let f = |a: &[f64], b: &[f64]| spearman(a, b).ok();
        let a = bootstrap_paired(&x, &y, f, 300, 9).unwrap();
        let b = bootstrap_paired(&x, &y, f, 300, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.lo < a.hi);
        assert!(percentile_bootstrap(5, |_| Some(0.0), 10, 0).is_err());
        assert!(matches!(
            percentile_bootstrap(20, |idx| (idx[0] % 2 == 0).then_some(1.0), 200, 0),
            Err(Error::UnstableResampling { .. })
        ));
    }

    #[test]
    fn permutation_extremes() {
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let r = permutation_null(&x, &x, |a, b| spearman(a, b).ok(), 199, 3).unwrap();
        assert_eq!(r.p, 1.0 / 200.0);
        assert!(r.tail_quantile >= 0.99);
        let r2 = permutation_null(&x, &x, |a, b| spearman(a, b).ok(), 199, 3).unwrap();
        assert_eq!(r, r2);
    }

    #[test]
    fn stratified_permutation_keeps_strata() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let strata: Vec<usize> = (0..20).map(|i| i / 10).collect();
        // y constant within strata: any within-stratum shuffle leaves it unchanged
        let y: Vec<f64> = strata.iter().map(|&s| s as f64).collect();
        let r = permutation_null_within(&x, &y, Some(&strata), |a, b| pearson(a, b).ok(), 50, 1)
            .unwrap();
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn kruskal_examples() {
        let same = vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]];
        assert!(kruskal_wallis(&same).unwrap().h.abs() < 1e-12);
        // hand: ranks A={1,2,3} B={4,5,6} C={7,8,9}; H = 12/90·(36+225+576)/3 − 30 = 7.2
        let g = vec![
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ];
        let kw = kruskal_wallis(&g).unwrap();
        assert!((kw.h - 7.2).abs() < 1e-12);
        assert_eq!(kw.df, 2);
        let five: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64, k as f64 + 0.5]).collect();
        assert_eq!(kruskal_wallis(&five).unwrap().df, 4);
        assert!(matches!(
            kruskal_wallis(&[vec![1.0], vec![1.0]]),
            Err(Error::ConstantInput(_))
        ));
    }

    #[test]
    fn wilcoxon_examples() {
        // differences with |d| ranks 1..8, negatives at ranks 2 and 5 -> W- = 7
        let d = [1.0, -2.0, 3.0, 4.0, -5.0, 6.0, 7.0, 8.0];
        let w = wilcoxon_signed_rank(&d).unwrap();
        assert_eq!(w.w_minus, 7.0);
        assert_eq!(w.w_plus, 29.0);
        assert_eq!(w.w, 7.0);
        let pos = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let w = wilcoxon_signed_rank(&pos).unwrap();
        assert_eq!(w.w, 0.0);
        assert!(w.p < 0.01);
        assert!(matches!(
            wilcoxon_signed_rank(&[0.0; 8]),
            Err(Error::ConstantInput(_))
        ));
    }

    #[test]
    fn kappa_examples() {
        let a = ["x", "y", "x", "z"];
        assert_eq!(cohens_kappa(&a, &a).unwrap(), Some(1.0));
        // 2×2 table [[20,5],[10,15]]: po=0.7, pe=0.5 -> 0.4
        let mut r1 = Vec::new();
        let mut r2 = Vec::new();
        for (p, q, n) in [
            ("y", "y", 20),
            ("y", "n", 5),
            ("n", "y", 10),
            ("n", "n", 15),
        ] {
            for _ in 0..n {
                r1.push(p);
                r2.push(q);
            }
        }
        let k = cohens_kappa(&r1, &r2).unwrap().unwrap();
        assert!((k - 0.4).abs() < 1e-12);
        assert_eq!(cohens_kappa(&r2, &r1).unwrap().unwrap(), k);
        assert_eq!(cohens_kappa(&["a", "a"], &["a", "a"]).unwrap(), None);
    }

    #[test]
    fn icc_examples() {
        let g = vec![
            vec![1.0, 1.0, 1.0],
            vec![2.0, 2.0, 2.0],
            vec![5.0, 5.0, 5.0],
        ];
        assert_eq!(icc_1_1(&g).unwrap().icc, 1.0);
        let g = vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]];
        let icc = icc_1_1(&g).unwrap();
        assert!(icc.icc <= 0.0 && icc.clipped);
        assert!(icc_1_1(&[vec![1.0], vec![2.0]]).is_err());
    }
}
