//! Summary statistics and rank tests used in evaluation reports.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

pub mod report;

pub use report::{aggregate_report, Report};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("empty input")]
    Empty,
    #[error("no nonzero pairs")]
    NoNonzeroPairs,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} observations, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("input is constant")]
    ConstantInput,
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("no admissible cutpoint")]
    NoAdmissibleCutpoint,
}

/// Largest paired sample that gets an exact signed-rank p-value.
pub const SIGNED_RANK_EXACT_MAX: usize = 25;
/// Largest combined sample that gets an exact rank-sum p-value.
pub const RANK_SUM_EXACT_MAX: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

fn check_finite(values: &[f64]) -> Result<(), StatsError> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(&v) => Err(StatsError::NonFinite(v)),
        None => Ok(()),
    }
}

/// Quantile with linear interpolation between order statistics
/// (position `(n - 1) * p`). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    check_finite(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(SummaryStats {
        n: values.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        median: quantile_sorted(&sorted, 0.5),
        q1: quantile_sorted(&sorted, 0.25),
        q3: quantile_sorted(&sorted, 0.75),
    })
}

/// 1-based ranks with ties averaged, plus the tie group sizes.
pub fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

fn tie_sum(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t * t * t - t) as f64).sum()
}

fn normal_two_sided(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * (1.0 - n.cdf(z.abs()))).clamp(0.0, 1.0)
}

/// Two-sided p from a discrete null given as counts over integer support
/// (doubled statistic), evaluated at `observed`.
fn exact_two_sided(counts: &[f64], observed: usize) -> f64 {
    let total: f64 = counts.iter().sum();
    let lower: f64 = counts[..=observed].iter().sum();
    let upper: f64 = counts[observed..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

/// How a rank test computes its p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    /// Exact up to the size cutoffs, normal approximation above.
    #[default]
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub exact: bool,
}

/// Wilcoxon signed-rank test on paired differences. The statistic is the sum
/// of ranks of positive differences.
pub fn wilcoxon_signed_rank(differences: &[f64]) -> Result<TestResult, StatsError> {
    wilcoxon_signed_rank_with(differences, Method::Auto)
}

pub fn wilcoxon_signed_rank_with(
    differences: &[f64],
    method: Method,
) -> Result<TestResult, StatsError> {
    check_finite(differences)?;
    let nz: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return Err(StatsError::NoNonzeroPairs);
    }
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = nz
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    let exact = match method {
        Method::Auto => n <= SIGNED_RANK_EXACT_MAX,
        Method::Exact => true,
        Method::Normal => false,
    };
    if exact {
        // Doubled ranks are integers even with ties.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let observed = (2.0 * w_plus).round() as usize;
        return Ok(TestResult {
            statistic: w_plus,
            p_value: exact_two_sided(&counts, observed),
            n,
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_sum(&ties) / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        normal_two_sided(z)
    };
    Ok(TestResult {
        statistic: w_plus,
        p_value: p,
        n,
        exact: false,
    })
}

/// Wilcoxon rank-sum test. The statistic is the Mann-Whitney U of `a`,
/// `R_a - n_a(n_a + 1)/2`.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    wilcoxon_rank_sum_with(a, b, Method::Auto)
}

pub fn wilcoxon_rank_sum_with(
    a: &[f64],
    b: &[f64],
    method: Method,
) -> Result<TestResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = average_ranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;

    let exact = match method {
        Method::Auto => n <= RANK_SUM_EXACT_MAX,
        Method::Exact => true,
        Method::Normal => false,
    };
    if exact {
        // counts[k][s]: subsets of size k with doubled rank sum s.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![vec![0.0f64; max + 1]; na + 1];
        counts[0][0] = 1.0;
        for &r in &doubled {
            for k in (1..=na).rev() {
                for s in (r..=max).rev() {
                    counts[k][s] += counts[k - 1][s - r];
                }
            }
        }
        let observed = (2.0 * ra).round() as usize;
        return Ok(TestResult {
            statistic: u,
            p_value: exact_two_sided(&counts[na], observed),
            n,
            exact: true,
        });
    }

    let (naf, nbf, nf) = (na as f64, nb as f64, n as f64);
    let mean = naf * nbf / 2.0;
    let var = naf * nbf / 12.0 * ((nf + 1.0) - tie_sum(&ties) / (nf * (nf - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
        normal_two_sided(z)
    };
    Ok(TestResult {
        statistic: u,
        p_value: p,
        n,
        exact: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Spearman correlation with a t-approximation p-value.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Correlation, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew {
            need: 3,
            got: x.len(),
        });
    }
    check_finite(x)?;
    check_finite(y)?;
    let (rx, _) = average_ranks(x);
    let (ry, _) = average_ranks(y);
    let rho = pearson(&rx, &ry).ok_or(StatsError::ConstantInput)?;
    let df = (x.len() - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Correlation {
        rho,
        p_value,
        n: x.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutpointStat {
    /// Observations with area below the cutpoint form the low group.
    pub cutpoint: f64,
    pub n_low: usize,
    pub n_high: usize,
    /// Standardized rank-sum statistic of the outcome in the low group.
    pub z: f64,
    pub p_unadjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    /// Smallest area of the high group at the best split.
    pub threshold: f64,
    pub max_abs_z: f64,
    /// Permutation p-value of `max_abs_z` over all admissible cutpoints.
    pub p_adjusted: f64,
    pub significant: bool,
    pub candidates: Vec<CutpointStat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxstatOptions {
    /// Admissible fraction of observations in the low group.
    pub min_prop: f64,
    pub max_prop: f64,
    pub permutations: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for MaxstatOptions {
    fn default() -> Self {
        MaxstatOptions {
            min_prop: 0.1,
            max_prop: 0.9,
            permutations: 999,
            seed: 0x6d61_7873,
            alpha: 0.05,
        }
    }
}

pub const MAXSTAT_MIN_N: usize = 20;

pub fn maxstat_threshold(area: &[f64], outcome: &[f64]) -> Result<ThresholdResult, StatsError> {
    maxstat_threshold_with(area, outcome, &MaxstatOptions::default())
}

/// Cutpoint search with maximally selected rank statistics.
///
/// Each distinct area `c` splits the data into `area < c` and `area >= c`; a
/// split is admissible when the low group holds between `min_prop` and
/// `max_prop` of the observations. The chosen cutpoint maximizes |Z| of the
/// outcome rank sum in the low group, ties going to the smaller cutpoint.
/// `p_adjusted` comes from recomputing max |Z| under random permutations of
/// the outcome ranks.
pub fn maxstat_threshold_with(
    area: &[f64],
    outcome: &[f64],
    opts: &MaxstatOptions,
) -> Result<ThresholdResult, StatsError> {
    if area.len() != outcome.len() {
        return Err(StatsError::LengthMismatch(area.len(), outcome.len()));
    }
    if area.len() < MAXSTAT_MIN_N {
        return Err(StatsError::TooFew {
            need: MAXSTAT_MIN_N,
            got: area.len(),
        });
    }
    check_finite(area)?;
    check_finite(outcome)?;
    let n = area.len();
    let nf = n as f64;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| area[a].total_cmp(&area[b]));
    let (ranks, _) = average_ranks(outcome);
    let mean_rank = (nf + 1.0) / 2.0;
    let ss: f64 = ranks.iter().map(|r| (r - mean_rank).powi(2)).sum();
    if ss == 0.0 {
        return Err(StatsError::ConstantInput);
    }

    // (cutpoint, size of low group) for each admissible split.
    let mut splits = Vec::new();
    for i in 1..n {
        let c = area[order[i]];
        if c == area[order[i - 1]] {
            continue;
        }
        let prop = i as f64 / nf;
        if prop >= opts.min_prop && prop <= opts.max_prop {
            splits.push((c, i));
        }
    }
    if splits.is_empty() {
        return Err(StatsError::NoAdmissibleCutpoint);
    }

    let z_of = |low_sum: f64, m: usize| {
        let mf = m as f64;
        let e = mf * mean_rank;
        let var = mf * (nf - mf) / (nf * (nf - 1.0)) * ss;
        (low_sum - e) / var.sqrt()
    };
    let scan = |sorted_ranks: &[f64]| -> Vec<f64> {
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        for r in sorted_ranks {
            prefix.push(prefix.last().unwrap() + r);
        }
        splits.iter().map(|&(_, m)| z_of(prefix[m], m)).collect()
    };

    let sorted_ranks: Vec<f64> = order.iter().map(|&i| ranks[i]).collect();
    let zs = scan(&sorted_ranks);
    let mut best = 0;
    for (i, z) in zs.iter().enumerate() {
        if z.abs() > zs[best].abs() {
            best = i;
        }
    }
    let max_abs_z = zs[best].abs();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut perm = sorted_ranks.clone();
    let mut exceed = 0usize;
    for _ in 0..opts.permutations {
        perm.shuffle(&mut rng);
        let m = scan(&perm).into_iter().fold(0.0f64, |a, z| a.max(z.abs()));
        if m >= max_abs_z - 1e-12 {
            exceed += 1;
        }
    }
    let p_adjusted = (exceed + 1) as f64 / (opts.permutations + 1) as f64;

    let candidates = splits
        .iter()
        .zip(&zs)
        .map(|(&(c, m), &z)| CutpointStat {
            cutpoint: c,
            n_low: m,
            n_high: n - m,
            z,
            p_unadjusted: normal_two_sided(z),
        })
        .collect();
    Ok(ThresholdResult {
        threshold: splits[best].0,
        max_abs_z,
        p_adjusted,
        significant: p_adjusted < opts.alpha,
        candidates,
    })
}
