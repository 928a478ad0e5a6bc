//! Rank statistics: Spearman correlation and the Mann–Whitney U test.

use std::cmp::Ordering;

use itertools::Itertools;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

/// Samples with at most this many pooled observations get an exact p-value.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("correlation undefined: one sequence is constant")]
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: &'static str,
    pub n1: usize,
    pub n2: usize,
}

fn check_finite(xs: &[f64]) -> Result<(), StatsError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

/// 1-based ranks; tied values share the mean of the positions they occupy.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho with average ranks for ties.
///
/// The p-value is two-sided from the t approximation with n - 2 degrees of freedom.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<StatResult, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(StatsError::TooFew { needed: 3, got: xs.len() });
    }
    check_finite(xs)?;
    check_finite(ys)?;
    let rho = pearson(&average_ranks(xs), &average_ranks(ys))?;
    let n = xs.len();
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(StatResult {
        statistic: rho,
        p_value,
        method: "spearman_t_approx",
        n1: n,
        n2: n,
    })
}

/// U statistic of the first `n1` entries of `pooled_ranks`.
fn u_from_ranks(ranks_a: impl Iterator<Item = f64>, n1: usize) -> f64 {
    let n1 = n1 as f64;
    ranks_a.sum::<f64>() - n1 * (n1 + 1.0) / 2.0
}

/// Two-sided Mann–Whitney U test.
///
/// The statistic is U for `a`: pairs with a > b count one, ties one half.
/// When both samples together hold at most [`EXACT_LIMIT`] values the p-value
/// comes from enumerating every split of the pooled ranks (ties included);
/// otherwise from the normal approximation with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<StatResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::TooFew {
            needed: 1,
            got: a.len().min(b.len()),
        });
    }
    check_finite(a)?;
    check_finite(b)?;
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let u = u_from_ranks(ranks[..n1].iter().copied(), n1);
    let mean = (n1 * n2) as f64 / 2.0;

    let (p_value, method) = if n1 + n2 <= EXACT_LIMIT {
        let observed = (u - mean).abs();
        let mut extreme = 0usize;
        let mut total = 0usize;
        for subset in (0..n1 + n2).combinations(n1) {
            let u_perm = u_from_ranks(subset.iter().map(|&i| ranks[i]), n1);
            total += 1;
            if (u_perm - mean).abs() >= observed - 1e-9 {
                extreme += 1;
            }
        }
        (extreme as f64 / total as f64, "exact")
    } else {
        let n = (n1 + n2) as f64;
        let tie_term: f64 = pooled
            .iter()
            .copied()
            .sorted_by(f64::total_cmp)
            .chunk_by(|x| *x)
            .into_iter()
            .map(|(_, g)| {
                let t = g.count() as f64;
                t * t * t - t
            })
            .sum();
        let variance = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
        let p = if variance <= 0.0 {
            1.0
        } else {
            let z = ((u - mean).abs() - 0.5).max(0.0) / variance.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            2.0 * (1.0 - normal.cdf(z))
        };
        (p.clamp(0.0, 1.0), "normal_approx_tie_continuity")
    };

    Ok(StatResult {
        statistic: u,
        p_value,
        method,
        n1,
        n2,
    })
}

impl PartialOrd for StatResult {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.p_value.partial_cmp(&other.p_value)
    }
}
