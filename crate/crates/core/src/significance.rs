//! Two-sided Mann–Whitney U test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{config, Result};

/// Largest per-sample size for which the null distribution is enumerated.
pub const EXACT_MAX: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U` of the first sample: pairs with `a > b` plus half the ties.
    pub u: f64,
    pub p: f64,
    pub exact: bool,
    pub n_a: usize,
    pub n_b: usize,
}

/// Midranks (1-based) of the pooled sample.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        order[i..=j].iter().for_each(|&k| ranks[k] = r);
        i = j + 1;
    }
    ranks
}

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(config("Mann-Whitney test needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(config("Mann-Whitney samples must be finite"));
    }
    Ok(())
}

fn u_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut pooled = a.to_vec();
    pooled.extend_from_slice(b);
    let ranks = midranks(&pooled);
    let n = a.len() as f64;
    ranks[..a.len()].iter().sum::<f64>() - n * (n + 1.0) / 2.0
}

/// Exact two-sided p: share of all assignments of the pooled midranks to a
/// first group of size `n_a` whose `U` lies at least as far from `n_a·n_b/2`.
pub fn exact_p(a: &[f64], b: &[f64]) -> Result<f64> {
    check(a, b)?;
    let (na, nb) = (a.len(), b.len());
    let mut pooled = a.to_vec();
    pooled.extend_from_slice(b);
    let ranks = midranks(&pooled);
    let mu = (na * nb) as f64 / 2.0;
    let observed = (u_statistic(a, b) - mu).abs();
    let offset = (na * (na + 1)) as f64 / 2.0;
    let total = na + nb;
    let (mut hits, mut count) = (0u64, 0u64);
    // Walk every na-subset of 0..total in lexicographic order.
    let mut idx: Vec<usize> = (0..na).collect();
    loop {
        let u = idx.iter().map(|&i| ranks[i]).sum::<f64>() - offset;
        count += 1;
        if (u - mu).abs() >= observed - 1e-9 {
            hits += 1;
        }
        let Some(pos) = (0..na).rev().find(|&k| idx[k] < total - na + k) else {
            break;
        };
        idx[pos] += 1;
        for k in pos + 1..na {
            idx[k] = idx[k - 1] + 1;
        }
    }
    Ok(hits as f64 / count as f64)
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn normal_p(a: &[f64], b: &[f64]) -> Result<f64> {
    check(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let mut pooled = a.to_vec();
    pooled.extend_from_slice(b);
    pooled.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let j = pooled[i..].iter().take_while(|&&v| v == pooled[i]).count();
        tie_term += (j * j * j - j) as f64;
        i += j;
    }
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)).max(1.0));
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = ((u_statistic(a, b) - na * nb / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    let phi = Normal::new(0.0, 1.0).expect("standard normal").cdf(z);
    Ok((2.0 * (1.0 - phi)).min(1.0))
}

/// Exact p when both samples have at most [`EXACT_MAX`] values, otherwise
/// the normal approximation.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    check(a, b)?;
    let exact = a.len() <= EXACT_MAX && b.len() <= EXACT_MAX;
    let p = if exact { exact_p(a, b)? } else { normal_p(a, b)? };
    Ok(MannWhitney {
        u: u_statistic(a, b),
        p,
        exact,
        n_a: a.len(),
        n_b: b.len(),
    })
}
