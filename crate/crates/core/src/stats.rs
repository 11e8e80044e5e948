//! Wilcoxon signed-rank test for paired accuracies.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::theory::average_ranks;

/// Largest number of non-zero differences handled by the exact null.
pub const EXACT_MAX_N: usize = 20;
/// Fewest non-zero differences the test accepts.
pub const MIN_NONZERO: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub w: f64,
    pub p_two_sided: f64,
    pub method: WilcoxonMethod,
}

/// Signed ranks of `a - b` after dropping zeros: `(ranks, positive?)`.
fn signed_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<bool>)> {
    if a.len() != b.len() {
        return Err(Error::shape("wilcoxon", format!("lengths {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "wilcoxon" });
    }
    if d.len() < MIN_NONZERO {
        return Err(Error::InsufficientData(format!(
            "{} non-zero differences, need at least {MIN_NONZERO}",
            d.len()
        )));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    Ok((average_ranks(&abs), d.iter().map(|v| *v > 0.0).collect()))
}

/// Two-sided p-value of `W+` under the exact sign-flip null. Ranks are
/// mid-ranks, so they are doubled to integers before counting.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(ranks.len() as i32);
    let obs = (2.0 * w_plus).round() as usize;
    let lower: f64 = counts[..=obs].iter().sum::<f64>() / all;
    let upper: f64 = counts[obs..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Normal approximation with continuity correction and tie correction.
fn normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|r| **r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Paired two-sided test of `a` against `b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let (ranks, positive) = signed_ranks(a, b)?;
    let w_plus: f64 = ranks.iter().zip(&positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let total = ranks.len() as f64 * (ranks.len() as f64 + 1.0) / 2.0;
    let w_minus = total - w_plus;
    let (p, method) = if ranks.len() <= EXACT_MAX_N {
        (exact_p(&ranks, w_plus), WilcoxonMethod::Exact)
    } else {
        (normal_p(&ranks, w_plus), WilcoxonMethod::NormalApprox)
    };
    Ok(WilcoxonResult {
        n: ranks.len(),
        w_plus,
        w_minus,
        w: w_plus.min(w_minus),
        p_two_sided: p,
        method,
    })
}
