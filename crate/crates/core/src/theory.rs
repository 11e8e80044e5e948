//! Monte Carlo validators for the margin model that motivates the
//! selection rule.
//!
//! The margin `M = |w·φ(x)|` is folded normal. A style perturbation of
//! magnitude `s` flips the prediction when `M ≤ s`, a semantic one of
//! magnitude `S` when `M ≤ S`, so `α = F_M(s)` and `β = F_M(S)`. The
//! classifier fails on a sample when `M < m0`, where `m0` grows with `s`
//! through `g(s) = c1·s` and shrinks with `S` through `ψ(S) = c2/S`.
//! Both effects are combined additively, `m0 = g(s) + ψ(S)`, which keeps
//! error increasing in `α` at fixed `β` and decreasing in `β` at fixed `α`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::ndgrad::RngStream;
use crate::tta::Membership;

/// Minimum Monte Carlo sample size for the margin model.
pub const MIN_MARGIN_TRIALS: usize = 10_000;
/// Minimum number of sweep points for the rank test.
pub const MIN_SWEEP_POINTS: usize = 20;
/// Spearman threshold for the monotonicity check.
pub const SPEARMAN_THRESHOLD: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginModelConfig {
    pub sigma_m: f64,
    pub c1: f64,
    pub c2: f64,
    /// Style magnitudes `s`.
    pub s_values: Vec<f64>,
    /// Semantic magnitudes `S`, each larger than every `s`.
    pub s_mag_values: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for MarginModelConfig {
    fn default() -> Self {
        MarginModelConfig {
            sigma_m: 1.0,
            c1: 1.5,
            c2: 1.0,
            s_values: (1..=10).map(|i| 0.1 * i as f64).collect(),
            s_mag_values: vec![2.0, 4.0],
            trials: 20_000,
            seed: 0,
        }
    }
}

impl MarginModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_m > 0.0 && self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config("sigma_m, c1 and c2 must be positive".into()));
        }
        if self.trials < MIN_MARGIN_TRIALS {
            return Err(Error::Config(format!(
                "margin model needs at least {MIN_MARGIN_TRIALS} trials, got {}",
                self.trials
            )));
        }
        if self.s_values.is_empty() || self.s_mag_values.is_empty() {
            return Err(Error::Config("sweep needs at least one s and one S value".into()));
        }
        for &s in &self.s_values {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("style magnitude must be non-negative, got {s}")));
            }
            for &big in &self.s_mag_values {
                if !(big > s) {
                    return Err(Error::Config(format!(
                        "semantic magnitude {big} must exceed style magnitude {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn g(&self, s: f64) -> f64 {
        self.c1 * s
    }

    pub fn psi(&self, s_mag: f64) -> f64 {
        self.c2 / s_mag
    }
}

/// CDF of `|N(0, σ²)|`.
pub fn folded_normal_cdf(x: f64, sigma: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        erf(x / (sigma * std::f64::consts::SQRT_2))
    }
}

/// One sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub s: f64,
    pub s_mag: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Error with `m0 = g(s)`.
    pub error_style: f64,
    /// Error with `m0 = ψ(S)`.
    pub error_semantic: f64,
    /// Error with `m0 = g(s) + ψ(S)`.
    pub error: f64,
}

impl MarginRecord {
    pub fn ratio(&self) -> f64 {
        self.alpha / self.beta
    }
}

/// Empirical CDF evaluations over one shared set of margin draws.
struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    fn at_most(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&m| m <= x) as f64 / self.sorted.len() as f64
    }

    fn below(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&m| m < x) as f64 / self.sorted.len() as f64
    }
}

pub fn simulate_margin_model(cfg: &MarginModelConfig) -> Result<Vec<MarginRecord>> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed).split("margin");
    let mut sorted: Vec<f64> = (0..cfg.trials)
        .map(|_| (cfg.sigma_m * rng.gaussian()).abs())
        .collect();
    sorted.sort_by(f64::total_cmp);
    let ecdf = Ecdf { sorted };

    let mut out = Vec::with_capacity(cfg.s_values.len() * cfg.s_mag_values.len());
    for &big in &cfg.s_mag_values {
        for &s in &cfg.s_values {
            out.push(MarginRecord {
                s,
                s_mag: big,
                alpha: ecdf.at_most(s),
                beta: ecdf.at_most(big),
                error_style: ecdf.below(cfg.g(s)),
                error_semantic: ecdf.below(cfg.psi(big)),
                error: ecdf.below(cfg.g(s) + cfg.psi(big)),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub n: usize,
    pub rho: Option<f64>,
    pub threshold: f64,
    pub verdict: Verdict,
}

/// Ranks starting at 1, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation as Pearson correlation of average ranks.
/// `None` when either series is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman", format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Ok(None);
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

/// Rank correlation between `α/β` and error over the sweep.
pub fn check_theorem1_monotonicity(records: &[MarginRecord]) -> Result<SpearmanResult> {
    if records.len() < MIN_SWEEP_POINTS {
        return Err(Error::InsufficientData(format!(
            "need at least {MIN_SWEEP_POINTS} sweep points, got {}",
            records.len()
        )));
    }
    let ratios: Vec<f64> = records.iter().map(MarginRecord::ratio).collect();
    let errors: Vec<f64> = records.iter().map(|r| r.error).collect();
    let rho = spearman(&ratios, &errors)?;
    let verdict = match rho {
        None => Verdict::Inconclusive,
        Some(r) if r >= SPEARMAN_THRESHOLD => Verdict::Pass,
        Some(_) => Verdict::Fail,
    };
    Ok(SpearmanResult {
        n: records.len(),
        rho,
        threshold: SPEARMAN_THRESHOLD,
        verdict,
    })
}

/// Distribution of the raw probability shift `Δ`, supported in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftDistribution {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    TruncatedNormal { mean: f64, sd: f64, lo: f64, hi: f64 },
    TwoPoint { a: f64, b: f64, p_a: f64 },
}

impl ShiftDistribution {
    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64| (-1.0..=1.0).contains(&v);
        let ok = match *self {
            ShiftDistribution::Constant { value } => inside(value),
            ShiftDistribution::Uniform { lo, hi } => inside(lo) && inside(hi) && lo <= hi,
            ShiftDistribution::TruncatedNormal { mean, sd, lo, hi } => {
                inside(lo) && inside(hi) && lo < hi && sd > 0.0 && (lo..=hi).contains(&mean)
            }
            ShiftDistribution::TwoPoint { a, b, p_a } => {
                inside(a) && inside(b) && (0.0..=1.0).contains(&p_a)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid shift distribution {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match *self {
            ShiftDistribution::Constant { value } => value,
            ShiftDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.uniform(),
            ShiftDistribution::TruncatedNormal { mean, sd, lo, hi } => loop {
                // The mean lies inside the window, so acceptance is at least
                // one half of the one-sided mass and the loop ends quickly.
                let v = mean + sd * rng.gaussian();
                if (lo..=hi).contains(&v) {
                    break v;
                }
            },
            ShiftDistribution::TwoPoint { a, b, p_a } => {
                if rng.bernoulli(p_a) {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// Flip-probability bounds for one `(δ, shift)` configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub delta: f64,
    pub shift: ShiftDistribution,
    pub trials: usize,
    /// Mean of `|p' - p|` with `p' = clip(p + Δ, 0, 1)`.
    pub mean_abs_shift: f64,
    pub flip_frequency: f64,
    pub lower: f64,
    pub upper: f64,
    /// Three binomial standard errors of the flip frequency.
    pub slack: f64,
    /// Whether every non-flipping draw moved by at most `δ`. The lower
    /// bound relies on this.
    pub premise_holds: bool,
    pub passed: bool,
}

/// Simulates `p = 1/2 + δ` shifted to `p' = clip(p + Δ, 0, 1)`; the label
/// flips when `p' < 1/2`.
pub fn check_theorem2_bounds(
    delta: f64,
    shift: &ShiftDistribution,
    trials: usize,
    rng: &mut RngStream,
) -> Result<BoundReport> {
    if !(delta > 0.0 && delta <= 0.5) {
        return Err(Error::Config(format!("delta must lie in (0, 1/2], got {delta}")));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    shift.validate()?;
    let p = 0.5 + delta;
    let (mut flips, mut abs_sum) = (0usize, 0.0);
    let mut premise_holds = true;
    for _ in 0..trials {
        let moved = (p + shift.sample(rng)).clamp(0.0, 1.0) - p;
        abs_sum += moved.abs();
        if p + moved < 0.5 {
            flips += 1;
        } else if moved.abs() > delta {
            premise_holds = false;
        }
    }
    let n = trials as f64;
    let freq = flips as f64 / n;
    let mean_abs = abs_sum / n;
    let lower = ((mean_abs - delta) / (1.0 - delta)).max(0.0);
    let upper = (mean_abs / delta).min(1.0);
    let slack = 3.0 * (freq * (1.0 - freq) / n).sqrt();
    let passed = freq >= lower - slack && freq <= upper + slack;
    Ok(BoundReport {
        delta,
        shift: shift.clone(),
        trials,
        mean_abs_shift: mean_abs,
        flip_frequency: freq,
        lower,
        upper,
        slack,
        premise_holds,
        passed,
    })
}

/// Random configurations inside the bound's premise: when `δ < 1/4`,
/// upward shifts are capped at `δ` (for `δ ≥ 1/4` clipping at 1 already
/// caps them).
pub fn random_theorem2_configs(count: usize, seed: u64) -> Vec<(f64, ShiftDistribution)> {
    let mut rng = RngStream::new(seed).split("theorem2-configs");
    (0..count)
        .map(|_| {
            let delta = 0.02 + 0.48 * rng.uniform();
            let cap = if delta < 0.25 { delta } else { 1.0 };
            let pick = |rng: &mut RngStream| -1.0 + (cap + 1.0) * rng.uniform();
            let shift = match rng.below(3) {
                0 => {
                    let (a, b) = (pick(&mut rng), pick(&mut rng));
                    ShiftDistribution::Uniform { lo: a.min(b), hi: a.max(b) }
                }
                1 => ShiftDistribution::TruncatedNormal {
                    mean: pick(&mut rng),
                    sd: 0.05 + 0.5 * rng.uniform(),
                    lo: -1.0,
                    hi: cap,
                },
                _ => ShiftDistribution::TwoPoint {
                    a: pick(&mut rng),
                    b: pick(&mut rng),
                    p_a: rng.uniform(),
                },
            };
            (delta, shift)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Summary {
    pub configurations: usize,
    pub passed: usize,
    pub reports: Vec<BoundReport>,
}

pub fn check_theorem2_suite(count: usize, trials: usize, seed: u64) -> Result<Theorem2Summary> {
    let root = RngStream::new(seed).split("theorem2-trials");
    let reports = random_theorem2_configs(count, seed)
        .iter()
        .enumerate()
        .map(|(i, (delta, shift))| {
            check_theorem2_bounds(*delta, shift, trials, &mut root.split_index(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Theorem2Summary {
        configurations: count,
        passed: reports.iter().filter(|r| r.passed).count(),
        reports,
    })
}

/// Accuracy of the two selected sets and the interval the separation
/// factor must fall into.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryReport {
    pub n_plus: usize,
    pub n_minus: usize,
    pub accuracy_plus: Option<f64>,
    pub accuracy_minus: Option<f64>,
    /// `accuracy_plus - accuracy_minus`.
    pub separation: Option<f64>,
    /// `(error(D+), error(D-))`, present when the interval is non-empty.
    pub rho_interval: Option<(f64, f64)>,
    pub verdict: Verdict,
}

/// `records` pairs each sample's membership with whether its prediction
/// was correct.
pub fn estimate_corollary_separation(records: &[(Membership, bool)]) -> CorollaryReport {
    let (mut counts, mut correct) = ([0usize; 2], [0usize; 2]);
    for &(m, ok) in records {
        let slot = match m {
            Membership::Plus => 0,
            Membership::Minus => 1,
            Membership::Neither => continue,
        };
        counts[slot] += 1;
        correct[slot] += ok as usize;
    }
    corollary_from_counts(counts[0], correct[0], counts[1], correct[1])
}

/// Same report from set sizes and correct counts.
pub fn corollary_from_counts(n_plus: usize, plus_correct: usize, n_minus: usize, minus_correct: usize) -> CorollaryReport {
    let rate = |ok: usize, n: usize| (n > 0).then(|| ok as f64 / n as f64);
    let accuracy_plus = rate(plus_correct, n_plus);
    let accuracy_minus = rate(minus_correct, n_minus);
    let (separation, rho_interval, verdict) = match (accuracy_plus, accuracy_minus) {
        (Some(ap), Some(am)) => {
            let (ep, em) = (1.0 - ap, 1.0 - am);
            if ep < em {
                (Some(ap - am), Some((ep, em)), Verdict::Pass)
            } else {
                (Some(ap - am), None, Verdict::Fail)
            }
        }
        _ => (None, None, Verdict::Inconclusive),
    };
    CorollaryReport {
        n_plus,
        n_minus,
        accuracy_plus,
        accuracy_minus,
        separation,
        rho_interval,
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_style_magnitude_never_flips() {
        let cfg = MarginModelConfig {
            s_values: vec![0.0],
            ..Default::default()
        };
        let recs = simulate_margin_model(&cfg).unwrap();
        assert!(recs.iter().all(|r| r.alpha == 0.0));
    }

    #[test]
    fn large_semantic_magnitude_saturates_beta() {
        let cfg = MarginModelConfig {
            s_mag_values: vec![10.0],
            ..Default::default()
        };
        let recs = simulate_margin_model(&cfg).unwrap();
        assert!(recs.iter().all(|r| r.beta > 0.999));
    }

    #[test]
    fn alpha_matches_closed_form() {
        let cfg = MarginModelConfig {
            s_values: vec![1.0],
            s_mag_values: vec![2.0],
            trials: 100_000,
            seed: 3,
            ..Default::default()
        };
        let rec = &simulate_margin_model(&cfg).unwrap()[0];
        let p = folded_normal_cdf(1.0, 1.0);
        assert!((p - 0.682_689_492).abs() < 1e-8);
        let tol = 3.0 * (p * (1.0 - p) / 100_000.0).sqrt();
        assert!((rec.alpha - p).abs() < tol, "{} vs {p}", rec.alpha);
    }

    #[test]
    fn rejects_semantic_below_style() {
        let cfg = MarginModelConfig {
            s_values: vec![3.0],
            s_mag_values: vec![2.0],
            ..Default::default()
        };
        assert!(matches!(simulate_margin_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn spearman_extremes() {
        let x: Vec<f64> = (0..25).map(f64::from).collect();
        let up: Vec<f64> = x.iter().map(|v| v * v).collect();
        let down: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman(&x, &up).unwrap(), Some(1.0));
        assert_eq!(spearman(&x, &down).unwrap(), Some(-1.0));
        assert_eq!(spearman(&x, &vec![1.0; 25]).unwrap(), None);
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn constant_error_is_inconclusive() {
        let recs: Vec<MarginRecord> = (0..20)
            .map(|i| MarginRecord {
                s: 0.0,
                s_mag: 1.0,
                alpha: i as f64 / 20.0,
                beta: 1.0,
                error_style: 0.5,
                error_semantic: 0.5,
                error: 0.5,
            })
            .collect();
        assert_eq!(check_theorem1_monotonicity(&recs).unwrap().verdict, Verdict::Inconclusive);
    }

    #[test]
    fn no_shift_never_flips() {
        let mut rng = RngStream::new(0);
        let r = check_theorem2_bounds(0.3, &ShiftDistribution::Constant { value: 0.0 }, 1000, &mut rng).unwrap();
        assert_eq!(r.flip_frequency, 0.0);
        assert_eq!(r.lower, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn forced_crossing_always_flips() {
        let mut rng = RngStream::new(0);
        let r = check_theorem2_bounds(0.2, &ShiftDistribution::Constant { value: -0.4 }, 1000, &mut rng).unwrap();
        assert_eq!(r.flip_frequency, 1.0);
        assert!((r.mean_abs_shift - 0.4).abs() < 1e-12);
        assert_eq!(r.upper, 1.0);
        assert!(r.passed);
    }

    #[test]
    fn truncated_normal_example() {
        let mut rng = RngStream::new(11);
        let shift = ShiftDistribution::TruncatedNormal { mean: 0.0, sd: 0.2, lo: -1.0, hi: 1.0 };
        let r = check_theorem2_bounds(0.3, &shift, 100_000, &mut rng).unwrap();
        assert!(r.premise_holds);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn lower_bound_needs_its_premise() {
        // A large upward shift at small δ never flips the label but makes
        // the lower bound positive.
        let mut rng = RngStream::new(0);
        let r = check_theorem2_bounds(0.1, &ShiftDistribution::Constant { value: 0.35 }, 1000, &mut rng).unwrap();
        assert!(!r.premise_holds);
        assert_eq!(r.flip_frequency, 0.0);
        assert!(r.lower > 0.2);
        assert!(!r.passed);
    }

    #[test]
    fn random_configs_respect_premise() {
        for (delta, shift) in random_theorem2_configs(300, 5) {
            shift.validate().unwrap();
            assert!(delta > 0.0 && delta <= 0.5);
        }
    }

    #[test]
    fn corollary_extremes() {
        use Membership::*;
        let r = estimate_corollary_separation(&[(Plus, true), (Plus, true), (Minus, false)]);
        assert_eq!(r.rho_interval, Some((0.0, 1.0)));
        assert_eq!(r.verdict, Verdict::Pass);

        let r = estimate_corollary_separation(&[(Plus, true), (Plus, false), (Minus, true), (Minus, false)]);
        assert_eq!(r.rho_interval, None);
        assert_eq!(r.verdict, Verdict::Fail);

        let r = estimate_corollary_separation(&[(Plus, true), (Neither, false)]);
        assert_eq!(r.verdict, Verdict::Inconclusive);
    }
}
