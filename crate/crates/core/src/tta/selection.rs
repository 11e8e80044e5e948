//! Per-sample scores, the aligned/misaligned partition, sample weights and
//! the weighted entropy objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;
use crate::ndgrad::{Axes, NodeId, Tape, Tensor, LOG_CLAMP};

/// Shannon entropy in nats with the probability clamped at [`LOG_CLAMP`] inside the log.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.max(LOG_CLAMP).ln()).sum::<f64>()
}

/// `y_hat[k] - other[k]` with `k` the (lowest-index) argmax of `y_hat`.
pub fn diff(y_hat: &[f64], other: &[f64]) -> f64 {
    let k = argmax(y_hat);
    y_hat[k] - other[k]
}

/// Cosine similarity of two vectors; zero when either is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Scores of one sample under the original and both transformed inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionTriple {
    pub y_hat: Vec<f64>,
    pub y_hat_sa: Vec<f64>,
    pub y_hat_sp: Vec<f64>,
    pub k: usize,
    pub ent: f64,
    pub diff_sa: f64,
    pub diff_sp: f64,
}

impl PredictionTriple {
    pub fn new(y_hat: &[f64], y_hat_sa: &[f64], y_hat_sp: &[f64]) -> Self {
        PredictionTriple {
            k: argmax(y_hat),
            ent: entropy(y_hat),
            diff_sa: diff(y_hat, y_hat_sa),
            diff_sp: diff(y_hat, y_hat_sp),
            y_hat: y_hat.to_vec(),
            y_hat_sa: y_hat_sa.to_vec(),
            y_hat_sp: y_hat_sp.to_vec(),
        }
    }
}

/// Builds triples from three (B, K) probability tensors.
pub fn triples(y_hat: &Tensor, y_hat_sa: &Tensor, y_hat_sp: &Tensor) -> Result<Vec<PredictionTriple>> {
    if y_hat.shape() != y_hat_sa.shape() || y_hat.shape() != y_hat_sp.shape() {
        return Err(Error::shape(
            "triples",
            format!("{:?} / {:?} / {:?}", y_hat.shape(), y_hat_sa.shape(), y_hat_sp.shape()),
        ));
    }
    Ok(y_hat
        .rows()
        .zip(y_hat_sa.rows())
        .zip(y_hat_sp.rows())
        .map(|((a, b), c)| PredictionTriple::new(a, b, c))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    /// Likely correct: entropy is minimized.
    Plus,
    /// Likely incorrect: entropy is maximized.
    Minus,
    Neither,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualTtaConfig {
    pub tau_sa: f64,
    pub tau_sp: f64,
    pub ent0: f64,
    pub diff0: f64,
    pub lambda: f64,
    /// Restrict the partition to samples with entropy below the baseline gate.
    pub entropy_gate: bool,
}

impl Default for DualTtaConfig {
    fn default() -> Self {
        DualTtaConfig {
            tau_sa: 0.4,
            tau_sp: 0.7,
            ent0: 0.4,
            diff0: 0.7,
            lambda: 0.5,
            entropy_gate: false,
        }
    }
}

impl DualTtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_sa > 0.0 && self.tau_sa < 1.0) || !(self.tau_sp > 0.0 && self.tau_sp < 1.0) {
            return Err(Error::Config(format!(
                "thresholds must lie in (0,1): tau_sa={} tau_sp={}",
                self.tau_sa, self.tau_sp
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Strict-inequality partition; ties with a threshold fall into `Neither`.
pub fn classify(diff_sa: f64, diff_sp: f64, cfg: &DualTtaConfig) -> Membership {
    if diff_sa > cfg.tau_sa && diff_sp < cfg.tau_sp {
        Membership::Plus
    } else if diff_sa < cfg.tau_sa && diff_sp > cfg.tau_sp {
        Membership::Minus
    } else {
        Membership::Neither
    }
}

pub fn partition(triples: &[PredictionTriple], cfg: &DualTtaConfig) -> Vec<Membership> {
    triples
        .iter()
        .map(|t| classify(t.diff_sa, t.diff_sp, cfg))
        .collect()
}

/// Weight for a likely-correct sample.
pub fn alpha(t: &PredictionTriple, cfg: &DualTtaConfig) -> f64 {
    (cfg.ent0 - t.ent).exp() + t.diff_sa.exp() + (cfg.diff0 - t.diff_sp).exp()
}

/// Weight for a likely-incorrect sample.
pub fn beta(ent: f64, ent0: f64) -> f64 {
    (ent0 - ent).exp()
}

/// `alpha` on `Plus`, `beta` on `Minus`, zero elsewhere.
pub fn weights(triples: &[PredictionTriple], membership: &[Membership], cfg: &DualTtaConfig) -> Vec<f64> {
    triples
        .iter()
        .zip(membership)
        .map(|(t, m)| match m {
            Membership::Plus => alpha(t, cfg),
            Membership::Minus => beta(t.ent, cfg.ent0),
            Membership::Neither => 0.0,
        })
        .collect()
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub plus: f64,
    pub minus: f64,
    pub dual: f64,
}

/// Records `sum_{Plus} w * Ent - lambda * sum_{Minus} w * Ent` on the tape.
///
/// Weights enter as constants. Returns `None` when no sample is selected,
/// in which case nothing is recorded.
pub fn dual_loss(
    tape: &mut Tape,
    probs: NodeId,
    membership: &[Membership],
    weights: &[f64],
    lambda: f64,
) -> Result<Option<(NodeId, LossTerms)>> {
    let b = tape.value(probs).shape()[0];
    if membership.len() != b || weights.len() != b {
        return Err(Error::shape("dual_loss", format!("{b} rows, {} memberships", membership.len())));
    }
    if membership.iter().all(|m| *m == Membership::Neither) {
        return Ok(None);
    }
    let coeff: Vec<f64> = membership
        .iter()
        .zip(weights)
        .map(|(m, w)| match m {
            Membership::Plus => *w,
            Membership::Minus => -lambda * w,
            Membership::Neither => 0.0,
        })
        .collect();
    let logp = tape.log_clamped(probs)?;
    let plogp = tape.mul(probs, logp)?;
    let neg_ent = tape.reduce_sum(plogp, Axes::Last)?;
    let ent = tape.scale(neg_ent, -1.0)?;
    let ents = tape.value(ent).data().to_vec();
    let c = tape.leaf(Tensor::from_vec(coeff));
    let weighted = tape.mul(ent, c)?;
    let loss = tape.reduce_sum(weighted, Axes::All)?;

    let mut terms = LossTerms::default();
    for ((m, w), e) in membership.iter().zip(weights).zip(&ents) {
        match m {
            Membership::Plus => terms.plus += w * e,
            Membership::Minus => terms.minus += w * e,
            Membership::Neither => {}
        }
    }
    terms.dual = tape.value(loss).data()[0];
    Ok(Some((loss, terms)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(ent: f64, diff_sa: f64, diff_sp: f64) -> PredictionTriple {
        PredictionTriple {
            y_hat: vec![],
            y_hat_sa: vec![],
            y_hat_sp: vec![],
            k: 0,
            ent,
            diff_sa,
            diff_sp,
        }
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(entropy(&[1.0, 0.0]).abs() < 3e-11);
        // -(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1), evaluated independently
        let oracle = 0.7 * (1.0f64 / 0.7).ln() + 0.2 * 5.0f64.ln() + 0.1 * 10.0f64.ln();
        assert!((entropy(&[0.7, 0.2, 0.1]) - oracle).abs() < 1e-15);
        assert!((oracle - 0.801819).abs() < 1e-6);
    }

    #[test]
    fn diff_values() {
        assert!((diff(&[0.9, 0.1], &[0.3, 0.7]) - 0.6).abs() < 1e-15);
        assert_eq!(diff(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
        assert!((diff(&[0.4, 0.6], &[0.6, 0.4]) - 0.2).abs() < 1e-15);
        // tie in argmax resolves to index 0
        assert!((diff(&[0.5, 0.5], &[0.2, 0.8]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn partition_predicates() {
        let cfg = DualTtaConfig::default();
        assert_eq!(classify(0.6, 0.05, &cfg), Membership::Plus);
        assert_eq!(classify(0.1, 0.8, &cfg), Membership::Minus);
        assert_eq!(classify(0.6, 0.8, &cfg), Membership::Neither);
        assert_eq!(classify(0.4, 0.05, &cfg), Membership::Neither);
        assert_eq!(classify(0.1, 0.7, &cfg), Membership::Neither);
    }

    #[test]
    fn weight_values() {
        let cfg = DualTtaConfig::default();
        assert!((alpha(&triple(0.4, 0.0, 0.7), &cfg) - 3.0).abs() < 1e-15);
        assert!((beta(0.4, 0.4) - 1.0).abs() < 1e-15);
        let oracle = 1.0 + 0.6f64.exp() + 0.65f64.exp();
        let a = alpha(&triple(0.4, 0.6, 0.05), &cfg);
        assert!((a - oracle).abs() < 1e-12);
        assert!((a - 4.73766).abs() < 1e-5);
    }

    #[test]
    fn weights_follow_membership() {
        let cfg = DualTtaConfig::default();
        let ts = [triple(0.3, 0.6, 0.05), triple(0.5, 0.1, 0.8), triple(0.2, 0.6, 0.8)];
        let m = partition(&ts, &cfg);
        let w = weights(&ts, &m, &cfg);
        assert!(w[0] > 0.0 && w[1] > 0.0);
        assert_eq!(w[2], 0.0);
        assert_eq!(w[1], beta(0.5, 0.4));
    }

    #[test]
    fn empty_selection_gives_no_loss() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.9, 0.1]).unwrap());
        let r = dual_loss(&mut tape, p, &[Membership::Neither; 2], &[0.0; 2], 0.5).unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn single_plus_sample() {
        // Binary probabilities with entropy exactly 0.5 nats, found by bisection.
        let (mut lo, mut hi) = (0.5f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if entropy(&[mid, 1.0 - mid]) > 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 2], vec![lo, 1.0 - lo]).unwrap());
        for lambda in [0.0, 0.5, 3.0] {
            let (_, terms) = dual_loss(&mut tape, p, &[Membership::Plus], &[2.0], lambda)
                .unwrap()
                .unwrap();
            assert!((terms.dual - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_loss_terms() {
        let mut tape = Tape::new();
        let probs = Tensor::new(vec![3, 2], vec![0.9, 0.1, 0.6, 0.4, 0.5, 0.5]).unwrap();
        let ents: Vec<f64> = probs.rows().map(entropy).collect();
        let p = tape.leaf(probs);
        let m = [Membership::Plus, Membership::Minus, Membership::Neither];
        let (_, t) = dual_loss(&mut tape, p, &m, &[2.0, 3.0, 0.0], 0.5).unwrap().unwrap();
        assert!((t.plus - 2.0 * ents[0]).abs() < 1e-14);
        assert!((t.minus - 3.0 * ents[1]).abs() < 1e-14);
        assert!((t.dual - (t.plus - 0.5 * t.minus)).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(DualTtaConfig::default().validate().is_ok());
        let bad = DualTtaConfig {
            tau_sa: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DualTtaConfig {
            lambda: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
