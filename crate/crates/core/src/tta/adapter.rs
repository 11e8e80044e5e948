use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_rows, ModelState, NormMode, ParamPolicy, SgdMomentum};
use crate::ndgrad::{RngStream, Tensor};
use crate::transforms::{patch_shuffle, style_perturb, ShuffleSpec};

use super::selection::{
    beta, cosine, dual_loss, entropy, partition, triples, weights, DualTtaConfig, LossTerms,
    Membership, PredictionTriple,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Noadapt,
    Tent,
    EataLite,
    DeyoLite,
    Dualtta,
    DeyoDual,
    EataDual,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Noadapt,
        Method::Tent,
        Method::EataLite,
        Method::DeyoLite,
        Method::Dualtta,
        Method::DeyoDual,
        Method::EataDual,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Noadapt => "noadapt",
            Method::Tent => "tent",
            Method::EataLite => "eata_lite",
            Method::DeyoLite => "deyo_lite",
            Method::Dualtta => "dualtta",
            Method::DeyoDual => "deyo_dual",
            Method::EataDual => "eata_dual",
        }
    }

    /// Methods that produce both a minimization and a maximization set.
    pub fn is_dual(&self) -> bool {
        matches!(self, Method::Dualtta | Method::DeyoDual | Method::EataDual)
    }

    fn needs_shuffle(&self) -> bool {
        matches!(self, Method::DeyoLite | Method::Dualtta | Method::DeyoDual)
    }

    fn needs_style(&self) -> bool {
        *self == Method::Dualtta
    }

    fn uses_ema(&self) -> bool {
        matches!(self, Method::EataLite | Method::EataDual)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Gates for the entropy-selection baselines and their dual variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Entropy gate; `None` means `0.4 * ln(num_classes)`.
    pub tau_ent: Option<f64>,
    pub tau_plpd: f64,
    pub eps_cos: f64,
    /// Moving-average coefficient of the mean prediction.
    pub ema: f64,
    pub ent0: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            tau_ent: None,
            tau_plpd: 0.3,
            eps_cos: 0.05,
            ema: 0.1,
            ent0: 0.4,
        }
    }
}

impl BaselineConfig {
    pub fn tau_ent(&self, num_classes: usize) -> f64 {
        self.tau_ent
            .unwrap_or_else(|| 0.4 * (num_classes as f64).ln())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub dual: DualTtaConfig,
    pub baseline: BaselineConfig,
    pub lr: f64,
    pub momentum: f64,
    pub policy: ParamPolicy,
    pub shuffle: ShuffleSpec,
    /// Restore the initial parameters after every batch instead of
    /// carrying updates along the stream.
    pub reset_each_batch: bool,
    /// Normalization used by `noadapt`; adapting methods always use batch statistics.
    pub noadapt_norm: NormMode,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            dual: DualTtaConfig::default(),
            baseline: BaselineConfig::default(),
            lr: 5e-4,
            momentum: 0.9,
            policy: ParamPolicy::NormAffineOnly,
            shuffle: ShuffleSpec::default(),
            reset_each_batch: false,
            noadapt_norm: NormMode::RunningStats,
        }
    }
}

/// Result of one streaming step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    /// Pre-update probabilities, used for scoring.
    pub probs: Tensor,
    pub predictions: Vec<usize>,
    pub membership: Vec<Membership>,
    pub triples: Vec<PredictionTriple>,
    pub n_plus: usize,
    pub n_minus: usize,
    pub loss: LossTerms,
    pub updated: bool,
}

impl AdaptOutcome {
    pub fn n_neither(&self) -> usize {
        self.membership.len() - self.n_plus - self.n_minus
    }
}

/// A stateful streaming adapter that owns its model and optimizer.
pub struct Adapter {
    method: Method,
    config: AdapterConfig,
    model: ModelState,
    initial: ModelState,
    optimizer: SgdMomentum,
    trainable: Vec<String>,
    /// Moving average of the mean batch prediction (EATA family).
    ema_pred: Option<Vec<f64>>,
    rng: RngStream,
    step: u64,
}

impl Adapter {
    pub fn new(method: Method, config: AdapterConfig, mut model: ModelState, seed: u64) -> Result<Self> {
        config.dual.validate()?;
        if !(config.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", config.lr)));
        }
        if !(0.0..=1.0).contains(&config.baseline.ema) {
            return Err(Error::Config("moving-average coefficient must lie in [0,1]".into()));
        }
        model.norm_mode = if method == Method::Noadapt {
            config.noadapt_norm
        } else {
            NormMode::BatchStats
        };
        let trainable = model.resolve_trainables(config.policy)?;
        Ok(Adapter {
            method,
            optimizer: SgdMomentum::new(config.lr, config.momentum),
            initial: model.clone(),
            model,
            config,
            trainable,
            ema_pred: None,
            rng: RngStream::new(seed).split("adapter"),
            step: 0,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn into_model(self) -> ModelState {
        self.model
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    /// Probabilities for the content-altered batch.
    fn shuffled_probs(&self, batch: &Tensor) -> Result<Tensor> {
        let mut rng = self.rng.split("shuffle").split_index(self.step);
        let shuffled = patch_shuffle(batch, &self.config.shuffle, &mut rng)?;
        Ok(self.model.forward(&shuffled, None)?.probs)
    }

    /// Probabilities with the feature statistics at the style layer perturbed.
    fn restyled_probs(&self, batch: &Tensor) -> Result<Tensor> {
        let mut rng = self.rng.split("style").split_index(self.step);
        let mut inject = |z: &Tensor| style_perturb(z, &mut rng);
        Ok(self.model.forward(batch, Some(&mut inject))?.probs)
    }

    /// Scores the batch with the current model, then performs at most one update.
    pub fn adapt_step(&mut self, batch: &Tensor) -> Result<AdaptOutcome> {
        let mut graph = self.model.forward_graph(batch, None)?;
        let probs = graph.probs().clone();
        let k = probs.shape()[1];

        let sa = if self.method.needs_shuffle() {
            self.shuffled_probs(batch)?
        } else {
            probs.clone()
        };
        let sp = if self.method.needs_style() {
            self.restyled_probs(batch)?
        } else {
            probs.clone()
        };
        let scored = triples(&probs, &sa, &sp)?;

        let (membership, w) = self.select(&scored, &probs, k);
        let n_plus = membership.iter().filter(|m| **m == Membership::Plus).count();
        let n_minus = membership.iter().filter(|m| **m == Membership::Minus).count();

        let mut loss = LossTerms::default();
        let mut updated = false;
        if self.method != Method::Noadapt {
            let lambda = if self.method.is_dual() { self.config.dual.lambda } else { 0.0 };
            if let Some((node, terms)) = dual_loss(&mut graph.tape, graph.probs, &membership, &w, lambda)? {
                loss = terms;
                if !terms.dual.is_finite() {
                    return Err(Error::NonFinite { op: "adaptation loss" });
                }
                let grads = graph.backward(node, &self.trainable)?;
                self.optimizer.step(&mut self.model, &grads)?;
                updated = true;
            }
        }
        if self.config.reset_each_batch {
            self.model = self.initial.clone();
            self.optimizer = SgdMomentum::new(self.config.lr, self.config.momentum);
        }
        self.step += 1;

        Ok(AdaptOutcome {
            predictions: argmax_rows(&probs),
            probs,
            membership,
            triples: scored,
            n_plus,
            n_minus,
            loss,
            updated,
        })
    }

    /// Membership and per-sample weights for the configured method.
    fn select(&mut self, scored: &[PredictionTriple], probs: &Tensor, k: usize) -> (Vec<Membership>, Vec<f64>) {
        let b = scored.len();
        let base = &self.config.baseline;
        let tau_ent = base.tau_ent(k);
        let ent_weight = |t: &PredictionTriple| beta(t.ent, base.ent0);
        match self.method {
            Method::Noadapt => (vec![Membership::Neither; b], vec![0.0; b]),
            Method::Tent => (vec![Membership::Plus; b], vec![1.0; b]),
            Method::Dualtta => {
                let mut m = partition(scored, &self.config.dual);
                if self.config.dual.entropy_gate {
                    for (mi, t) in m.iter_mut().zip(scored) {
                        if t.ent >= tau_ent {
                            *mi = Membership::Neither;
                        }
                    }
                }
                let w = weights(scored, &m, &self.config.dual);
                (m, w)
            }
            Method::DeyoLite | Method::DeyoDual => {
                let dual = self.method == Method::DeyoDual;
                let m: Vec<Membership> = scored
                    .iter()
                    .map(|t| {
                        let plpd = t.diff_sa;
                        if t.ent < tau_ent && plpd > base.tau_plpd {
                            Membership::Plus
                        } else if dual && t.ent < tau_ent && plpd < base.tau_plpd / 2.0 {
                            Membership::Minus
                        } else {
                            Membership::Neither
                        }
                    })
                    .collect();
                let w = scored
                    .iter()
                    .zip(&m)
                    .map(|(t, mi)| if *mi == Membership::Neither { 0.0 } else { ent_weight(t) })
                    .collect();
                (m, w)
            }
            Method::EataLite | Method::EataDual => {
                let dual = self.method == Method::EataDual;
                let prev = self.ema_pred.clone();
                let m: Vec<Membership> = scored
                    .iter()
                    .map(|t| {
                        if t.ent >= tau_ent {
                            return Membership::Neither;
                        }
                        // First batch: no history to compare against.
                        let Some(prev) = &prev else {
                            return Membership::Plus;
                        };
                        let cos = cosine(&t.y_hat, prev);
                        if cos < base.eps_cos {
                            Membership::Plus
                        } else if dual && cos > 1.5 * base.eps_cos {
                            Membership::Minus
                        } else {
                            Membership::Neither
                        }
                    })
                    .collect();
                let w = scored
                    .iter()
                    .zip(&m)
                    .map(|(t, mi)| if *mi == Membership::Neither { 0.0 } else { ent_weight(t) })
                    .collect();
                self.update_ema(probs);
                (m, w)
            }
        }
    }

    fn update_ema(&mut self, probs: &Tensor) {
        if !self.method.uses_ema() {
            return;
        }
        let (b, k) = (probs.shape()[0], probs.shape()[1]);
        let mut mean = vec![0.0; k];
        for row in probs.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / b as f64;
            }
        }
        let a = self.config.baseline.ema;
        self.ema_pred = Some(match self.ema_pred.take() {
            None => mean,
            Some(prev) => prev.iter().zip(&mean).map(|(p, m)| a * m + (1.0 - a) * p).collect(),
        });
    }

    /// Current moving-average prediction, once initialized.
    pub fn ema_prediction(&self) -> Option<&[f64]> {
        self.ema_pred.as_deref()
    }
}

/// Free-function constructor matching the adapter registry.
pub fn make_adapter(method: &str, config: AdapterConfig, model: ModelState, seed: u64) -> Result<Adapter> {
    Adapter::new(method.parse()?, config, model, seed)
}

/// Mean entropy helper for diagnostics.
pub fn mean_entropy(probs: &Tensor) -> f64 {
    let rows: Vec<f64> = probs.rows().map(entropy).collect();
    rows.iter().sum::<f64>() / rows.len().max(1) as f64
}
