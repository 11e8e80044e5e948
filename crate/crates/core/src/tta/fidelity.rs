//! Finite-difference check of the dual objective through the whole
//! reference network.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelState, NormMode, ParamPolicy};
use crate::ndgrad::{grad_check, RngStream, Tensor};
use crate::transforms::{patch_shuffle, style_perturb, ShuffleSpec};

use super::selection::{dual_loss, partition, triples, weights, DualTtaConfig, Membership};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub batch_size: usize,
    pub scalars: usize,
    pub n_plus: usize,
    pub n_minus: usize,
    pub max_rel_err: f64,
}

/// Compares analytic and central-difference gradients of the dual loss
/// with respect to every normalization affine parameter.
///
/// Membership comes from the real partition of the batch. Samples the
/// partition leaves in neither set are assigned alternately to D+ and D-
/// so that both terms carry gradient.
pub fn dual_loss_fidelity(
    model: &ModelState,
    batch: &Tensor,
    cfg: &DualTtaConfig,
    seed: u64,
    fd_step: f64,
) -> Result<FidelityReport> {
    let model = model.clone().with_norm_mode(NormMode::BatchStats);
    let rng = RngStream::new(seed).split("fidelity");
    let probs = model.forward(batch, None)?.probs;
    let shuffled = patch_shuffle(batch, &ShuffleSpec::default(), &mut rng.split("shuffle"))?;
    let sa = model.forward(&shuffled, None)?.probs;
    let mut style_rng = rng.split("style");
    let mut inject = |z: &Tensor| style_perturb(z, &mut style_rng);
    let sp = model.forward(batch, Some(&mut inject))?.probs;
    let scored = triples(&probs, &sa, &sp)?;

    let mut membership = partition(&scored, cfg);
    let mut next_plus = true;
    for m in membership.iter_mut().filter(|m| **m == Membership::Neither) {
        *m = if next_plus { Membership::Plus } else { Membership::Minus };
        next_plus = !next_plus;
    }
    let w = weights(&scored, &membership, cfg);

    let names = model.resolve_trainables(ParamPolicy::NormAffineOnly)?;
    let params: Vec<Tensor> = names.iter().map(|n| model.params[n].clone()).collect();
    let lambda = cfg.lambda;
    let max_rel_err = grad_check(
        |tape, ids| {
            let mut all = BTreeMap::new();
            for (name, t) in &model.params {
                let id = match names.iter().position(|n| n == name) {
                    Some(i) => ids[i],
                    None => tape.leaf(t.clone()),
                };
                all.insert(name.clone(), id);
            }
            let (_, probs, _, _) = model.forward_on(tape, &all, batch, None)?;
            dual_loss(tape, probs, &membership, &w, lambda)?
                .map(|(node, _)| node)
                .ok_or_else(|| Error::Contract("dual loss selected no samples".into()))
        },
        &params,
        fd_step,
    )?;

    Ok(FidelityReport {
        batch_size: scored.len(),
        scalars: params.iter().map(Tensor::len).sum(),
        n_plus: membership.iter().filter(|m| **m == Membership::Plus).count(),
        n_minus: membership.iter().filter(|m| **m == Membership::Minus).count(),
        max_rel_err,
    })
}
