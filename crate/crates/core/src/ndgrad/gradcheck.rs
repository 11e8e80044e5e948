use crate::error::{Error, Result};

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &ids)?;
    tape.value(out)
        .item()
        .ok_or_else(|| Error::Contract("gradient check needs a scalar function".into()))
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences and returns the worst relative error over all
/// parameter coordinates.
///
/// `f` receives a fresh tape and one leaf per entry of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(fd_step > 0.0) {
        return Err(Error::InvalidCheck(format!("fd_step must be positive, got {fd_step}")));
    }
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let base = tape
        .value(out)
        .item()
        .ok_or_else(|| Error::Contract("gradient check needs a scalar function".into()))?;
    let grads = tape.backward(out, &ids)?;

    let again = evaluate(&f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::InvalidCheck(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut worst = 0.0_f64;
    let mut probe = params.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("requested gradient");
        for j in 0..params[i].len() {
            let orig = params[i].data()[j];
            probe[i].data_mut()[j] = orig + fd_step;
            let up = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig - fd_step;
            let down = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let central = (up - down) / (2.0 * fd_step);
            let a = analytic.data()[j];
            let denom = a.abs().max(central.abs()).max(1e-8);
            worst = worst.max((a - central).abs() / denom);
        }
    }
    Ok(worst)
}
