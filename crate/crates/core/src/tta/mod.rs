//! Streaming adapters: the dual-strategy method, entropy baselines and
//! their dual-set hybrids, all behind one `adapt_step` interface.

mod adapter;
mod fidelity;
mod selection;

pub use fidelity::{dual_loss_fidelity, FidelityReport};
pub use adapter::{make_adapter, mean_entropy, AdaptOutcome, Adapter, AdapterConfig, BaselineConfig, Method};
pub use selection::{
    alpha, beta, classify, cosine, diff, dual_loss, entropy, partition, triples, weights,
    DualTtaConfig, LossTerms, Membership, PredictionTriple,
};
