//! Alternating modality masking pruning.
//!
//! Importance of every parameter (or output channel) combines two
//! first-order indicators:
//!
//! - the *deactivated contribution* `|theta * dL/dtheta|` on the unmasked
//!   model, and
//! - the *reactivated redundancy* `|theta_0 * g_start - theta_0 * g_end|`,
//!   the change of the same saliency while the model is trained for a few
//!   batches with the opposite backbone masked out.
//!
//! Scores are `alpha * contribution share - beta * redundancy share` within
//! each partition (the fusion partition sees two masking stages and splits
//! `beta` between them); a single global threshold then keeps the top `k`.

mod indicators;
mod ledger;
mod run;
mod scoring;

pub use indicators::{
    deci, deci_terms, reactivate, reactivation_trajectory, reri, reri_terms, MaskedObjective,
    ModelObjective, Reactivation, Trajectory,
};
pub use ledger::{ImportanceLedger, LedgerEntry, Unit};
pub use run::{
    finetune, run_altermoma, sample_eval_batches, signed_terms, PruneConfig, RunReport, StageReport,
};
pub use scoring::{
    apply_keep, assemble_scores, channel_units, check_rho, fill_indicators, global_threshold,
    keep_top_k, kept_count, normalization_sums, prune_with_ledger, scalar_id, scalar_units,
    structured_aggregate, units_for, NormalizationSum, SignedTerms,
};
