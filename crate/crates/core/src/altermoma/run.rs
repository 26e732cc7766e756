use serde::{Deserialize, Serialize};

use crate::data::{Batch, MultiModalDataset};
use crate::error::{Error, Result};
use crate::model::{EpochRecord, FusionModel, Partition, TrainOptions};
use crate::rng::derive_seed;

use super::indicators::{deci_terms, reactivate, reri_terms};
use super::ledger::ImportanceLedger;
use super::scoring::{
    assemble_scores, check_rho, fill_indicators, kept_count, prune_with_ledger, scalar_units,
    structured_aggregate, SignedTerms,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
    pub reactivation_batches: usize,
    pub reactivation_lr: f64,
    pub eval_batches: usize,
    pub batch_size: usize,
    pub structured: bool,
    /// End gradient on the last reactivation batch rather than averaged
    /// over the evaluation batches.
    pub literal_reri_end: bool,
    /// Stream seed for batch sampling. The experiment harness derives it
    /// from the root seed, so it is not read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            rho: 0.8,
            alpha: 1.0,
            beta: 1.0,
            reactivation_batches: 32,
            reactivation_lr: 1e-3,
            eval_batches: 8,
            batch_size: 64,
            structured: false,
            literal_reri_end: true,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        check_rho(self.rho)?;
        if !(self.alpha >= 0.0)
            || !(self.beta >= 0.0)
            || !self.alpha.is_finite()
            || !self.beta.is_finite()
        {
            return Err(Error::Config(format!(
                "alpha and beta must be finite and >= 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if self.reactivation_batches > 0
            && !(self.reactivation_lr > 0.0 && self.reactivation_lr.is_finite())
        {
            return Err(Error::Config(format!(
                "reactivation_lr must be positive when reactivation_batches > 0, got {}",
                self.reactivation_lr
            )));
        }
        if self.eval_batches == 0 {
            return Err(Error::Config("eval_batches must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// The fixed evaluation batches standing in for the full dataset.
pub fn sample_eval_batches(data: &MultiModalDataset, cfg: &PruneConfig) -> Result<Vec<Batch>> {
    Ok(data
        .batches(
            cfg.batch_size,
            derive_seed(cfg.seed, 0xe7a1),
            cfg.eval_batches,
        )?
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub masked: Partition,
    pub losses: Vec<f64>,
}

impl StageReport {
    /// Mean loss over the first and last quarter of reactivation steps.
    pub fn quartile_means(&self) -> Option<(f64, f64)> {
        let q = self.losses.len() / 4;
        if q == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((
            mean(&self.losses[..q]),
            mean(&self.losses[self.losses.len() - q..]),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub units: usize,
    pub k: usize,
    pub kept: usize,
    pub stages: Vec<StageReport>,
}

/// Computes the signed indicator terms of the full procedure: the
/// contribution terms on the unmasked model, then one masking and
/// reactivation stage per backbone. The model is left at its snapshot.
pub fn signed_terms(
    model: &mut FusionModel,
    data: &MultiModalDataset,
    cfg: &PruneConfig,
) -> Result<(SignedTerms, Vec<StageReport>)> {
    cfg.validate()?;
    if model.has_snapshot() {
        model.restore()?;
    } else {
        model.snapshot();
    }
    let eval = sample_eval_batches(data, cfg)?;
    let mut terms = SignedTerms {
        deci: deci_terms(model, &eval)?,
        reri_mu_l0: None,
        reri_mu_c0: None,
    };
    let theta_init = model.snapshot_values().expect("snapshot taken").to_vec();
    let mut stages = Vec::with_capacity(2);
    for masked in [Partition::Lidar, Partition::Camera] {
        let r = reactivate(model, masked, data, &eval, cfg)?;
        let t = reri_terms(&theta_init, &r.grad_start, &r.grad_end);
        match masked {
            Partition::Lidar => terms.reri_mu_l0 = Some(t),
            _ => terms.reri_mu_c0 = Some(t),
        }
        stages.push(StageReport {
            masked,
            losses: r.losses,
        });
        model.restore()?;
    }
    Ok((terms, stages))
}

/// Scores every unit and prunes `model` to `k` units. The model ends at
/// `mu * theta_init` with masks set; fine-tuning is separate.
pub fn run_altermoma(
    model: &mut FusionModel,
    data: &MultiModalDataset,
    cfg: &PruneConfig,
) -> Result<(ImportanceLedger, RunReport)> {
    if !model.modality_masks().is_unmasked() {
        return Err(Error::MaskedModel(
            "pruning starts from the unmasked model".into(),
        ));
    }
    model.clear_masks();
    let (terms, stages) = signed_terms(model, data, cfg)?;
    let mut ledger = if cfg.structured {
        structured_aggregate(model, &terms, "altermoma")?
    } else {
        let mut l = ImportanceLedger::new("altermoma", false, scalar_units(model));
        fill_indicators(&mut l, &terms);
        l
    };
    assemble_scores(&mut ledger, cfg.alpha, cfg.beta)?;
    let kept = prune_with_ledger(model, &mut ledger, cfg.rho)?;
    Ok((
        ledger.clone(),
        RunReport {
            units: ledger.len(),
            k: kept_count(ledger.len(), cfg.rho),
            kept,
            stages,
        },
    ))
}

/// Task-loss SGD on every partition; pruned entries stay zero.
pub fn finetune(
    model: &mut FusionModel,
    train: &MultiModalDataset,
    val: Option<&MultiModalDataset>,
    opts: &TrainOptions,
) -> Result<Vec<EpochRecord>> {
    model.train(train, val, opts, &Partition::ALL)
}
