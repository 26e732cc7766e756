//! The end-to-end pipeline shared by the binary and the tests:
//! data, pretraining, fusion training, pruning by any method, fine-tuning.

use crate::altermoma::{
    assemble_scores, fill_indicators, finetune, prune_with_ledger, run_altermoma,
    sample_eval_batches, signed_terms, structured_aggregate, units_for, ImportanceLedger,
    PruneConfig,
};
use crate::baselines::{
    imp_prune, magnitude_scores, random_scores, snip_scores, synflow_scores, Method,
};
use crate::config::{ExperimentConfig, ModelKind};
use crate::data::{generate, MultiModalDataset};
use crate::error::Result;
use crate::model::{ArchConfig, EpochRecord, FusionModel, ModalityMasks, Partition};
use crate::planted::{plant, planted_views, PlantedLayout};
use crate::rng::derive_seed;

const TAG_DATA: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_PRETRAIN: u64 = 3;
const TAG_TRAIN: u64 = 4;
const TAG_PRUNE: u64 = 5;
const TAG_FINETUNE: u64 = 6;
const TAG_IMP: u64 = 7;

/// Train/validation splits. `fit_*` is what the unpruned model is trained
/// on; `train`/`val` is what pruning and fine-tuning see. They differ only
/// for planted models.
#[derive(Clone, Debug)]
pub struct Splits {
    pub fit_train: MultiModalDataset,
    pub fit_val: MultiModalDataset,
    pub train: MultiModalDataset,
    pub val: MultiModalDataset,
}

/// Seed the dataset of `cfg` is generated with.
pub fn data_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, TAG_DATA)
}

pub fn dataset(cfg: &ExperimentConfig) -> Result<MultiModalDataset> {
    generate(&cfg.data, data_seed(cfg))
}

pub fn splits(cfg: &ExperimentConfig, ds: &MultiModalDataset) -> Result<Splits> {
    match cfg.model.kind {
        ModelKind::Standard => {
            let (train, val) = ds.train_val()?;
            Ok(Splits {
                fit_train: train.clone(),
                fit_val: val.clone(),
                train,
                val,
            })
        }
        ModelKind::Planted => {
            let (base, planted) = planted_views(ds)?;
            let (fit_train, fit_val) = base.train_val()?;
            let (train, val) = planted.train_val()?;
            Ok(Splits {
                fit_train,
                fit_val,
                train,
                val,
            })
        }
    }
}

pub fn arch(cfg: &ExperimentConfig, data: &MultiModalDataset) -> ArchConfig {
    let m = &cfg.model;
    ArchConfig {
        in_lidar: data.x_lidar.dims2().map(|d| d.1).unwrap_or(0),
        in_camera: data.x_camera.dims2().map(|d| d.1).unwrap_or(0),
        hidden_lidar: m.hidden_lidar,
        hidden_camera: m.hidden_camera,
        hidden_fusion: m.hidden_fusion,
        feat_lidar: m.feat,
        feat_camera: m.feat,
        out: cfg.data.d_y,
        loss: m.loss,
        seed: derive_seed(cfg.seed, TAG_INIT),
    }
}

/// Per-epoch training losses of each backbone.
pub type PretrainLosses = Vec<(Partition, Vec<f64>)>;

/// Builds the model and pretrains both backbones on their single-modal
/// targets. Returns the per-epoch losses of each backbone.
pub fn pretrain(cfg: &ExperimentConfig, splits: &Splits) -> Result<(FusionModel, PretrainLosses)> {
    let mut model = FusionModel::build(&arch(cfg, &splits.fit_train))?;
    let mut losses = Vec::with_capacity(2);
    for p in Partition::BACKBONES {
        let opts = cfg.pretrain.options(derive_seed(
            cfg.seed,
            TAG_PRETRAIN + 16 * p.to_byte() as u64,
        ));
        losses.push((p, model.pretrain_backbone(p, &splits.fit_train, &opts)?));
    }
    Ok((model, losses))
}

/// Trains the fusion head (and the backbones when configured) on the task
/// loss; planted models are then widened with the copied pathway. The
/// returned model carries a snapshot of its final values.
pub fn train_fusion(
    cfg: &ExperimentConfig,
    splits: &Splits,
    mut model: FusionModel,
) -> Result<(FusionModel, Vec<EpochRecord>, Option<PlantedLayout>)> {
    let trainable: &[Partition] = if cfg.train.train_backbones {
        &Partition::ALL
    } else {
        &[Partition::Fusion]
    };
    let opts = cfg.train.options(derive_seed(cfg.seed, TAG_TRAIN));
    let history = model.train(&splits.fit_train, Some(&splits.fit_val), &opts, trainable)?;
    let (mut model, layout) = match cfg.model.kind {
        ModelKind::Standard => (model, None),
        ModelKind::Planted => {
            let (m, l) = plant(&model, cfg.model.planted_copies)?;
            (m, Some(l))
        }
    };
    model.snapshot();
    Ok((model, history, layout))
}

/// Everything up to a trained, snapshotted fusion model.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub splits: Splits,
    pub model: FusionModel,
    pub pretrain_losses: PretrainLosses,
    pub history: Vec<EpochRecord>,
    pub layout: Option<PlantedLayout>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let ds = dataset(cfg)?;
    let splits = splits(cfg, &ds)?;
    let (model, pretrain_losses) = pretrain(cfg, &splits)?;
    let (model, history, layout) = train_fusion(cfg, &splits, model)?;
    Ok(Prepared {
        splits,
        model,
        pretrain_losses,
        history,
        layout,
    })
}

/// The pruning configuration with its seed derived from the root seed.
pub fn prune_config(cfg: &ExperimentConfig) -> PruneConfig {
    PruneConfig {
        seed: derive_seed(cfg.seed, TAG_PRUNE),
        ..cfg.prune.clone()
    }
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub model: FusionModel,
    pub ledger: ImportanceLedger,
    pub units: usize,
    pub k: usize,
    pub kept: usize,
    /// Validation loss right after masking, before fine-tuning.
    pub masked_val_loss: f64,
}

/// Prunes a copy of `model` (restored to its snapshot) with `method`.
pub fn prune(
    cfg: &ExperimentConfig,
    model: &FusionModel,
    train: &MultiModalDataset,
    val: &MultiModalDataset,
    method: Method,
) -> Result<PruneOutcome> {
    let pcfg = prune_config(cfg);
    pcfg.validate()?;
    let mut m = model.clone();
    if m.has_snapshot() {
        m.restore()?;
    } else {
        m.snapshot();
    }
    m.clear_masks();
    let structured = pcfg.structured;
    let ledger = match method {
        Method::AlterMoma => run_altermoma(&mut m, train, &pcfg)?.0,
        Method::Imp => {
            let opts = cfg.finetune.options(derive_seed(cfg.seed, TAG_IMP));
            imp_prune(&mut m, train, pcfg.rho, &cfg.imp, &opts, structured)?.0
        }
        _ => {
            let mut ledger = match method {
                Method::Magnitude => magnitude_scores(&m, structured),
                Method::Snip => snip_scores(&m, &sample_eval_batches(train, &pcfg)?, structured)?,
                Method::Synflow => {
                    synflow_scores(&m, cfg.synflow.iterations, pcfg.rho, structured)?
                }
                _ => random_scores(&m, pcfg.seed, structured),
            };
            prune_with_ledger(&mut m, &mut ledger, pcfg.rho)?;
            ledger
        }
    };
    finish(m, ledger, pcfg.rho, val)
}

fn finish(
    model: FusionModel,
    ledger: ImportanceLedger,
    rho: f64,
    val: &MultiModalDataset,
) -> Result<PruneOutcome> {
    let units = ledger.len();
    let kept = ledger
        .entries
        .iter()
        .filter(|e| e.kept == Some(true))
        .count();
    let masked_val_loss = model.dataset_loss(val, ModalityMasks::UNMASKED)?;
    Ok(PruneOutcome {
        model,
        ledger,
        units,
        k: crate::altermoma::kept_count(units, rho),
        kept,
        masked_val_loss,
    })
}

/// Fine-tunes the pruned model. Returns the per-epoch records; the last
/// record's validation loss is the post-fine-tune loss.
pub fn finetune_pruned(
    cfg: &ExperimentConfig,
    outcome: &mut PruneOutcome,
    train: &MultiModalDataset,
    val: &MultiModalDataset,
) -> Result<Vec<EpochRecord>> {
    let opts = cfg.finetune.options(derive_seed(cfg.seed, TAG_FINETUNE));
    finetune(&mut outcome.model, train, Some(val), &opts)
}

/// Validation loss after fine-tuning (the masked loss when `epochs = 0`).
pub fn final_val_loss(outcome: &PruneOutcome, records: &[EpochRecord]) -> f64 {
    records
        .last()
        .and_then(|r| r.val_loss)
        .unwrap_or(outcome.masked_val_loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub seed: u64,
    pub method: Method,
    pub rho: f64,
    pub k: usize,
    pub kept: usize,
    pub masked_val_loss: f64,
    pub val_loss: f64,
}

/// Prunes and fine-tunes one prepared model with every method at every
/// ratio.
pub fn compare(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    methods: &[Method],
    rhos: &[f64],
) -> Result<Vec<ComparisonRow>> {
    let s = &prepared.splits;
    let mut rows = Vec::new();
    for &rho in rhos {
        for &method in methods {
            let mut c = cfg.clone();
            c.prune.rho = rho;
            let mut out = prune(&c, &prepared.model, &s.train, &s.val, method)?;
            let rec = finetune_pruned(&c, &mut out, &s.train, &s.val)?;
            rows.push(ComparisonRow {
                seed: cfg.seed,
                method,
                rho,
                k: out.k,
                kept: out.kept,
                masked_val_loss: out.masked_val_loss,
                val_loss: final_val_loss(&out, &rec),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub beta_over_alpha: f64,
    pub seed: u64,
    pub rho: f64,
    pub val_loss: f64,
}

/// Sweeps `beta / alpha` over the configured grid for the root seed. The
/// indicators do not depend on `beta`, so they are computed once and only
/// the assembly, threshold and fine-tuning repeat.
pub fn ablate_seed(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<AblationRow>> {
    let s = &prepared.splits;
    let pcfg = prune_config(cfg);
    let mut base = prepared.model.clone();
    base.clear_masks();
    let (terms, _) = signed_terms(&mut base, &s.train, &pcfg)?;
    let mut rows = Vec::with_capacity(cfg.ablation.grid.len());
    for &ratio in &cfg.ablation.grid {
        let mut ledger = if pcfg.structured {
            structured_aggregate(&base, &terms, "altermoma")?
        } else {
            ImportanceLedger::new("altermoma", false, units_for(&base, false))
        };
        fill_indicators(&mut ledger, &terms);
        assemble_scores(&mut ledger, pcfg.alpha, pcfg.alpha * ratio)?;
        let mut m = base.clone();
        prune_with_ledger(&mut m, &mut ledger, pcfg.rho)?;
        let mut out = finish(m, ledger, pcfg.rho, &s.val)?;
        let rec = finetune_pruned(cfg, &mut out, &s.train, &s.val)?;
        rows.push(AblationRow {
            beta_over_alpha: ratio,
            seed: cfg.seed,
            rho: pcfg.rho,
            val_loss: final_val_loss(&out, &rec),
        });
    }
    Ok(rows)
}

/// One row of the gradient-difference report.
#[derive(Clone, Debug, PartialEq)]
pub struct GradDiffRow {
    pub id: String,
    pub channel: Option<String>,
    /// `|theta * g|` under the camera-only loss (LiDAR masked).
    pub camera_only: f64,
    /// `|theta * g|` under the full fusion loss.
    pub fusion: f64,
}

impl GradDiffRow {
    /// `camera_only / fusion`; 1 when both are zero.
    pub fn ratio(&self) -> f64 {
        if self.camera_only == self.fusion {
            1.0
        } else {
            self.camera_only / self.fusion
        }
    }
}

/// Per camera-backbone scalar: saliency under the camera-only loss against
/// saliency under the full fusion loss, on the pruning evaluation batches.
pub fn graddiff(
    cfg: &ExperimentConfig,
    model: &FusionModel,
    train: &MultiModalDataset,
) -> Result<Vec<GradDiffRow>> {
    let eval = sample_eval_batches(train, &prune_config(cfg))?;
    let (_, full) = model.mean_grads(&eval, ModalityMasks::UNMASKED)?;
    let (_, cam) = model.mean_grads(&eval, ModalityMasks::without(Partition::Lidar))?;
    let mut channel_of = std::collections::HashMap::new();
    for c in model.channels() {
        for m in c.members {
            channel_of.insert(m, c.id.clone());
        }
    }
    let mut rows = Vec::new();
    for (pi, p) in model.params().iter().enumerate() {
        if p.partition != Partition::Camera {
            continue;
        }
        for (e, &theta) in p.values.data().iter().enumerate() {
            rows.push(GradDiffRow {
                id: crate::altermoma::scalar_id(&p.id, e),
                channel: channel_of.get(&(pi, e)).cloned(),
                camera_only: (theta * cam.0[pi].data()[e]).abs(),
                fusion: (theta * full.0[pi].data()[e]).abs(),
            });
        }
    }
    Ok(rows)
}
