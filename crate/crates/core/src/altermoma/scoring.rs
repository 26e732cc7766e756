use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{FusionModel, Partition};
use crate::tensor::Tensor;

use super::ledger::{ImportanceLedger, Unit};

/// Signed per-element terms aligned with the model's parameter list.
/// `reri_mu_l0` comes from the LiDAR-masked stage, `reri_mu_c0` from the
/// camera-masked stage.
#[derive(Clone, Debug, Default)]
pub struct SignedTerms {
    pub deci: Vec<Tensor>,
    pub reri_mu_l0: Option<Vec<Tensor>>,
    pub reri_mu_c0: Option<Vec<Tensor>>,
}

pub fn scalar_id(param_id: &str, index: usize) -> String {
    format!("{param_id}#{index:06}")
}

/// One unit per scalar, biases included.
pub fn scalar_units(model: &FusionModel) -> Vec<Unit> {
    model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| {
            (0..p.len()).map(move |e| Unit {
                id: scalar_id(&p.id, e),
                partition: p.partition,
                members: vec![(pi, e)],
            })
        })
        .collect()
}

/// One unit per output channel (weight column plus bias entry) of every
/// layer except the task output layer.
pub fn channel_units(model: &FusionModel) -> Vec<Unit> {
    model
        .channels()
        .into_iter()
        .map(|c| Unit {
            id: c.id,
            partition: c.partition,
            members: c.members,
        })
        .collect()
}

pub fn units_for(model: &FusionModel, structured: bool) -> Vec<Unit> {
    if structured {
        channel_units(model)
    } else {
        scalar_units(model)
    }
}

fn group(terms: &[Tensor], members: &[(usize, usize)]) -> f64 {
    members
        .iter()
        .map(|&(p, e)| terms[p].data()[e])
        .sum::<f64>()
        .abs()
}

/// Fills the indicators of every ledger unit as the absolute value of the
/// signed sum of its members' terms. Scalar units reduce to `|term|`.
pub fn fill_indicators(ledger: &mut ImportanceLedger, terms: &SignedTerms) {
    for (entry, unit) in ledger.entries.iter_mut().zip(&ledger.units) {
        entry.deci = Some(group(&terms.deci, &unit.members));
        if unit.partition != Partition::Lidar {
            entry.reri_mu_l0 = terms.reri_mu_l0.as_ref().map(|t| group(t, &unit.members));
        }
        if unit.partition != Partition::Camera {
            entry.reri_mu_c0 = terms.reri_mu_c0.as_ref().map(|t| group(t, &unit.members));
        }
    }
}

/// Per-channel ledger from signed terms. Every element of every layer
/// other than the output layer must belong to exactly one channel.
pub fn structured_aggregate(
    model: &FusionModel,
    terms: &SignedTerms,
    method: &str,
) -> Result<ImportanceLedger> {
    let units = channel_units(model);
    let mut seen: Vec<Vec<u8>> = model.params().iter().map(|p| vec![0; p.len()]).collect();
    for u in &units {
        for &(p, e) in &u.members {
            seen[p][e] += 1;
        }
    }
    let output_params: Vec<usize> = model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_output())
        .flat_map(|(li, _)| [2 * li, 2 * li + 1])
        .collect();
    for (pi, counts) in seen.iter().enumerate() {
        if output_params.contains(&pi) {
            continue;
        }
        if let Some(e) = counts.iter().position(|&c| c != 1) {
            return Err(Error::Unmapped(scalar_id(&model.params()[pi].id, e)));
        }
    }
    let mut ledger = ImportanceLedger::new(method, true, units);
    fill_indicators(&mut ledger, terms);
    Ok(ledger)
}

/// Which normalized term of which partition a sum belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationSum {
    pub partition: Partition,
    pub term: &'static str,
    pub denominator: f64,
    /// Sum of the normalized terms: 1 when the denominator is nonzero,
    /// 0 otherwise.
    pub normalized_total: f64,
}

type Getter = fn(&super::ledger::LedgerEntry) -> Option<f64>;

fn terms_of(p: Partition) -> Vec<(&'static str, Getter)> {
    let deci: (&'static str, Getter) = ("deci", |e| e.deci);
    let l0: (&'static str, Getter) = ("reri_mu_l0", |e| e.reri_mu_l0);
    let c0: (&'static str, Getter) = ("reri_mu_c0", |e| e.reri_mu_c0);
    match p {
        Partition::Camera => vec![deci, l0],
        Partition::Lidar => vec![deci, c0],
        Partition::Fusion => vec![deci, l0, c0],
    }
}

fn check_complete(ledger: &ImportanceLedger) -> Result<()> {
    let missing: Vec<String> = ledger
        .entries
        .iter()
        .filter(|e| {
            terms_of(e.partition)
                .iter()
                .any(|(_, get)| get(e).is_none())
        })
        .map(|e| e.id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingEntries(missing))
    }
}

fn denominator(ledger: &ImportanceLedger, p: Partition, get: Getter) -> f64 {
    ledger
        .entries
        .iter()
        .filter(|e| e.partition == p)
        .map(|e| get(e).unwrap_or(0.0))
        .sum()
}

fn share(v: f64, denom: f64) -> f64 {
    if denom > 0.0 {
        v / denom
    } else {
        0.0
    }
}

/// Denominators and normalized sums of every term, per partition present.
pub fn normalization_sums(ledger: &ImportanceLedger) -> Result<Vec<NormalizationSum>> {
    check_complete(ledger)?;
    let mut out = Vec::new();
    for p in Partition::ALL {
        if !ledger.entries.iter().any(|e| e.partition == p) {
            continue;
        }
        for (term, get) in terms_of(p) {
            let denom = denominator(ledger, p, get);
            let normalized_total = ledger
                .entries
                .iter()
                .filter(|e| e.partition == p)
                .map(|e| share(get(e).unwrap_or(0.0), denom))
                .sum();
            out.push(NormalizationSum {
                partition: p,
                term,
                denominator: denom,
                normalized_total,
            });
        }
    }
    Ok(out)
}

/// Backbones: `alpha * deci share - beta * reri share`. Fusion:
/// `alpha * deci share - beta/2 * each stage's reri share`. A term whose
/// partition total is zero contributes zero.
pub fn assemble_scores(ledger: &mut ImportanceLedger, alpha: f64, beta: f64) -> Result<()> {
    check_complete(ledger)?;
    let mut denoms = Vec::new();
    for p in Partition::ALL {
        denoms.push(
            terms_of(p)
                .into_iter()
                .map(|(_, get)| denominator(ledger, p, get))
                .collect::<Vec<_>>(),
        );
    }
    for e in &mut ledger.entries {
        let pi = Partition::ALL
            .iter()
            .position(|&p| p == e.partition)
            .expect("known partition");
        let d = &denoms[pi];
        let deci = alpha * share(e.deci.unwrap_or(0.0), d[0]);
        let score = match e.partition {
            Partition::Camera => deci - beta * share(e.reri_mu_l0.unwrap_or(0.0), d[1]),
            Partition::Lidar => deci - beta * share(e.reri_mu_c0.unwrap_or(0.0), d[1]),
            Partition::Fusion => {
                deci - beta / 2.0 * share(e.reri_mu_l0.unwrap_or(0.0), d[1])
                    - beta / 2.0 * share(e.reri_mu_c0.unwrap_or(0.0), d[2])
            }
        };
        e.score = Some(score);
    }
    Ok(())
}

/// `round((1 - rho) * n)`.
pub fn kept_count(n: usize, rho: f64) -> usize {
    (((1.0 - rho) * n as f64).round() as usize).min(n)
}

pub fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!(
            "pruning ratio must lie in [0, 1), got {rho}"
        )));
    }
    Ok(())
}

/// Keeps the `k` highest scores across all entries; equal scores are
/// ordered by id.
pub fn global_threshold(ids: &[String], scores: &[f64], rho: f64) -> Result<Vec<bool>> {
    check_rho(rho)?;
    if ids.len() != scores.len() {
        return Err(Error::Config(format!(
            "{} ids but {} scores",
            ids.len(),
            scores.len()
        )));
    }
    Ok(keep_top_k(ids, scores, kept_count(ids.len(), rho)))
}

/// Flags the `k` highest scores; equal scores are ordered by id.
pub fn keep_top_k(ids: &[String], scores: &[f64], k: usize) -> Vec<bool> {
    let k = k.min(ids.len());
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => ids[a].cmp(&ids[b]),
        o => o,
    });
    let mut keep = vec![false; ids.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    keep
}

/// Writes unit keep flags into the element masks. Elements outside every
/// unit keep their current mask.
pub fn apply_keep(model: &mut FusionModel, units: &[Unit], keep: &[bool]) {
    for (u, &k) in units.iter().zip(keep) {
        for &(p, e) in &u.members {
            model.params_mut()[p].mask.data_mut()[e] = if k { 1.0 } else { 0.0 };
        }
    }
}

/// Restores the snapshot, thresholds the ledger scores at `rho`, records
/// the kept flags, sets the masks and zeroes pruned values
/// (`theta = mu * theta_init`).
pub fn prune_with_ledger(
    model: &mut FusionModel,
    ledger: &mut ImportanceLedger,
    rho: f64,
) -> Result<usize> {
    let ids: Vec<String> = ledger.entries.iter().map(|e| e.id.clone()).collect();
    let keep = global_threshold(&ids, &ledger.scores(), rho)?;
    for (e, &k) in ledger.entries.iter_mut().zip(&keep) {
        e.kept = Some(k);
    }
    if model.has_snapshot() {
        model.restore()?;
    }
    model.clear_masks();
    apply_keep(model, &ledger.units, &keep);
    model.apply_masks();
    Ok(keep.iter().filter(|&&k| k).count())
}
