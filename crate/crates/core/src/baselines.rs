//! Reference pruning rules. Each produces an [`ImportanceLedger`] whose
//! scores go through the same global threshold as AlterMOMA.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::altermoma::{
    apply_keep, check_rho, keep_top_k, kept_count, units_for, ImportanceLedger, Unit,
};
use crate::data::{Batch, MultiModalDataset};
use crate::error::{Error, Result};
use crate::graph::{Feeds, Graph, NodeId};
use crate::model::{FusionModel, Partition, TrainOptions, INPUT_CAMERA, INPUT_LIDAR, INPUT_TARGET};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    AlterMoma,
    Magnitude,
    Imp,
    Snip,
    Synflow,
    Random,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::AlterMoma,
        Method::Magnitude,
        Method::Imp,
        Method::Snip,
        Method::Synflow,
        Method::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::AlterMoma => "altermoma",
            Method::Magnitude => "magnitude",
            Method::Imp => "imp",
            Method::Snip => "snip",
            Method::Synflow => "synflow",
            Method::Random => "random",
        }
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
            .ok_or_else(|| Error::UnknownMethod {
                given: s.to_owned(),
                valid: Method::ALL.iter().map(|m| m.as_str()).collect(),
            })
    }
}

fn ledger_with(
    method: &str,
    structured: bool,
    units: Vec<Unit>,
    score: impl Fn(&Unit) -> f64,
) -> ImportanceLedger {
    let scores: Vec<f64> = units.iter().map(&score).collect();
    let mut l = ImportanceLedger::new(method, structured, units);
    l.set_scores(&scores);
    l
}

/// `|theta|` per scalar; L2 norm of weights and bias per channel.
pub fn magnitude_scores(model: &FusionModel, structured: bool) -> ImportanceLedger {
    let params = model.params();
    ledger_with("magnitude", structured, units_for(model, structured), |u| {
        let sq: f64 = u
            .members
            .iter()
            .map(|&(p, e)| params[p].values.data()[e].powi(2))
            .sum();
        sq.sqrt()
    })
}

/// Connection sensitivity `|theta * g|`, with `g` the gradient averaged
/// over `eval_batches`. Per-batch products are accumulated directly from
/// the graph rather than through the model's gradient helpers.
pub fn snip_scores(
    model: &FusionModel,
    eval_batches: &[Batch],
    structured: bool,
) -> Result<ImportanceLedger> {
    if !model.modality_masks().is_unmasked() {
        return Err(Error::MaskedModel(
            "connection sensitivity uses the unmasked loss".into(),
        ));
    }
    if eval_batches.is_empty() {
        return Err(Error::Config(
            "at least one evaluation batch is required".into(),
        ));
    }
    let params = model.params();
    let values: Vec<Tensor> = params
        .iter()
        .map(|p| p.values.hadamard(&p.mask).expect("mask shape"))
        .collect();
    let mut acc: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    let (mut g, _) = model.graph(true)?;
    for b in eval_batches {
        let mut feeds = Feeds::new();
        for (p, v) in params.iter().zip(&values) {
            feeds.insert(&p.id, v);
        }
        feeds
            .insert(INPUT_LIDAR, &b.x_lidar)
            .insert(INPUT_CAMERA, &b.x_camera)
            .insert(INPUT_TARGET, &b.y);
        g.forward(&feeds)?;
        let grads = g.backward()?;
        for (pi, p) in params.iter().enumerate() {
            let gp = grads
                .get(&p.id)
                .ok_or_else(|| Error::MissingGradient(p.id.clone()))?;
            for (e, slot) in acc[pi].iter_mut().enumerate() {
                *slot += p.values.data()[e] * p.mask.data()[e] * gp.data()[e] * p.mask.data()[e];
            }
        }
    }
    let n = eval_batches.len() as f64;
    Ok(ledger_with(
        "snip",
        structured,
        units_for(model, structured),
        |u| {
            u.members
                .iter()
                .map(|&(p, e)| acc[p][e] / n)
                .sum::<f64>()
                .abs()
        },
    ))
}

/// `theta * dR/dtheta` where `R` is the summed output of the network with
/// every parameter replaced by its absolute value and an all-ones input.
/// `graph` must produce its output at `output`; `inputs` name the input
/// leaves and their widths.
pub fn synflow_saliency(
    graph: &mut Graph,
    output: NodeId,
    params: &[(String, Tensor)],
    inputs: &[(&str, usize)],
) -> Result<Vec<Tensor>> {
    let loss = graph.sum(output);
    graph.set_loss(loss)?;
    let abs: Vec<Tensor> = params.iter().map(|(_, t)| t.map(f64::abs)).collect();
    let ones: Vec<Tensor> = inputs.iter().map(|&(_, w)| Tensor::ones(&[1, w])).collect();
    let mut feeds = Feeds::new();
    for ((id, _), v) in params.iter().zip(&abs) {
        feeds.insert(id, v);
    }
    for ((name, _), v) in inputs.iter().zip(&ones) {
        feeds.insert(name, v);
    }
    graph.forward(&feeds)?;
    let grads = graph.backward()?;
    params
        .iter()
        .zip(&abs)
        .map(|((id, _), a)| {
            let g = grads
                .get(id)
                .ok_or_else(|| Error::MissingGradient(id.clone()))?;
            a.hadamard(g)
        })
        .collect()
}

fn model_synflow(model: &FusionModel, mask: &[Tensor]) -> Result<Vec<Tensor>> {
    let (mut g, out) = model.graph(false)?;
    let params: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .zip(mask)
        .map(|(p, m)| Ok((p.id.clone(), p.values.hadamard(m)?)))
        .collect::<Result<_>>()?;
    let arch = model.arch();
    synflow_saliency(
        &mut g,
        out,
        &params,
        &[(INPUT_LIDAR, arch.in_lidar), (INPUT_CAMERA, arch.in_camera)],
    )
}

/// Kept counts of an `rounds`-step schedule ending at `k`:
/// `round(n * (k/n)^(r/rounds))`, exact `k` at the last round.
fn schedule(n: usize, k: usize, rounds: usize) -> Vec<usize> {
    let frac = k as f64 / n as f64;
    (1..=rounds)
        .map(|r| {
            if r == rounds {
                k
            } else {
                (n as f64 * frac.powf(r as f64 / rounds as f64)).round() as usize
            }
        })
        .collect()
}

/// Score of a unit pruned in round `r` of `rounds`: negative, lower for
/// earlier rounds, so the final top-k is exactly the survivor set.
fn pruned_score(r: usize, rounds: usize) -> f64 {
    -((rounds - r + 1) as f64)
}

fn unit_sum(t: &[Tensor], u: &Unit) -> f64 {
    u.members.iter().map(|&(p, e)| t[p].data()[e]).sum()
}

/// Iterative data-free synaptic-flow scores. Each round rescores the
/// surviving network and removes units toward `k = round((1 - rho) n)`
/// on a geometric schedule.
pub fn synflow_scores(
    model: &FusionModel,
    iterations: usize,
    rho: f64,
    structured: bool,
) -> Result<ImportanceLedger> {
    if iterations == 0 {
        return Err(Error::Config("synflow needs at least one iteration".into()));
    }
    check_rho(rho)?;
    let units = units_for(model, structured);
    let ids: Vec<String> = units.iter().map(|u| u.id.clone()).collect();
    let k = kept_count(units.len(), rho);
    let mut mask: Vec<Tensor> = model.params().iter().map(|p| p.mask.clone()).collect();
    let mut alive = vec![true; units.len()];
    let mut scores = vec![0.0; units.len()];
    for (r, &keep_r) in schedule(units.len(), k, iterations).iter().enumerate() {
        let sal = model_synflow(model, &mask)?;
        for (i, u) in units.iter().enumerate() {
            if alive[i] {
                scores[i] = unit_sum(&sal, u);
            }
        }
        let round_keep = keep_top_k(&ids, &scores, keep_r);
        for (i, u) in units.iter().enumerate() {
            if alive[i] && !round_keep[i] {
                alive[i] = false;
                scores[i] = pruned_score(r + 1, iterations);
                for &(p, e) in &u.members {
                    mask[p].data_mut()[e] = 0.0;
                }
            }
        }
    }
    let mut l = ImportanceLedger::new("synflow", structured, units);
    l.set_scores(&scores);
    Ok(l)
}

/// Uniform(0, 1) scores, deterministic per seed.
pub fn random_scores(model: &FusionModel, seed: u64, structured: bool) -> ImportanceLedger {
    let mut rng = stream_rng(seed, 0x7a4d);
    let units = units_for(model, structured);
    let scores: Vec<f64> = units.iter().map(|_| rng.gen::<f64>()).collect();
    let mut l = ImportanceLedger::new("random", structured, units);
    l.set_scores(&scores);
    l
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpConfig {
    pub rounds: usize,
    pub epochs_per_round: usize,
}

impl Default for ImpConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            epochs_per_round: 2,
        }
    }
}

/// Iterative magnitude pruning with rewinding. Each round trains the
/// surviving network, drops the smallest magnitudes toward `k`, and
/// rewinds survivors to the snapshot. Masks only ever shrink. Returns the
/// ledger and the surviving-unit count after each round; the model ends at
/// `mu * theta_init`.
pub fn imp_prune(
    model: &mut FusionModel,
    train: &MultiModalDataset,
    rho: f64,
    cfg: &ImpConfig,
    opts: &TrainOptions,
    structured: bool,
) -> Result<(ImportanceLedger, Vec<usize>)> {
    if cfg.rounds == 0 {
        return Err(Error::Config("imp needs at least one round".into()));
    }
    check_rho(rho)?;
    if !model.has_snapshot() {
        model.snapshot();
    }
    model.restore()?;
    model.clear_masks();
    let units = units_for(model, structured);
    let ids: Vec<String> = units.iter().map(|u| u.id.clone()).collect();
    let k = kept_count(units.len(), rho);
    let mut alive = vec![true; units.len()];
    let mut scores = vec![0.0; units.len()];
    let mut counts = Vec::with_capacity(cfg.rounds);
    for (r, &keep_r) in schedule(units.len(), k, cfg.rounds).iter().enumerate() {
        let round_opts = TrainOptions {
            epochs: cfg.epochs_per_round,
            seed: opts.seed.wrapping_add(r as u64),
            ..opts.clone()
        };
        model.train(train, None, &round_opts, &Partition::ALL)?;
        let params = model.params();
        for (i, u) in units.iter().enumerate() {
            if alive[i] {
                scores[i] = u
                    .members
                    .iter()
                    .map(|&(p, e)| params[p].values.data()[e].powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        let round_keep = keep_top_k(&ids, &scores, keep_r);
        for i in 0..units.len() {
            if alive[i] && !round_keep[i] {
                alive[i] = false;
                scores[i] = pruned_score(r + 1, cfg.rounds);
            }
        }
        model.restore()?;
        model.clear_masks();
        apply_keep(model, &units, &alive);
        model.apply_masks();
        counts.push(alive.iter().filter(|&&a| a).count());
    }
    let mut l = ImportanceLedger::new("imp", structured, units);
    l.set_scores(&scores);
    for (e, &a) in l.entries.iter_mut().zip(&alive) {
        e.kept = Some(a);
    }
    Ok((l, counts))
}
