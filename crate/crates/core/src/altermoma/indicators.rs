use std::collections::BTreeMap;

use crate::data::{Batch, MultiModalDataset};
use crate::error::{Error, Result};
use crate::model::{FusionModel, Grads, ModalityMasks, Partition};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

use super::run::PruneConfig;

/// Signed contribution terms `theta * g`, with `g` the gradient of the
/// unmasked loss averaged over `eval_batches`.
pub fn deci_terms(model: &FusionModel, eval_batches: &[Batch]) -> Result<Vec<Tensor>> {
    if !model.modality_masks().is_unmasked() {
        return Err(Error::MaskedModel(
            "contribution indicator is defined on the unmasked loss".into(),
        ));
    }
    let (_, grads) = model.mean_grads(eval_batches, ModalityMasks::UNMASKED)?;
    Ok(model
        .params()
        .iter()
        .zip(&grads.0)
        .map(|(p, g)| p.values.hadamard(g).expect("aligned"))
        .collect())
}

/// Contribution indicator `|theta * g|` for every parameter, keyed by id.
pub fn deci(model: &FusionModel, eval_batches: &[Batch]) -> Result<BTreeMap<String, Tensor>> {
    let terms = deci_terms(model, eval_batches)?;
    Ok(model
        .params()
        .iter()
        .zip(terms)
        .map(|(p, t)| (p.id.clone(), t.map(f64::abs)))
        .collect())
}

/// Signed redundancy terms `theta_0 * g_start - theta_0 * g_end`.
pub fn reri_terms(theta_init: &[Tensor], grad_start: &Grads, grad_end: &Grads) -> Vec<Tensor> {
    theta_init
        .iter()
        .zip(grad_start.0.iter().zip(&grad_end.0))
        .map(|(theta, (gs, ge))| {
            let data = theta
                .data()
                .iter()
                .zip(gs.data().iter().zip(ge.data()))
                .map(|(t, (s, e))| t * s - t * e)
                .collect();
            Tensor::new(theta.shape().to_vec(), data).expect("aligned")
        })
        .collect()
}

/// Redundancy indicator `|theta_0 * g_start - theta_0 * g_end|` per id.
pub fn reri(
    theta_init: &BTreeMap<String, Tensor>,
    grad_start: &BTreeMap<String, Tensor>,
    grad_end: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>> {
    let keys = |m: &BTreeMap<String, Tensor>| m.keys().cloned().collect::<Vec<_>>();
    if keys(theta_init) != keys(grad_start) || keys(theta_init) != keys(grad_end) {
        let mut diff: Vec<String> = theta_init
            .keys()
            .chain(grad_start.keys())
            .chain(grad_end.keys())
            .filter(|k| {
                !(theta_init.contains_key(*k)
                    && grad_start.contains_key(*k)
                    && grad_end.contains_key(*k))
            })
            .cloned()
            .collect();
        diff.sort();
        diff.dedup();
        return Err(Error::IdMismatch(diff.join(", ")));
    }
    let mut out = BTreeMap::new();
    for (id, theta) in theta_init {
        let (gs, ge) = (&grad_start[id], &grad_end[id]);
        if gs.shape() != theta.shape() || ge.shape() != theta.shape() {
            return Err(Error::IdMismatch(format!(
                "shape of `{id}` differs between maps"
            )));
        }
        let t = reri_terms(
            std::slice::from_ref(theta),
            &Grads(vec![gs.clone()]),
            &Grads(vec![ge.clone()]),
        );
        out.insert(id.clone(), t[0].map(f64::abs));
    }
    Ok(out)
}

/// A loss over a flat parameter vector, evaluated on a fixed sequence of
/// training batches and on a fixed evaluation set.
pub trait MaskedObjective {
    fn theta0(&self) -> Vec<f64>;
    /// Gradient estimate of the full-data loss at `theta`.
    fn eval_grad(&self, theta: &[f64]) -> Result<Vec<f64>>;
    /// Loss and gradient on training batch `step` (zero-based) at `theta`.
    fn batch_loss_grad(&self, theta: &[f64], step: usize) -> Result<(f64, Vec<f64>)>;
    /// Forward-only loss on training batch `step`.
    fn batch_loss(&self, theta: &[f64], step: usize) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub grad_start: Vec<f64>,
    pub grad_end: Vec<f64>,
    pub theta_end: Vec<f64>,
    /// Training loss of each of the `steps` updates, before the update.
    pub losses: Vec<f64>,
}

/// Runs `steps` SGD updates from `theta0` on batches `D_1..D_B` and records
/// the start gradient (evaluation estimate at `theta0`) and the end
/// gradient at `theta_B`, either on `D_B` (`literal_end`) or on the
/// evaluation estimate. With zero steps both gradients are the evaluation
/// estimate at `theta0`.
pub fn reactivation_trajectory<O: MaskedObjective + ?Sized>(
    obj: &O,
    steps: usize,
    lr: f64,
    literal_end: bool,
) -> Result<Trajectory> {
    if steps > 0 && !(lr > 0.0) {
        return Err(Error::Config(format!(
            "reactivation learning rate must be positive, got {lr}"
        )));
    }
    let mut theta = obj.theta0();
    let grad_start = obj.eval_grad(&theta)?;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, g) = obj.batch_loss_grad(&theta, step)?;
        losses.push(loss);
        for (t, gv) in theta.iter_mut().zip(&g) {
            *t -= lr * gv;
        }
    }
    let grad_end = if steps == 0 {
        grad_start.clone()
    } else if literal_end {
        obj.batch_loss_grad(&theta, steps - 1)?.1
    } else {
        obj.eval_grad(&theta)?
    };
    Ok(Trajectory {
        grad_start,
        grad_end,
        theta_end: theta,
        losses,
    })
}

/// The masked fusion-model loss as a [`MaskedObjective`] over the values of
/// every parameter in an unmasked partition.
pub struct ModelObjective<'a> {
    template: FusionModel,
    masks: ModalityMasks,
    trainable: Vec<usize>,
    eval: &'a [Batch],
    train: Vec<Batch>,
}

impl<'a> ModelObjective<'a> {
    pub fn new(
        model: &FusionModel,
        masks: ModalityMasks,
        eval: &'a [Batch],
        train: Vec<Batch>,
    ) -> Self {
        let trainable = (0..model.params().len())
            .filter(|&i| masks.get(model.params()[i].partition))
            .collect();
        Self {
            template: model.clone(),
            masks,
            trainable,
            eval,
            train,
        }
    }

    pub fn trainable(&self) -> &[usize] {
        &self.trainable
    }

    pub fn with_theta(&self, theta: &[f64]) -> FusionModel {
        let mut m = self.template.clone();
        let mut offset = 0;
        for &i in &self.trainable {
            let p = &mut m.params_mut()[i];
            let n = p.len();
            p.values
                .data_mut()
                .copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
        m
    }

    fn flatten(&self, grads: &Grads) -> Vec<f64> {
        self.trainable
            .iter()
            .flat_map(|&i| grads.0[i].data().iter().copied())
            .collect()
    }

    /// Expands a flat trainable vector back to all parameters (zeros for
    /// masked partitions).
    pub fn expand(&self, flat: &[f64]) -> Grads {
        let mut out = Grads::zeros_like(self.template.params());
        let mut offset = 0;
        for &i in &self.trainable {
            let n = out.0[i].len();
            out.0[i]
                .data_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        out
    }
}

impl MaskedObjective for ModelObjective<'_> {
    fn theta0(&self) -> Vec<f64> {
        self.trainable
            .iter()
            .flat_map(|&i| self.template.params()[i].values.data().iter().copied())
            .collect()
    }

    fn eval_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let (_, g) = self.with_theta(theta).mean_grads(self.eval, self.masks)?;
        Ok(self.flatten(&g))
    }

    fn batch_loss_grad(&self, theta: &[f64], step: usize) -> Result<(f64, Vec<f64>)> {
        let (l, g) = self
            .with_theta(theta)
            .loss_and_grads(&self.train[step], self.masks)?;
        Ok((l, self.flatten(&g)))
    }

    fn batch_loss(&self, theta: &[f64], step: usize) -> Result<f64> {
        self.with_theta(theta)
            .masked_loss(&self.train[step], self.masks)
    }
}

#[derive(Clone, Debug)]
pub struct Reactivation {
    pub masked: Partition,
    /// Gradients over all parameters; the masked partition's entries are zero.
    pub grad_start: Grads,
    pub grad_end: Grads,
    /// The model after `B` masked training steps, modality mask still set.
    pub trained: FusionModel,
    pub losses: Vec<f64>,
}

/// Masks one backbone and trains the rest for `cfg.reactivation_batches`
/// batches, recording gradients before and after.
pub fn reactivate(
    model: &FusionModel,
    masked: Partition,
    data: &MultiModalDataset,
    eval_batches: &[Batch],
    cfg: &PruneConfig,
) -> Result<Reactivation> {
    if masked == Partition::Fusion {
        return Err(Error::Config(
            "only a backbone can be masked for reactivation".into(),
        ));
    }
    if cfg.reactivation_batches > 0 && !(cfg.reactivation_lr > 0.0) {
        return Err(Error::Config(format!(
            "reactivation_lr must be positive when reactivation_batches > 0, got {}",
            cfg.reactivation_lr
        )));
    }
    let masks = ModalityMasks::without(masked);
    let stream = derive_seed(cfg.seed, 0x2ea0 + masked.to_byte() as u64);
    let train: Vec<Batch> = if cfg.reactivation_batches > 0 {
        data.batches(cfg.batch_size, stream, cfg.reactivation_batches)?
            .collect()
    } else {
        Vec::new()
    };
    let obj = ModelObjective::new(model, masks, eval_batches, train);
    let traj = reactivation_trajectory(
        &obj,
        cfg.reactivation_batches,
        cfg.reactivation_lr,
        cfg.literal_reri_end,
    )?;
    let mut trained = obj.with_theta(&traj.theta_end);
    trained.set_modality_masks(masks);
    Ok(Reactivation {
        masked,
        grad_start: obj.expand(&traj.grad_start),
        grad_end: obj.expand(&traj.grad_end),
        trained,
        losses: traj.losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `L(theta) = theta^2` on every batch.
    struct Quadratic {
        theta0: f64,
    }

    impl MaskedObjective for Quadratic {
        fn theta0(&self) -> Vec<f64> {
            vec![self.theta0]
        }
        fn eval_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![2.0 * theta[0]])
        }
        fn batch_loss_grad(&self, theta: &[f64], _: usize) -> Result<(f64, Vec<f64>)> {
            Ok((theta[0] * theta[0], vec![2.0 * theta[0]]))
        }
        fn batch_loss(&self, theta: &[f64], _: usize) -> Result<f64> {
            Ok(theta[0] * theta[0])
        }
    }

    #[test]
    fn quadratic_single_step() {
        let t = reactivation_trajectory(&Quadratic { theta0: 1.0 }, 1, 0.1, true).unwrap();
        assert_eq!(t.grad_start, vec![2.0]);
        assert!((t.theta_end[0] - 0.8).abs() < 1e-15);
        assert!((t.grad_end[0] - 1.6).abs() < 1e-15);
        let theta = Tensor::new(vec![1], vec![1.0]).unwrap();
        let gs = Grads(vec![Tensor::new(vec![1], t.grad_start.clone()).unwrap()]);
        let ge = Grads(vec![Tensor::new(vec![1], t.grad_end.clone()).unwrap()]);
        let r = reri_terms(&[theta], &gs, &ge);
        assert!((r[0].data()[0].abs() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_equal_gradients() {
        let t = reactivation_trajectory(&Quadratic { theta0: 0.3 }, 0, 0.0, true).unwrap();
        assert_eq!(t.grad_start, t.grad_end);
    }

    #[test]
    fn nonpositive_lr_rejected_when_training() {
        assert!(reactivation_trajectory(&Quadratic { theta0: 1.0 }, 2, 0.0, true).is_err());
    }

    fn map(entries: &[(&str, f64)]) -> BTreeMap<String, Tensor> {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor::new(vec![1], vec![*v]).unwrap()))
            .collect()
    }

    #[test]
    fn reri_map_form() {
        let out = reri(
            &map(&[("a", 1.0), ("b", 0.0)]),
            &map(&[("a", 2.0), ("b", 5.0)]),
            &map(&[("a", 1.6), ("b", 1.0)]),
        )
        .unwrap();
        assert!((out["a"].data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(out["b"].data()[0], 0.0);
        let same = reri(
            &map(&[("a", 3.0)]),
            &map(&[("a", 2.0)]),
            &map(&[("a", 2.0)]),
        )
        .unwrap();
        assert_eq!(same["a"].data()[0], 0.0);
    }

    #[test]
    fn reri_id_mismatch() {
        let err = reri(
            &map(&[("a", 1.0)]),
            &map(&[("b", 1.0)]),
            &map(&[("a", 1.0)]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::IdMismatch(ref s) if s.contains('a') && s.contains('b')));
    }
}
