//! Two-backbone fusion model: LiDAR and camera MLP backbones whose features
//! are concatenated and read by an MLP fusion head.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Batch, MultiModalDataset};
use crate::error::{Error, Result};
use crate::graph::{Feeds, Graph, NodeId};
use crate::rng::stream_rng;
use crate::sgd::sgd_step;
use crate::tensor::Tensor;

pub const INPUT_LIDAR: &str = "x_lidar";
pub const INPUT_CAMERA: &str = "x_camera";
pub const INPUT_TARGET: &str = "target";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Lidar,
    Camera,
    Fusion,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Lidar, Partition::Camera, Partition::Fusion];
    pub const BACKBONES: [Partition; 2] = [Partition::Lidar, Partition::Camera];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Lidar => "lidar",
            Partition::Camera => "camera",
            Partition::Fusion => "fusion",
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            Partition::Lidar => 0,
            Partition::Camera => 1,
            Partition::Fusion => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Partition::Lidar),
            1 => Some(Partition::Camera),
            2 => Some(Partition::Fusion),
            _ => None,
        }
    }

    /// The backbone that is not `self`. Only meaningful for backbones.
    pub fn other_backbone(self) -> Partition {
        match self {
            Partition::Lidar => Partition::Camera,
            Partition::Camera => Partition::Lidar,
            Partition::Fusion => panic!("fusion partition has no opposite backbone"),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Modality-level masks `(mu_l, mu_c, mu_f)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModalityMasks {
    pub lidar: bool,
    pub camera: bool,
    pub fusion: bool,
}

impl ModalityMasks {
    pub const UNMASKED: ModalityMasks = ModalityMasks {
        lidar: true,
        camera: true,
        fusion: true,
    };

    /// All partitions active except `p`.
    pub fn without(p: Partition) -> Self {
        let mut m = Self::UNMASKED;
        m.set(p, false);
        m
    }

    pub fn get(&self, p: Partition) -> bool {
        match p {
            Partition::Lidar => self.lidar,
            Partition::Camera => self.camera,
            Partition::Fusion => self.fusion,
        }
    }

    pub fn set(&mut self, p: Partition, on: bool) {
        match p {
            Partition::Lidar => self.lidar = on,
            Partition::Camera => self.camera = on,
            Partition::Fusion => self.fusion = on,
        }
    }

    pub fn is_unmasked(&self) -> bool {
        *self == Self::UNMASKED
    }
}

impl Default for ModalityMasks {
    fn default() -> Self {
        Self::UNMASKED
    }
}

/// One trainable tensor with its partition tag and elementwise binary mask.
///
/// Structured pruning writes whole channels into the elementwise mask; the
/// grouping itself lives in [`FusionModel::channels`].
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub partition: Partition,
    pub values: Tensor,
    pub mask: Tensor,
}

impl Parameter {
    pub fn new(id: impl Into<String>, partition: Partition, values: Tensor) -> Self {
        let mask = Tensor::ones(values.shape());
        Self {
            id: id.into(),
            partition,
            values,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `mask * modality * values`, computed elementwise.
    pub fn effective(&self, modality_on: bool) -> Tensor {
        let mu = if modality_on { 1.0 } else { 0.0 };
        let data = self
            .values
            .data()
            .iter()
            .zip(self.mask.data())
            .map(|(v, m)| mu * (m * v))
            .collect();
        Tensor::new(self.values.shape().to_vec(), data).expect("same shape")
    }

    pub fn kept(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }
}

/// Gradients aligned with a model's parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn zeros_like(params: &[Parameter]) -> Self {
        Grads(
            params
                .iter()
                .map(|p| Tensor::zeros(p.values.shape()))
                .collect(),
        )
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.0 {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn to_map(&self, params: &[Parameter]) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .zip(&self.0)
            .map(|(p, g)| (p.id.clone(), g.clone()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    SoftmaxCrossEntropy,
}

/// Layer widths of the fusion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_lidar: usize,
    pub in_camera: usize,
    pub hidden_lidar: usize,
    pub hidden_camera: usize,
    pub hidden_fusion: usize,
    pub feat_lidar: usize,
    pub feat_camera: usize,
    pub out: usize,
    #[serde(default)]
    pub loss: LossKind,
    pub seed: u64,
}

impl ArchConfig {
    /// Same hidden width everywhere.
    pub fn uniform(
        in_lidar: usize,
        in_camera: usize,
        hidden: usize,
        feat: usize,
        out: usize,
        seed: u64,
    ) -> Self {
        Self {
            in_lidar,
            in_camera,
            hidden_lidar: hidden,
            hidden_camera: hidden,
            hidden_fusion: hidden,
            feat_lidar: feat,
            feat_camera: feat,
            out,
            loss: LossKind::Mse,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("in_lidar", self.in_lidar),
            ("in_camera", self.in_camera),
            ("hidden_lidar", self.hidden_lidar),
            ("hidden_camera", self.hidden_camera),
            ("hidden_fusion", self.hidden_fusion),
            ("feat_lidar", self.feat_lidar),
            ("feat_camera", self.feat_camera),
            ("out", self.out),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Dense layers in forward order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let backbone = |p: Partition, input: usize, hidden: usize, feat: usize| {
            let prefix = p.as_str();
            vec![
                LayerSpec::new(prefix, "fc1", p, input, hidden, true),
                LayerSpec::new(prefix, "fc2", p, hidden, hidden, true),
                LayerSpec::new(prefix, "fc3", p, hidden, feat, false),
            ]
        };
        let mut layers = backbone(
            Partition::Lidar,
            self.in_lidar,
            self.hidden_lidar,
            self.feat_lidar,
        );
        layers.extend(backbone(
            Partition::Camera,
            self.in_camera,
            self.hidden_camera,
            self.feat_camera,
        ));
        layers.push(LayerSpec::new(
            "fusion",
            "fc1",
            Partition::Fusion,
            self.feat_lidar + self.feat_camera,
            self.hidden_fusion,
            true,
        ));
        layers.push(LayerSpec::new(
            "fusion",
            "fc2",
            Partition::Fusion,
            self.hidden_fusion,
            self.out,
            false,
        ));
        layers
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.fan_in * l.fan_out + l.fan_out)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub partition: Partition,
    pub fan_in: usize,
    pub fan_out: usize,
    pub relu: bool,
}

impl LayerSpec {
    fn new(
        prefix: &str,
        layer: &str,
        partition: Partition,
        fan_in: usize,
        fan_out: usize,
        relu: bool,
    ) -> Self {
        Self {
            name: format!("{prefix}/{layer}"),
            partition,
            fan_in,
            fan_out,
            relu,
        }
    }

    pub fn weight_id(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn bias_id(&self) -> String {
        format!("{}/bias", self.name)
    }

    /// The task output layer; its channels are the model outputs.
    pub fn is_output(&self) -> bool {
        self.name == "fusion/fc2"
    }
}

/// An output channel: column `index` of a layer's weight plus its bias entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub id: String,
    pub partition: Partition,
    pub layer: usize,
    pub index: usize,
    /// `(parameter index, flat element index)` pairs.
    pub members: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    arch: ArchConfig,
    layers: Vec<LayerSpec>,
    params: Vec<Parameter>,
    modality: ModalityMasks,
    init_snapshot: Option<Vec<Tensor>>,
}

impl FusionModel {
    /// Seeded Glorot-uniform initialisation of every weight and bias.
    pub fn build(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layers();
        let mut rng = stream_rng(arch.seed, 0x1417);
        let mut params = Vec::with_capacity(layers.len() * 2);
        for layer in &layers {
            let s = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..layer.fan_in * layer.fan_out)
                .map(|_| rng.gen_range(-s..=s))
                .collect();
            let b: Vec<f64> = (0..layer.fan_out).map(|_| rng.gen_range(-s..=s)).collect();
            params.push(Parameter::new(
                layer.weight_id(),
                layer.partition,
                Tensor::matrix(layer.fan_in, layer.fan_out, w)?,
            ));
            params.push(Parameter::new(
                layer.bias_id(),
                layer.partition,
                Tensor::new(vec![layer.fan_out], b)?,
            ));
        }
        Ok(Self {
            arch: arch.clone(),
            layers,
            params,
            modality: ModalityMasks::UNMASKED,
            init_snapshot: None,
        })
    }

    /// Reassembles a model from parameters whose ids and shapes must match
    /// the layout `arch` implies.
    pub fn from_parameters(arch: &ArchConfig, params: Vec<Parameter>) -> Result<Self> {
        let mut model = Self::build(arch)?;
        if params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (slot, p) in model.params.iter_mut().zip(params) {
            if slot.id != p.id
                || slot.values.shape() != p.values.shape()
                || slot.partition != p.partition
            {
                return Err(Error::Config(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.id,
                    p.values.shape(),
                    slot.id,
                    slot.values.shape()
                )));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_index(&self, id: &str) -> Option<usize> {
        self.params.iter().position(|p| p.id == id)
    }

    pub fn param(&self, id: &str) -> Result<&Parameter> {
        self.params
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::UnknownParameter(id.to_owned()))
    }

    pub fn param_mut(&mut self, id: &str) -> Result<&mut Parameter> {
        self.params
            .iter_mut()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::UnknownParameter(id.to_owned()))
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    pub fn partition_scalars(&self, p: Partition) -> usize {
        self.params
            .iter()
            .filter(|q| q.partition == p)
            .map(Parameter::len)
            .sum()
    }

    pub fn kept_scalars(&self) -> usize {
        self.params.iter().map(Parameter::kept).sum()
    }

    pub fn modality_masks(&self) -> ModalityMasks {
        self.modality
    }

    pub fn set_modality_masks(&mut self, masks: ModalityMasks) {
        self.modality = masks;
    }

    pub fn set_modality(&mut self, p: Partition, on: bool) {
        self.modality.set(p, on);
    }

    /// Output channels of every layer that structured pruning may remove.
    /// The task output layer is excluded.
    pub fn channels(&self) -> Vec<Channel> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.is_output() {
                continue;
            }
            let w = 2 * li;
            let b = w + 1;
            for j in 0..layer.fan_out {
                let mut members: Vec<(usize, usize)> = (0..layer.fan_in)
                    .map(|i| (w, i * layer.fan_out + j))
                    .collect();
                members.push((b, j));
                out.push(Channel {
                    id: format!("{}/ch{:04}", layer.name, j),
                    partition: layer.partition,
                    layer: li,
                    index: j,
                    members,
                });
            }
        }
        out
    }

    /// Builds the forward graph. Returns the graph (loss attached when
    /// `with_loss`) and the prediction node.
    pub fn graph(&self, with_loss: bool) -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let mut feats = Vec::with_capacity(2);
        for (input, part) in [
            (INPUT_LIDAR, Partition::Lidar),
            (INPUT_CAMERA, Partition::Camera),
        ] {
            let mut h = g.input(input);
            for l in self.layers.iter().filter(|l| l.partition == part) {
                h = g.dense(h, &l.weight_id(), &l.bias_id(), l.relu);
            }
            feats.push(h);
        }
        let mut h = g.concat(feats[0], feats[1]);
        for l in self
            .layers
            .iter()
            .filter(|l| l.partition == Partition::Fusion)
        {
            h = g.dense(h, &l.weight_id(), &l.bias_id(), l.relu);
        }
        if with_loss {
            let t = g.input(INPUT_TARGET);
            let loss = match self.arch.loss {
                LossKind::Mse => g.mse(h, t),
                LossKind::SoftmaxCrossEntropy => g.softmax_cross_entropy(h, t),
            };
            g.set_loss(loss)?;
        }
        Ok((g, h))
    }

    /// Parameter values with element masks and the given modality masks
    /// folded in. Original values are not touched.
    pub fn effective_values(&self, masks: ModalityMasks) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| p.effective(masks.get(p.partition)))
            .collect()
    }

    fn check_masks(masks: ModalityMasks) -> Result<()> {
        if !masks.lidar && !masks.camera && !masks.fusion {
            return Err(Error::AllMasked);
        }
        Ok(())
    }

    /// Loss of the model with each partition multiplied by its modality
    /// mask and element masks.
    pub fn masked_loss(&self, batch: &Batch, masks: ModalityMasks) -> Result<f64> {
        Self::check_masks(masks)?;
        let eff = self.effective_values(masks);
        let (mut g, _) = self.graph(true)?;
        let feeds = self.feeds(&eff, batch, true);
        g.forward(&feeds)
    }

    /// Loss under the model's current modality masks.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.masked_loss(batch, self.modality)
    }

    /// Loss and gradient with respect to the raw parameter values.
    ///
    /// The gradient already carries the mask factor, so masked entries
    /// and masked partitions receive exactly zero.
    pub fn loss_and_grads(&self, batch: &Batch, masks: ModalityMasks) -> Result<(f64, Grads)> {
        Self::check_masks(masks)?;
        let eff = self.effective_values(masks);
        let (mut g, _) = self.graph(true)?;
        let loss = {
            let feeds = self.feeds(&eff, batch, true);
            g.forward(&feeds)?
        };
        let mut by_id = g.backward()?;
        let mut grads = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let mut gt = by_id
                .remove(&p.id)
                .ok_or_else(|| Error::MissingGradient(p.id.clone()))?;
            let mu = if masks.get(p.partition) { 1.0 } else { 0.0 };
            for (gv, m) in gt.data_mut().iter_mut().zip(p.mask.data()) {
                *gv *= mu * m;
            }
            grads.push(gt);
        }
        Ok((loss, Grads(grads)))
    }

    /// Gradient averaged over several batches, plus the mean loss.
    pub fn mean_grads(&self, batches: &[Batch], masks: ModalityMasks) -> Result<(f64, Grads)> {
        if batches.is_empty() {
            return Err(Error::Config("at least one batch is required".into()));
        }
        let mut acc = Grads::zeros_like(&self.params);
        let mut loss = 0.0;
        for b in batches {
            let (l, g) = self.loss_and_grads(b, masks)?;
            loss += l;
            acc.add_scaled(&g, 1.0);
        }
        let n = batches.len() as f64;
        acc.scale(1.0 / n);
        Ok((loss / n, acc))
    }

    /// Model outputs for the given inputs under the given modality masks.
    pub fn predict(
        &self,
        x_lidar: &Tensor,
        x_camera: &Tensor,
        masks: ModalityMasks,
    ) -> Result<Tensor> {
        let eff = self.effective_values(masks);
        let (mut g, out) = self.graph(false)?;
        let mut feeds = Feeds::new();
        for (p, v) in self.params.iter().zip(&eff) {
            feeds.insert(&p.id, v);
        }
        feeds
            .insert(INPUT_LIDAR, x_lidar)
            .insert(INPUT_CAMERA, x_camera);
        g.evaluate(&feeds)?;
        Ok(g.value(out).expect("evaluated").clone())
    }

    fn feeds<'a>(&'a self, eff: &'a [Tensor], batch: &'a Batch, with_target: bool) -> Feeds<'a> {
        let mut feeds = Feeds::new();
        for (p, v) in self.params.iter().zip(eff) {
            feeds.insert(&p.id, v);
        }
        feeds
            .insert(INPUT_LIDAR, &batch.x_lidar)
            .insert(INPUT_CAMERA, &batch.x_camera);
        if with_target {
            feeds.insert(INPUT_TARGET, &batch.y);
        }
        feeds
    }

    /// Deep copy of all parameter values. Masks are not part of it.
    pub fn snapshot(&mut self) {
        self.init_snapshot = Some(self.params.iter().map(|p| p.values.clone()).collect());
    }

    pub fn has_snapshot(&self) -> bool {
        self.init_snapshot.is_some()
    }

    pub fn snapshot_values(&self) -> Option<&[Tensor]> {
        self.init_snapshot.as_deref()
    }

    /// Returns every parameter value to the last snapshot, bit-identically.
    pub fn restore(&mut self) -> Result<()> {
        let snap = self.init_snapshot.as_ref().ok_or(Error::NoSnapshot)?;
        for (p, v) in self.params.iter_mut().zip(snap) {
            p.values = v.clone();
        }
        Ok(())
    }

    /// Sets every element mask back to one.
    pub fn clear_masks(&mut self) {
        for p in &mut self.params {
            p.mask = Tensor::ones(p.values.shape());
        }
    }

    /// Multiplies values by their element masks in place (`theta = mu * theta`).
    pub fn apply_masks(&mut self) {
        for p in &mut self.params {
            let eff = p.effective(true);
            p.values = eff;
        }
    }

    /// Pretrains one backbone on its single-modal target through a
    /// temporary linear head, which is discarded afterwards. Returns the
    /// mean training loss of each epoch.
    pub fn pretrain_backbone(
        &mut self,
        modality: Partition,
        data: &MultiModalDataset,
        opts: &TrainOptions,
    ) -> Result<Vec<f64>> {
        if modality == Partition::Fusion {
            return Err(Error::Config(
                "pretraining applies to the lidar or camera backbone only".into(),
            ));
        }
        opts.validate()?;
        let (input, aux_target) = match modality {
            Partition::Lidar => (&data.x_lidar, &data.aux_lidar),
            _ => (&data.x_camera, &data.aux_camera),
        };
        let aux_dim = aux_target.dims2().map(|(_, c)| c).unwrap_or(1);
        let feat = match modality {
            Partition::Lidar => self.arch.feat_lidar,
            _ => self.arch.feat_camera,
        };
        let mut rng = stream_rng(opts.seed, 0xa0 + modality.to_byte() as u64);
        let s = (6.0 / (feat + aux_dim) as f64).sqrt();
        let mut head = vec![
            Parameter::new(
                "aux/weight",
                modality,
                Tensor::matrix(
                    feat,
                    aux_dim,
                    (0..feat * aux_dim).map(|_| rng.gen_range(-s..=s)).collect(),
                )?,
            ),
            Parameter::new("aux/bias", modality, Tensor::zeros(&[aux_dim])),
        ];

        let mut g = Graph::new();
        let mut h = g.input("x");
        for l in self.layers.iter().filter(|l| l.partition == modality) {
            h = g.dense(h, &l.weight_id(), &l.bias_id(), l.relu);
        }
        let h = g.dense(h, "aux/weight", "aux/bias", false);
        let t = g.input("t");
        let loss = g.mse(h, t);
        g.set_loss(loss)?;

        let owned: Vec<usize> = (0..self.params.len())
            .filter(|&i| self.params[i].partition == modality)
            .collect();
        let per_epoch = data.len() / opts.batch_size.max(1);
        let plan = batch_indices(
            data.len(),
            opts.batch_size,
            opts.seed,
            Some(opts.epochs * per_epoch),
        )?;
        let mut epoch_losses = Vec::with_capacity(opts.epochs);
        for epoch_plan in plan.chunks(per_epoch) {
            let mut total = 0.0;
            for idx in epoch_plan {
                let x = input.select_rows(idx)?;
                let y = aux_target.select_rows(idx)?;
                let eff: Vec<Tensor> = owned
                    .iter()
                    .map(|&i| self.params[i].effective(true))
                    .collect();
                let mut feeds = Feeds::new();
                for (&i, v) in owned.iter().zip(&eff) {
                    feeds.insert(&self.params[i].id, v);
                }
                for p in &head {
                    feeds.insert(&p.id, &p.values);
                }
                feeds.insert("x", &x).insert("t", &y);
                total += g.forward(&feeds)?;
                let mut grads = g.backward()?;
                let mut backbone_params: Vec<Parameter> =
                    owned.iter().map(|&i| self.params[i].clone()).collect();
                let bb_grads = take_grads(&mut grads, &backbone_params)?;
                sgd_step(&mut backbone_params, &bb_grads, opts.lr)?;
                for (&i, p) in owned.iter().zip(backbone_params) {
                    self.params[i] = p;
                }
                let head_grads = take_grads(&mut grads, &head)?;
                sgd_step(&mut head, &head_grads, opts.lr)?;
            }
            epoch_losses.push(total / epoch_plan.len() as f64);
        }
        Ok(epoch_losses)
    }

    /// SGD on the task loss. Only partitions listed in `trainable` change;
    /// element masks are honoured so pruned entries stay zero.
    pub fn train(
        &mut self,
        train: &MultiModalDataset,
        val: Option<&MultiModalDataset>,
        opts: &TrainOptions,
        trainable: &[Partition],
    ) -> Result<Vec<EpochRecord>> {
        opts.validate()?;
        let masks = self.modality;
        let per_epoch = train.len() / opts.batch_size.max(1);
        let plan = batch_indices(
            train.len(),
            opts.batch_size,
            opts.seed,
            Some(opts.epochs * per_epoch),
        )?;
        let mut records = Vec::with_capacity(opts.epochs);
        for (epoch, epoch_plan) in plan.chunks(per_epoch).enumerate() {
            let mut total = 0.0;
            for idx in epoch_plan {
                let batch = train.gather(idx)?;
                let (loss, mut grads) = self.loss_and_grads(&batch, masks)?;
                total += loss;
                for (p, g) in self.params.iter().zip(grads.0.iter_mut()) {
                    if !trainable.contains(&p.partition) {
                        g.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                sgd_step(&mut self.params, &grads, opts.lr)?;
            }
            let val_loss = match val {
                Some(v) => Some(self.masked_loss(&v.full_batch()?, masks)?),
                None => None,
            };
            records.push(EpochRecord {
                epoch: epoch + 1,
                train_loss: total / epoch_plan.len() as f64,
                val_loss,
            });
        }
        Ok(records)
    }

    /// Loss over every sample of `data` in one pass.
    pub fn dataset_loss(&self, data: &MultiModalDataset, masks: ModalityMasks) -> Result<f64> {
        self.masked_loss(&data.full_batch()?, masks)
    }
}

fn take_grads(grads: &mut BTreeMap<String, Tensor>, params: &[Parameter]) -> Result<Grads> {
    params
        .iter()
        .map(|p| {
            grads
                .remove(&p.id)
                .ok_or_else(|| Error::MissingGradient(p.id.clone()))
        })
        .collect::<Result<Vec<_>>>()
        .map(Grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}
