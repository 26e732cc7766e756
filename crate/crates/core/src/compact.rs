//! Physically removing pruned channels, and counting multiply-accumulates.
//!
//! A channel counts as removed when every member (weight column and bias
//! entry) is masked. Its output is then exactly zero, so dropping it and
//! the downstream weight rows that read it leaves the outputs unchanged.
//! MACs are the multiply-accumulates of the dense layers per sample:
//! `sum(fan_in * fan_out)`; bias adds are not counted.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{FusionModel, ModalityMasks, Partition};
use crate::tensor::Tensor;

/// A dense layer stored as plain row-major vectors, so that a layer whose
/// channels were all removed can have zero width.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactLayer {
    pub name: String,
    pub partition: Partition,
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
    /// Indices of the surviving output channels in the original layer.
    pub kept: Vec<usize>,
}

impl CompactLayer {
    pub fn macs(&self) -> usize {
        self.fan_in * self.fan_out
    }

    /// Same accumulation order as the graph's matmul and bias kernels, so
    /// removing zero terms does not change any rounding.
    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (k, n) = (self.fan_in, self.fan_out);
        let mut out = vec![0.0; rows * n];
        for i in 0..rows {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = x[i * k + p];
                for (o, w) in out_row.iter_mut().zip(&self.weight[p * n..(p + 1) * n]) {
                    *o += a_ip * w;
                }
            }
            for (o, b) in out_row.iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        if self.relu {
            for v in &mut out {
                *v = if *v > 0.0 { *v } else { 0.0 };
            }
        }
        out
    }
}

/// A fusion model with its removed channels cut out. Layers are in the
/// same order as the source model's.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactModel {
    pub layers: Vec<CompactLayer>,
}

/// Per layer, which output channels are removed. The output layer never
/// loses channels.
pub fn removed_channels(model: &FusionModel) -> Vec<Vec<bool>> {
    let mut out: Vec<Vec<bool>> = model
        .layers()
        .iter()
        .map(|l| vec![false; l.fan_out])
        .collect();
    for c in model.channels() {
        out[c.layer][c.index] = c
            .members
            .iter()
            .all(|&(p, e)| model.params()[p].mask.data()[e] == 0.0);
    }
    out
}

fn kept(removed: &[bool]) -> Vec<usize> {
    (0..removed.len()).filter(|&j| !removed[j]).collect()
}

/// Input rows each layer keeps, given the channels removed upstream.
fn kept_inputs(model: &FusionModel, removed: &[Vec<bool>]) -> Vec<Vec<usize>> {
    let layers = model.layers();
    let mut out = Vec::with_capacity(layers.len());
    for (li, l) in layers.iter().enumerate() {
        let name = l.name.as_str();
        let rows = if name.ends_with("/fc1") && l.partition != Partition::Fusion {
            (0..l.fan_in).collect()
        } else if l.partition == Partition::Fusion && name.ends_with("/fc1") {
            let feat_l = layers
                .iter()
                .position(|x| x.name == "lidar/fc3")
                .expect("lidar features");
            let feat_c = layers
                .iter()
                .position(|x| x.name == "camera/fc3")
                .expect("camera features");
            let offset = layers[feat_l].fan_out;
            let mut rows = kept(&removed[feat_l]);
            rows.extend(kept(&removed[feat_c]).into_iter().map(|j| j + offset));
            rows
        } else {
            kept(&removed[li - 1])
        };
        out.push(rows);
    }
    out
}

/// Cuts every removed channel out of `model`, using its values with the
/// element masks folded in.
pub fn compact(model: &FusionModel) -> Result<CompactModel> {
    if !model.modality_masks().is_unmasked() {
        return Err(Error::MaskedModel(
            "compaction works on the unmasked model".into(),
        ));
    }
    let removed = removed_channels(model);
    let rows = kept_inputs(model, &removed);
    let eff = model.effective_values(ModalityMasks::UNMASKED);
    let mut layers = Vec::new();
    for (li, l) in model.layers().iter().enumerate() {
        let cols = kept(&removed[li]);
        let w = &eff[2 * li];
        let b = &eff[2 * li + 1];
        let mut data = Vec::with_capacity(rows[li].len() * cols.len());
        for &r in &rows[li] {
            for &c in &cols {
                data.push(w.data()[r * l.fan_out + c]);
            }
        }
        layers.push(CompactLayer {
            name: l.name.clone(),
            partition: l.partition,
            fan_in: rows[li].len(),
            fan_out: cols.len(),
            weight: data,
            bias: cols.iter().map(|&c| b.data()[c]).collect(),
            relu: l.relu,
            kept: cols,
        });
    }
    Ok(CompactModel { layers })
}

impl CompactModel {
    pub fn macs(&self) -> usize {
        self.layers.iter().map(CompactLayer::macs).sum()
    }

    /// Outputs for the given inputs.
    pub fn predict(&self, x_lidar: &Tensor, x_camera: &Tensor) -> Result<Tensor> {
        let (n, _) = x_lidar
            .dims2()
            .ok_or_else(|| Error::InvalidShape("inputs must be matrices".into()))?;
        if x_camera.dims2().map(|d| d.0) != Some(n) {
            return Err(Error::InvalidShape(
                "inputs disagree on the number of rows".into(),
            ));
        }
        let mut feats = Vec::with_capacity(2);
        for (x, part) in [(x_lidar, Partition::Lidar), (x_camera, Partition::Camera)] {
            let mut h = x.data().to_vec();
            let mut width = x.dims2().map(|d| d.1).unwrap_or(0);
            for l in self.layers.iter().filter(|l| l.partition == part) {
                if l.fan_in != width {
                    return Err(Error::InvalidShape(format!(
                        "{} expects {} inputs, got {width}",
                        l.name, l.fan_in
                    )));
                }
                h = l.forward(&h, n);
                width = l.fan_out;
            }
            feats.push((h, width));
        }
        let (wl, wc) = (feats[0].1, feats[1].1);
        let mut h = Vec::with_capacity(n * (wl + wc));
        for i in 0..n {
            h.extend_from_slice(&feats[0].0[i * wl..(i + 1) * wl]);
            h.extend_from_slice(&feats[1].0[i * wc..(i + 1) * wc]);
        }
        let mut width = wl + wc;
        for l in self
            .layers
            .iter()
            .filter(|l| l.partition == Partition::Fusion)
        {
            if l.fan_in != width {
                return Err(Error::InvalidShape(format!(
                    "{} expects {} inputs, got {width}",
                    l.name, l.fan_in
                )));
            }
            h = l.forward(&h, n);
            width = l.fan_out;
        }
        Tensor::matrix(n, width, h)
    }
}

/// MACs of the unpruned architecture.
pub fn dense_macs(model: &FusionModel) -> usize {
    model.layers().iter().map(|l| l.fan_in * l.fan_out).sum()
}

/// MACs implied by the channel masks alone: surviving inputs times
/// surviving outputs, per layer.
pub fn masked_macs(model: &FusionModel) -> usize {
    let removed = removed_channels(model);
    let rows = kept_inputs(model, &removed);
    rows.iter()
        .zip(&removed)
        .map(|(r, c)| r.len() * kept(c).len())
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacReport {
    pub dense: usize,
    pub compact: usize,
    pub from_masks: usize,
    /// `1 - compact / dense`.
    pub reduction: f64,
    /// `1 - from_masks / dense`.
    pub reduction_from_masks: f64,
    /// Removed channels over prunable channels.
    pub removed_channel_fraction: f64,
}

pub fn mac_report(model: &FusionModel, compacted: &CompactModel) -> MacReport {
    let dense = dense_macs(model);
    let compact = compacted.macs();
    let from_masks = masked_macs(model);
    let channels = model.channels();
    let removed = removed_channels(model);
    let n_removed = channels
        .iter()
        .filter(|c| removed[c.layer][c.index])
        .count();
    MacReport {
        dense,
        compact,
        from_masks,
        reduction: 1.0 - compact as f64 / dense as f64,
        reduction_from_masks: 1.0 - from_masks as f64 / dense as f64,
        removed_channel_fraction: n_removed as f64 / channels.len().max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;
    use crate::oracle::random_batches;

    fn prune_channels(model: &mut FusionModel, ids: &[&str]) {
        for c in model.channels() {
            if ids.contains(&c.id.as_str()) {
                for (p, e) in c.members {
                    model.params_mut()[p].mask.data_mut()[e] = 0.0;
                }
            }
        }
    }

    #[test]
    fn removing_masked_channels_keeps_outputs() {
        let mut model = FusionModel::build(&ArchConfig::uniform(3, 4, 5, 2, 2, 9)).unwrap();
        prune_channels(
            &mut model,
            &[
                "lidar/fc1/ch0001",
                "camera/fc2/ch0004",
                "lidar/fc3/ch0000",
                "fusion/fc1/ch0002",
            ],
        );
        let c = compact(&model).unwrap();
        let b = &random_batches(model.arch(), 1, 7, 2).unwrap()[0];
        let full = model
            .predict(&b.x_lidar, &b.x_camera, ModalityMasks::UNMASKED)
            .unwrap();
        assert_eq!(c.predict(&b.x_lidar, &b.x_camera).unwrap(), full);
        let shapes: Vec<_> = c.layers.iter().map(|l| vec![l.fan_in, l.fan_out]).collect();
        assert_eq!(
            shapes,
            vec![
                vec![3, 4],
                vec![4, 5],
                vec![5, 1],
                vec![4, 5],
                vec![5, 4],
                vec![4, 2],
                vec![3, 4],
                vec![4, 2]
            ]
        );
        let r = mac_report(&model, &c);
        assert_eq!(r.dense, 15 + 25 + 10 + 20 + 25 + 10 + 20 + 10);
        assert_eq!(r.compact, 12 + 20 + 5 + 20 + 20 + 8 + 12 + 8);
        assert_eq!(r.compact, r.from_masks);
        assert_eq!(r.removed_channel_fraction, 4.0 / 29.0);
    }

    #[test]
    fn emptied_layers_become_zero_width() {
        let mut model = FusionModel::build(&ArchConfig::uniform(2, 2, 2, 1, 2, 0)).unwrap();
        prune_channels(
            &mut model,
            &[
                "camera/fc3/ch0000",
                "lidar/fc3/ch0000",
                "lidar/fc1/ch0000",
                "lidar/fc1/ch0001",
            ],
        );
        let c = compact(&model).unwrap();
        assert_eq!((c.layers[0].fan_in, c.layers[0].fan_out), (2, 0));
        assert_eq!((c.layers[6].fan_in, c.layers[6].fan_out), (0, 2));
        let b = &random_batches(model.arch(), 1, 5, 1).unwrap()[0];
        let full = model
            .predict(&b.x_lidar, &b.x_camera, ModalityMasks::UNMASKED)
            .unwrap();
        assert_eq!(c.predict(&b.x_lidar, &b.x_camera).unwrap(), full);
        assert_eq!(mac_report(&model, &c).compact, 2 + 2 + 4 + 2 * 2);
    }
}
