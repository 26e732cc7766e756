//! Models with a known redundant camera pathway.
//!
//! The planted camera input is `[x_lidar | x_own]`, where `x_own` observes
//! only the camera-only latent. A base model is trained with its camera
//! backbone on `x_own` alone; the planted model then widens the camera
//! backbone with an exact copy of the LiDAR backbone, emitting copies of
//! the first few LiDAR features. The fusion head reads none of the copies,
//! so the planted model computes exactly the base model's function.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::MultiModalDataset;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, FusionModel, Parameter, Partition};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// The base-model view (camera sees only its own channels, pretrains on
/// the camera-only latent) and the planted view (camera sees a copy of
/// the LiDAR observation first).
pub fn planted_views(ds: &MultiModalDataset) -> Result<(MultiModalDataset, MultiModalDataset)> {
    let g = &ds.gen;
    if g.d_camera <= g.d_lidar {
        return Err(Error::Config(
            "planted data needs d_camera > d_lidar".into(),
        ));
    }
    let n = ds.len();
    let d_own = g.d_camera - g.d_lidar;
    let mut rng = stream_rng(g.mixing_seed, 0x91a7);
    let m = DMatrix::from_fn(d_own, g.d_cam_only, |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    let m = m.qr().q().columns(0, g.d_cam_only.min(d_own)).into_owned();
    let mut noise = stream_rng(ds.seed, 0x91a8);
    let mut own = Vec::with_capacity(n * d_own);
    let mut z_c = Vec::with_capacity(n * g.d_cam_only);
    let mut camera = Vec::with_capacity(n * g.d_camera);
    for i in 0..n {
        let z = &ds.aux_camera.row(i)[g.d_shared..];
        let start = own.len();
        for r in 0..d_own {
            let clean: f64 = (0..m.ncols()).map(|k| m[(r, k)] * z[k]).sum();
            own.push(clean + g.sigma_camera * noise.sample::<f64, _>(StandardNormal));
        }
        z_c.extend_from_slice(z);
        camera.extend_from_slice(ds.x_lidar.row(i));
        camera.extend_from_slice(&own[start..]);
    }
    let base = MultiModalDataset {
        x_camera: Tensor::matrix(n, d_own, own)?,
        aux_camera: Tensor::matrix(n, g.d_cam_only, z_c)?,
        ..ds.clone()
    };
    let planted = MultiModalDataset {
        x_camera: Tensor::matrix(n, g.d_camera, camera)?,
        ..ds.clone()
    };
    Ok((base, planted))
}

/// Channel ids of the copied pathway and of the camera's own pathway.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedLayout {
    pub duplicate: Vec<String>,
    pub camera_only: Vec<String>,
}

fn mat(t: &Tensor) -> (usize, usize, &[f64]) {
    let (r, c) = t.dims2().expect("weights are matrices");
    (r, c, t.data())
}

/// Places `src` (`r x c`) into `dst` (`rows x cols`) at row `r0`, column `c0`,
/// keeping only the first `take` columns of `src`.
fn place(dst: &mut [f64], cols: usize, src: &Tensor, r0: usize, c0: usize, take: usize) {
    let (r, c, d) = mat(src);
    for i in 0..r {
        for j in 0..take.min(c) {
            dst[(r0 + i) * cols + c0 + j] = d[i * c + j];
        }
    }
}

/// Builds the planted model from a trained base model whose camera
/// backbone reads only the camera's own channels.
pub fn plant(base: &FusionModel, copies: usize) -> Result<(FusionModel, PlantedLayout)> {
    let a = base.arch();
    if copies == 0 || copies > a.feat_lidar {
        return Err(Error::Config(format!(
            "copies must be in 1..={}",
            a.feat_lidar
        )));
    }
    let arch = ArchConfig {
        in_camera: a.in_lidar + a.in_camera,
        hidden_camera: a.hidden_lidar + a.hidden_camera,
        feat_camera: copies + a.feat_camera,
        ..a.clone()
    };
    let v = |id: &str| base.param(id).map(|p| &p.values);
    let (hl, hc) = (a.hidden_lidar, a.hidden_camera);
    let mut params = Vec::new();
    for p in base
        .params()
        .iter()
        .filter(|p| p.partition == Partition::Lidar)
    {
        params.push(Parameter::new(p.id.clone(), p.partition, p.values.clone()));
    }

    let h = arch.hidden_camera;
    let mut w1 = vec![0.0; arch.in_camera * h];
    place(&mut w1, h, v("lidar/fc1/weight")?, 0, 0, hl);
    place(&mut w1, h, v("camera/fc1/weight")?, a.in_lidar, hl, hc);
    let mut w2 = vec![0.0; h * h];
    place(&mut w2, h, v("lidar/fc2/weight")?, 0, 0, hl);
    place(&mut w2, h, v("camera/fc2/weight")?, hl, hl, hc);
    let fc = arch.feat_camera;
    let mut w3 = vec![0.0; h * fc];
    place(&mut w3, fc, v("lidar/fc3/weight")?, 0, 0, copies);
    place(
        &mut w3,
        fc,
        v("camera/fc3/weight")?,
        hl,
        copies,
        a.feat_camera,
    );
    let cat = |x: &Tensor, take: usize, y: &Tensor| -> Vec<f64> {
        x.data()[..take].iter().chain(y.data()).copied().collect()
    };
    let b1 = cat(v("lidar/fc1/bias")?, hl, v("camera/fc1/bias")?);
    let b2 = cat(v("lidar/fc2/bias")?, hl, v("camera/fc2/bias")?);
    let b3 = cat(v("lidar/fc3/bias")?, copies, v("camera/fc3/bias")?);
    let cam = Partition::Camera;
    params.push(Parameter::new(
        "camera/fc1/weight",
        cam,
        Tensor::matrix(arch.in_camera, h, w1)?,
    ));
    params.push(Parameter::new(
        "camera/fc1/bias",
        cam,
        Tensor::new(vec![h], b1)?,
    ));
    params.push(Parameter::new(
        "camera/fc2/weight",
        cam,
        Tensor::matrix(h, h, w2)?,
    ));
    params.push(Parameter::new(
        "camera/fc2/bias",
        cam,
        Tensor::new(vec![h], b2)?,
    ));
    params.push(Parameter::new(
        "camera/fc3/weight",
        cam,
        Tensor::matrix(h, fc, w3)?,
    ));
    params.push(Parameter::new(
        "camera/fc3/bias",
        cam,
        Tensor::new(vec![fc], b3)?,
    ));

    let hf = a.hidden_fusion;
    let rows = arch.feat_lidar + fc;
    let mut wf = vec![0.0; rows * hf];
    let base_wf = v("fusion/fc1/weight")?;
    for i in 0..a.feat_lidar {
        wf[i * hf..(i + 1) * hf].copy_from_slice(base_wf.row(i));
    }
    for i in 0..a.feat_camera {
        let dst = a.feat_lidar + copies + i;
        wf[dst * hf..(dst + 1) * hf].copy_from_slice(base_wf.row(a.feat_lidar + i));
    }
    params.push(Parameter::new(
        "fusion/fc1/weight",
        Partition::Fusion,
        Tensor::matrix(rows, hf, wf)?,
    ));
    for id in ["fusion/fc1/bias", "fusion/fc2/weight", "fusion/fc2/bias"] {
        params.push(Parameter::new(id, Partition::Fusion, v(id)?.clone()));
    }
    let model = FusionModel::from_parameters(&arch, params)?;

    let mut layout = PlantedLayout {
        duplicate: Vec::new(),
        camera_only: Vec::new(),
    };
    for (layer, split) in [("fc1", hl), ("fc2", hl), ("fc3", copies)] {
        let width = if layer == "fc3" { fc } else { h };
        for j in 0..width {
            let id = format!("camera/{layer}/ch{j:04}");
            if j < split {
                layout.duplicate.push(id);
            } else {
                layout.camera_only.push(id);
            }
        }
    }
    Ok((model, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};
    use crate::model::ModalityMasks;

    #[test]
    fn planted_model_matches_base_exactly() {
        let gen = GenConfig {
            n_train: 40,
            n_val: 8,
            ..GenConfig::default()
        };
        let ds = generate(&gen, 3).unwrap();
        let (base_view, planted_view) = planted_views(&ds).unwrap();
        assert_eq!(planted_view.x_camera.shape(), &[48, gen.d_camera]);
        assert_eq!(
            planted_view.x_camera.row(5)[..gen.d_lidar],
            *ds.x_lidar.row(5)
        );
        assert_eq!(
            planted_view.x_camera.row(5)[gen.d_lidar..],
            *base_view.x_camera.row(5)
        );

        let arch = ArchConfig::uniform(gen.d_lidar, gen.d_camera - gen.d_lidar, 6, 3, gen.d_y, 1);
        let base = FusionModel::build(&arch).unwrap();
        let (planted, layout) = plant(&base, 2).unwrap();
        assert_eq!(layout.duplicate.len(), 6 + 6 + 2);
        assert_eq!(layout.camera_only.len(), 6 + 6 + 3);
        let b = base_view.full_batch().unwrap();
        let p = planted_view.full_batch().unwrap();
        let yb = base
            .predict(&b.x_lidar, &b.x_camera, ModalityMasks::UNMASKED)
            .unwrap();
        let yp = planted
            .predict(&p.x_lidar, &p.x_camera, ModalityMasks::UNMASKED)
            .unwrap();
        let diff = yb
            .data()
            .iter()
            .zip(yp.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }
}
