//! Synthetic two-modality data with cross-modal redundancy built in.
//!
//! A shared latent `z_s` is observed by both modalities; a camera-only
//! latent `z_c` is observed by the camera alone. LiDAR observes `z_s` with
//! less noise than the camera does, so both backbones can learn `z_s` but
//! the LiDAR copy is the more reliable one.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AMDS";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Regression,
    /// One-hot target of the argmax of the regression target.
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub d_shared: usize,
    pub d_cam_only: usize,
    pub d_lidar: usize,
    pub d_camera: usize,
    pub d_y: usize,
    pub target_hidden: usize,
    pub sigma_lidar: f64,
    pub sigma_camera: f64,
    pub mixing_seed: u64,
    pub target_seed: u64,
    #[serde(default)]
    pub task: Task,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_train: 4096,
            n_val: 512,
            d_shared: 8,
            d_cam_only: 4,
            d_lidar: 16,
            d_camera: 24,
            d_y: 4,
            target_hidden: 32,
            sigma_lidar: 0.05,
            sigma_camera: 0.3,
            mixing_seed: 11,
            target_seed: 13,
            task: Task::Regression,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_train", self.n_train),
            ("d_shared", self.d_shared),
            ("d_cam_only", self.d_cam_only),
            ("d_lidar", self.d_lidar),
            ("d_camera", self.d_camera),
            ("d_y", self.d_y),
            ("target_hidden", self.target_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.sigma_lidar >= 0.0) || !(self.sigma_camera >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(self.sigma_lidar < self.sigma_camera)
            && !(self.sigma_lidar == 0.0 && self.sigma_camera == 0.0)
        {
            return Err(Error::Config(format!(
                "sigma_lidar ({}) must be below sigma_camera ({})",
                self.sigma_lidar, self.sigma_camera
            )));
        }
        if self.d_lidar < self.d_shared {
            return Err(Error::Config("d_lidar must be at least d_shared".into()));
        }
        if self.d_camera < self.d_shared + self.d_cam_only {
            return Err(Error::Config(
                "d_camera must be at least d_shared + d_cam_only".into(),
            ));
        }
        Ok(())
    }

    pub fn n_total(&self) -> usize {
        self.n_train + self.n_val
    }
}

/// Seeded matrices with orthonormal columns: `A` is `d_lidar x d_shared`,
/// `B` is `d_camera x (d_shared + d_cam_only)`.
pub fn mixing_matrices(cfg: &GenConfig) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = stream_rng(cfg.mixing_seed, 1);
    let mut orth = |rows: usize, cols: usize| {
        let g = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        g.qr().q().columns(0, cols).into_owned()
    };
    let a = orth(cfg.d_lidar, cfg.d_shared);
    let b = orth(cfg.d_camera, cfg.d_shared + cfg.d_cam_only);
    (a, b)
}

/// Weights of the fixed random target network `y = W2 tanh(W1 z + b1)`.
struct TargetNet {
    w1: DMatrix<f64>,
    b1: Vec<f64>,
    w2: DMatrix<f64>,
}

impl TargetNet {
    fn new(cfg: &GenConfig) -> Self {
        let d_in = cfg.d_shared + cfg.d_cam_only;
        let mut rng = stream_rng(cfg.target_seed, 2);
        let s1 = (1.0 / d_in as f64).sqrt() * 1.5;
        let s2 = (1.0 / cfg.target_hidden as f64).sqrt() * 2.0;
        let w1 = DMatrix::from_fn(cfg.target_hidden, d_in, |_, _| {
            s1 * rng.sample::<f64, _>(StandardNormal)
        });
        let b1 = (0..cfg.target_hidden)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w2 = DMatrix::from_fn(cfg.d_y, cfg.target_hidden, |_, _| {
            s2 * rng.sample::<f64, _>(StandardNormal)
        });
        Self { w1, b1, w2 }
    }

    fn eval(&self, z: &[f64]) -> Vec<f64> {
        let z = DMatrix::from_column_slice(z.len(), 1, z);
        let mut h = &self.w1 * z;
        for (v, b) in h.iter_mut().zip(&self.b1) {
            *v = (*v + b).tanh();
        }
        (&self.w2 * h).iter().copied().collect()
    }
}

/// Immutable multi-modal dataset. Rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalDataset {
    pub x_lidar: Tensor,
    pub x_camera: Tensor,
    pub y: Tensor,
    /// LiDAR pretraining target `h_l(z_s) = z_s`.
    pub aux_lidar: Tensor,
    /// Camera pretraining target `h_c(z_s, z_c) = [z_s; z_c]`.
    pub aux_camera: Tensor,
    pub gen: GenConfig,
    pub seed: u64,
}

/// One mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x_lidar: Tensor,
    pub x_camera: Tensor,
    pub y: Tensor,
}

/// Draws a dataset of `n_train + n_val` samples.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<MultiModalDataset> {
    cfg.validate()?;
    let (a, b) = mixing_matrices(cfg);
    let net = TargetNet::new(cfg);
    let n = cfg.n_total();
    let mut rng = stream_rng(seed, 3);
    let d_z = cfg.d_shared + cfg.d_cam_only;

    let mut x_l = Vec::with_capacity(n * cfg.d_lidar);
    let mut x_c = Vec::with_capacity(n * cfg.d_camera);
    let mut y = Vec::with_capacity(n * cfg.d_y);
    let mut aux_l = Vec::with_capacity(n * cfg.d_shared);
    let mut aux_c = Vec::with_capacity(n * d_z);
    for _ in 0..n {
        let z: Vec<f64> = (0..d_z).map(|_| rng.sample(StandardNormal)).collect();
        let z_s = &z[..cfg.d_shared];
        for r in 0..cfg.d_lidar {
            let clean: f64 = (0..cfg.d_shared).map(|k| a[(r, k)] * z_s[k]).sum();
            let noise: f64 = rng.sample(StandardNormal);
            x_l.push(clean + cfg.sigma_lidar * noise);
        }
        for r in 0..cfg.d_camera {
            let clean: f64 = (0..d_z).map(|k| b[(r, k)] * z[k]).sum();
            let noise: f64 = rng.sample(StandardNormal);
            x_c.push(clean + cfg.sigma_camera * noise);
        }
        let target = net.eval(&z);
        match cfg.task {
            Task::Regression => y.extend(target),
            Task::Classification => {
                let arg =
                    target
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, v)| if *v > target[best] { i } else { best });
                y.extend((0..cfg.d_y).map(|i| if i == arg { 1.0 } else { 0.0 }));
            }
        }
        aux_l.extend_from_slice(z_s);
        aux_c.extend_from_slice(&z);
    }
    Ok(MultiModalDataset {
        x_lidar: Tensor::matrix(n, cfg.d_lidar, x_l)?,
        x_camera: Tensor::matrix(n, cfg.d_camera, x_c)?,
        y: Tensor::matrix(n, cfg.d_y, y)?,
        aux_lidar: Tensor::matrix(n, cfg.d_shared, aux_l)?,
        aux_camera: Tensor::matrix(n, d_z, aux_c)?,
        gen: cfg.clone(),
        seed,
    })
}

impl MultiModalDataset {
    pub fn len(&self) -> usize {
        self.x_lidar.dims2().map(|(r, _)| r).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Subset of rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            x_lidar: self.x_lidar.select_rows(rows)?,
            x_camera: self.x_camera.select_rows(rows)?,
            y: self.y.select_rows(rows)?,
            aux_lidar: self.aux_lidar.select_rows(rows)?,
            aux_camera: self.aux_camera.select_rows(rows)?,
            gen: self.gen.clone(),
            seed: self.seed,
        })
    }

    /// First `n_train` rows and the remaining `n_val` rows.
    pub fn train_val(&self) -> Result<(Self, Self)> {
        let n_train = self.gen.n_train.min(self.len());
        let train: Vec<usize> = (0..n_train).collect();
        let val: Vec<usize> = (n_train..self.len()).collect();
        if val.is_empty() {
            return Err(Error::Config("dataset has no validation rows".into()));
        }
        Ok((self.subset(&train)?, self.subset(&val)?))
    }

    pub fn gather(&self, rows: &[usize]) -> Result<Batch> {
        Ok(Batch {
            x_lidar: self.x_lidar.select_rows(rows)?,
            x_camera: self.x_camera.select_rows(rows)?,
            y: self.y.select_rows(rows)?,
        })
    }

    pub fn full_batch(&self) -> Result<Batch> {
        Ok(Batch {
            x_lidar: self.x_lidar.clone(),
            x_camera: self.x_camera.clone(),
            y: self.y.clone(),
        })
    }

    /// `count` shuffled batches; see [`batch_indices`].
    pub fn batches(
        &self,
        batch_size: usize,
        seed: u64,
        count: usize,
    ) -> Result<impl Iterator<Item = Batch> + '_> {
        let plan = batch_indices(self.len(), batch_size, seed, Some(count))?;
        Ok(plan
            .into_iter()
            .map(move |rows| self.gather(&rows).expect("indices in range")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        let g = &self.gen;
        for v in [
            g.n_train,
            g.n_val,
            g.d_shared,
            g.d_cam_only,
            g.d_lidar,
            g.d_camera,
            g.d_y,
            g.target_hidden,
        ] {
            w.u32(v as u32);
        }
        w.f64(g.sigma_lidar);
        w.f64(g.sigma_camera);
        w.u64(g.mixing_seed);
        w.u64(g.target_seed);
        w.u8(match g.task {
            Task::Regression => 0,
            Task::Classification => 1,
        });
        w.u64(self.seed);
        for t in [
            &self.x_lidar,
            &self.x_camera,
            &self.y,
            &self.aux_lidar,
            &self.aux_camera,
        ] {
            let (r, c) = t.dims2().expect("dataset arrays are 2-D");
            w.u32(r as u32);
            w.u32(c as u32);
            w.f64s(t.data());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&w.buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("dataset", bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let sigma_lidar = r.f64()?;
        let sigma_camera = r.f64()?;
        let mixing_seed = r.u64()?;
        let target_seed = r.u64()?;
        let task = match r.u8()? {
            0 => Task::Regression,
            1 => Task::Classification,
            t => return Err(r.corrupt(format!("unknown task byte {t}"))),
        };
        let seed = r.u64()?;
        let gen = GenConfig {
            n_train: dims[0],
            n_val: dims[1],
            d_shared: dims[2],
            d_cam_only: dims[3],
            d_lidar: dims[4],
            d_camera: dims[5],
            d_y: dims[6],
            target_hidden: dims[7],
            sigma_lidar,
            sigma_camera,
            mixing_seed,
            target_seed,
            task,
        };
        let n = gen.n_total();
        let expected_cols = [
            gen.d_lidar,
            gen.d_camera,
            gen.d_y,
            gen.d_shared,
            gen.d_shared + gen.d_cam_only,
        ];
        let mut arrays = Vec::with_capacity(5);
        for cols in expected_cols {
            let at = r.offset();
            let rows = r.u32()? as usize;
            let c = r.u32()? as usize;
            if rows != n || c != cols {
                return Err(Error::Corrupt {
                    what: "dataset",
                    offset: at,
                    detail: format!("array is {rows}x{c}, header implies {n}x{cols}"),
                });
            }
            let data = r.f64s(rows * c)?;
            arrays.push(Tensor::matrix(rows, c, data).map_err(|e| r.corrupt(e.to_string()))?);
        }
        r.finish()?;
        let mut it = arrays.into_iter();
        Ok(Self {
            x_lidar: it.next().expect("5 arrays"),
            x_camera: it.next().expect("5 arrays"),
            y: it.next().expect("5 arrays"),
            aux_lidar: it.next().expect("5 arrays"),
            aux_camera: it.next().expect("5 arrays"),
            gen,
            seed,
        })
    }

    /// One row per sample: `x_l*`, `x_c*`, `y*` columns.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let (_, dl) = self.x_lidar.dims2().expect("2-D");
        let (_, dc) = self.x_camera.dims2().expect("2-D");
        let (_, dy) = self.y.dims2().expect("2-D");
        let header: Vec<String> = (0..dl)
            .map(|i| format!("x_l{i}"))
            .chain((0..dc).map(|i| format!("x_c{i}")))
            .chain((0..dy).map(|i| format!("y{i}")))
            .collect();
        w.write_record(&header)?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .x_lidar
                .row(i)
                .iter()
                .chain(self.x_camera.row(i))
                .chain(self.y.row(i))
                .map(|v| format!("{v:e}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shuffled batch plan over `n` samples.
///
/// Each epoch is a fresh permutation split into `n / batch_size` full
/// batches; the remainder of a permutation is dropped. With `count` set,
/// exactly that many batches are produced, cycling through epochs and
/// reshuffling each time; without it a single epoch is produced.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    seed: u64,
    count: Option<usize>,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Config(format!(
            "batch_size {batch_size} must be in 1..={n}"
        )));
    }
    let per_epoch = n / batch_size;
    let count = count.unwrap_or(per_epoch);
    let mut out = Vec::with_capacity(count);
    let mut epoch = 0u64;
    while out.len() < count {
        let perm = permutation(n, seed, epoch);
        for chunk in perm.chunks_exact(batch_size) {
            if out.len() == count {
                break;
            }
            out.push(chunk.to_vec());
        }
        epoch += 1;
    }
    Ok(out)
}

fn permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = stream_rng(seed, 0x5000 + epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Least-squares recovery error of `z_s` (with intercept) from each
/// modality: `(mse_from_lidar, mse_from_camera)`.
pub fn redundancy_certificate(ds: &MultiModalDataset) -> (f64, f64) {
    let target = to_dmatrix(&ds.aux_lidar);
    (
        lstsq_mse(&to_dmatrix(&ds.x_lidar), &target),
        lstsq_mse(&to_dmatrix(&ds.x_camera), &target),
    )
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2().expect("2-D");
    DMatrix::from_row_slice(r, c, t.data())
}

fn lstsq_mse(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let design = x.clone().insert_column(x.ncols(), 1.0);
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * y;
    let coef = xtx
        .cholesky()
        .expect("design matrix has full column rank")
        .solve(&xty);
    let resid = y - design * coef;
    resid.iter().map(|v| v * v).sum::<f64>() / (n * y.ncols()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            n_train: 200,
            n_val: 40,
            ..GenConfig::default()
        }
    }

    #[test]
    fn deterministic_generation() {
        let a = generate(&small(), 5).unwrap();
        let b = generate(&small(), 5).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(), 6).unwrap();
        assert_ne!(a.x_lidar, c.x_lidar);
    }

    #[test]
    fn noiseless_lidar_is_in_column_space() {
        let cfg = GenConfig {
            sigma_lidar: 0.0,
            sigma_camera: 0.0,
            ..small()
        };
        let ds = generate(&cfg, 1).unwrap();
        let (a, _) = mixing_matrices(&cfg);
        let x = to_dmatrix(&ds.x_lidar);
        let proj = &x * &a * a.transpose();
        let max = (x - proj).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12, "residual {max}");
    }

    #[test]
    fn mixing_columns_orthonormal() {
        let (a, b) = mixing_matrices(&GenConfig::default());
        for m in [a, b] {
            let gram = m.transpose() * &m;
            let id = DMatrix::<f64>::identity(gram.nrows(), gram.ncols());
            assert!((gram - id).abs().max() < 1e-12);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = GenConfig {
            sigma_lidar: 0.5,
            sigma_camera: 0.3,
            ..small()
        };
        assert!(generate(&cfg, 0).is_err());
        let cfg = GenConfig {
            d_shared: 0,
            ..small()
        };
        assert!(generate(&cfg, 0).is_err());
    }

    #[test]
    fn batches_partition_one_epoch() {
        let plan = batch_indices(100, 10, 3, Some(10)).unwrap();
        let mut seen: Vec<usize> = plan.concat();
        seen.sort();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
        assert!(batch_indices(100, 10, 3, Some(0)).unwrap().is_empty());
        assert_eq!(plan, batch_indices(100, 10, 3, Some(10)).unwrap());
    }

    #[test]
    fn batches_cycle_with_reshuffle() {
        let plan = batch_indices(20, 10, 3, Some(5)).unwrap();
        assert_eq!(plan.len(), 5);
        assert_ne!(plan[0], plan[2]);
    }

    #[test]
    fn oversized_batch_rejected() {
        assert!(batch_indices(5, 6, 0, None).is_err());
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let ds = generate(&small(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.amds");
        ds.save(&path).unwrap();
        let back = MultiModalDataset::load(&path).unwrap();
        assert_eq!(ds, back);

        let bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        match MultiModalDataset::from_bytes(&bad) {
            Err(Error::Corrupt { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let cut = &bytes[..bytes.len() - 3];
        match MultiModalDataset::from_bytes(cut) {
            Err(Error::Corrupt { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let ds = generate(
            &GenConfig {
                n_train: 3,
                n_val: 1,
                ..GenConfig::default()
            },
            1,
        )
        .unwrap();
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("x_l0,"));
    }
}
