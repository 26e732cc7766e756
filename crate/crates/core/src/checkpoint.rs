//! `AMML` model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AMML" | version u16 | parameter count u32
//! per parameter:
//!   id length u32 | id bytes (UTF-8) | partition u8 | rank u32 | dims u32 * rank
//!   values f64 * n | mask bits, LSB first, ceil(n / 8) bytes
//! ```

use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, FusionModel, LossKind, Parameter, Partition};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AMML";
const VERSION: u16 = 1;

pub fn encode(params: &[Parameter]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u32(params.len() as u32);
    for p in params {
        w.u32(p.id.len() as u32);
        w.bytes(p.id.as_bytes());
        w.u8(p.partition.to_byte());
        w.u32(p.values.rank() as u32);
        for &d in p.values.shape() {
            w.u32(d as u32);
        }
        w.f64s(p.values.data());
        let mut bits = vec![0u8; p.len().div_ceil(8)];
        for (i, &m) in p.mask.data().iter().enumerate() {
            if m == 1.0 {
                bits[i / 8] |= 1 << (i % 8);
            } else if m != 0.0 {
                return Err(Error::Config(format!(
                    "mask of `{}` holds non-binary value {m}",
                    p.id
                )));
            }
        }
        w.bytes(&bits);
    }
    Ok(w.buf)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Parameter>> {
    let mut r = ByteReader::new("checkpoint", bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = r.u32()? as usize;
        let id_at = r.offset();
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| Error::Corrupt {
                what: "checkpoint",
                offset: id_at,
                detail: e.to_string(),
            })?
            .to_owned();
        let part_byte = r.u8()?;
        let partition = Partition::from_byte(part_byte)
            .ok_or_else(|| r.corrupt(format!("unknown partition byte {part_byte}")))?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(r.corrupt(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(r.corrupt("zero dimension"));
            }
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.corrupt("size overflow"))?;
        let values = r.f64s(n)?;
        let bits_at = r.offset();
        let bits = r.take(n.div_ceil(8))?;
        let mask: Vec<f64> = (0..n)
            .map(|i| {
                if bits[i / 8] >> (i % 8) & 1 == 1 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        if n % 8 != 0 && bits[n / 8] >> (n % 8) != 0 {
            return Err(Error::Corrupt {
                what: "checkpoint",
                offset: bits_at + (n / 8) as u64,
                detail: "padding bits set in mask".into(),
            });
        }
        params.push(Parameter {
            id,
            partition,
            values: Tensor::new(shape.clone(), values).expect("size checked"),
            mask: Tensor::new(shape, mask).expect("size checked"),
        });
    }
    r.finish()?;
    Ok(params)
}

pub fn save(model: &FusionModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model.params())?)?;
    Ok(())
}

pub fn load(path: &Path, loss: LossKind) -> Result<FusionModel> {
    let params = decode(&std::fs::read(path)?)?;
    model_from_parameters(params, loss)
}

/// Rebuilds a model, inferring layer widths from parameter shapes.
pub fn model_from_parameters(params: Vec<Parameter>, loss: LossKind) -> Result<FusionModel> {
    let shape = |id: &str| -> Result<(usize, usize)> {
        params
            .iter()
            .find(|p| p.id == id)
            .and_then(|p| p.values.dims2())
            .ok_or_else(|| Error::Config(format!("checkpoint lacks 2-D parameter `{id}`")))
    };
    let (in_lidar, hidden_lidar) = shape("lidar/fc1/weight")?;
    let (in_camera, hidden_camera) = shape("camera/fc1/weight")?;
    let (_, feat_lidar) = shape("lidar/fc3/weight")?;
    let (_, feat_camera) = shape("camera/fc3/weight")?;
    let (_, hidden_fusion) = shape("fusion/fc1/weight")?;
    let (_, out) = shape("fusion/fc2/weight")?;
    let arch = ArchConfig {
        in_lidar,
        in_camera,
        hidden_lidar,
        hidden_camera,
        hidden_fusion,
        feat_lidar,
        feat_camera,
        out,
        loss,
        seed: 0,
    };
    FusionModel::from_parameters(&arch, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = FusionModel::build(&ArchConfig::uniform(3, 5, 7, 2, 3, 1)).unwrap();
        m.params_mut()[1].mask.data_mut()[2] = 0.0;
        m.params_mut()[0].values.data_mut()[0] = -0.0;
        let bytes = encode(m.params()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), m.params().len());
        for (a, b) in back.iter().zip(m.params()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.partition, b.partition);
            assert_eq!(a.mask, b.mask);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.values), bits(&b.values));
        }
        assert_eq!(encode(&back).unwrap(), bytes);
        let rebuilt = model_from_parameters(back, LossKind::Mse).unwrap();
        assert_eq!(rebuilt.arch().hidden_camera, 7);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = FusionModel::build(&ArchConfig::uniform(2, 2, 2, 1, 1, 1)).unwrap();
        let bytes = encode(m.params()).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(Error::Corrupt { .. })
        ));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            decode(&bad),
            Err(Error::Corrupt { offset: 0, .. })
        ));
    }
}
