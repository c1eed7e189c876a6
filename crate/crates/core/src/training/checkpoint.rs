//! Binary checkpoint of one network.
//!
//! Layout (little-endian): magic `FLAMECKPT`, `u32` version, model
//! hyperparameters, training metadata, `u32` tensor count, then a directory
//! of `(name, dtype tag, rank, dims, byte offset)` entries and finally the
//! raw row-major `f32` payloads. Offsets count from the start of the payload
//! section.

use std::path::Path;

use crate::backbone::{ModelHyper, NetworkParams};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"FLAMECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    /// 1-based epoch the parameters come from.
    pub epoch: u32,
    pub best_val_ndcg20: f64,
    pub seed: u64,
    /// Word positions of the init, shuffle and dropout streams.
    pub rng_words: [u128; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn hyper(&self) -> &ModelHyper {
        &self.params.hyper
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.params.hyper;
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        for v in [h.num_items, h.max_len, h.dim, h.layers, h.heads, h.ff_dim] {
            w.u64(v as u64);
        }
        w.f64(h.dropout);
        w.u32(self.meta.epoch);
        w.f64(self.meta.best_val_ndcg20);
        w.u64(self.meta.seed);
        self.meta.rng_words.iter().for_each(|&x| w.u128(x));
        let named = self.params.named();
        w.len_u32(named.len())?;
        let mut offset = 0u64;
        for (name, t) in &named {
            w.str(name)?;
            w.u8(DTYPE_F32);
            w.len_u32(t.shape().len())?;
            t.shape().iter().for_each(|&d| w.u64(d as u64));
            w.u64(offset);
            offset += 4 * t.numel() as u64;
        }
        for (_, t) in &named {
            t.data().iter().for_each(|&x| w.f32(x));
        }
        Ok(w.buf)
    }

    /// Parses the whole file before building anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = usize::try_from(r.u64()?)
                .map_err(|_| Error::Format("hyperparameter overflows usize".into()))?;
        }
        let [num_items, max_len, dim, layers, heads, ff_dim] = dims;
        let hyper = ModelHyper {
            num_items,
            max_len,
            dim,
            layers,
            heads,
            ff_dim,
            dropout: r.f64()?,
        };
        hyper
            .validate()
            .map_err(|e| Error::Format(format!("bad hyperparameters: {e}")))?;
        let meta = CheckpointMeta {
            epoch: r.u32()?,
            best_val_ndcg20: r.f64()?,
            seed: r.u64()?,
            rng_words: [r.u128()?, r.u128()?, r.u128()?],
        };
        let count = r.len(14)?;
        let mut directory = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!(
                    "tensor {name}: unknown dtype tag {dtype}"
                )));
            }
            let rank = r.len(8)?;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            directory.push((name, shape, offset));
        }
        let payload = r.take(r.remaining())?;
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(count);
        for (name, shape, offset) in directory {
            if offset != expected_offset {
                return Err(Error::Format(format!(
                    "tensor {name}: offset {offset} out of order"
                )));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name}: size overflow")))?;
            let start = offset as usize;
            let end = start
                .checked_add(4 * numel)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Format(format!("tensor {name}: payload truncated")))?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected_offset = end as u64;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if expected_offset as usize != payload.len() {
            return Err(Error::Format("trailing bytes after tensor payloads".into()));
        }
        let params = NetworkParams::from_tensors(&hyper, tensors)?;
        Ok(Self { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks that the stored network fits `expected`, naming the first
    /// tensor that does not.
    pub fn check_compatible(&self, expected: &ModelHyper) -> Result<()> {
        let want = NetworkParams::<f32>::shapes(expected);
        let names = NetworkParams::<f32>::names(expected);
        let have = self.params.named();
        for (i, name) in names.iter().enumerate() {
            match have.get(i) {
                Some((n, t)) if n == name && t.shape() == &want[i][..] => {}
                Some((n, t)) => {
                    return Err(Error::Config(format!(
                    "checkpoint tensor {n} has shape {:?}, model expects {name} with shape {:?}",
                    t.shape(),
                    want[i]
                )))
                }
                None => {
                    return Err(Error::Config(format!("checkpoint lacks tensor {name}")));
                }
            }
        }
        if have.len() != names.len() {
            return Err(Error::Config(format!(
                "checkpoint has extra tensor {}",
                have[names.len()].0
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(dim: usize) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hyper = ModelHyper::new(7, 5, dim, 2, 2, 0.25);
        Checkpoint {
            params: NetworkParams::init(&hyper, &mut rng).unwrap(),
            meta: CheckpointMeta {
                epoch: 3,
                best_val_ndcg20: 0.125,
                seed: 9,
                rng_words: [1, 2, u128::MAX],
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.params.bits_eq(&c.params));
        assert_eq!(back.meta, c.meta);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = sample(4).to_bytes().unwrap();
        for cut in (0..bytes.len()).step_by(7) {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&extra),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample(4).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        let mut bytes = sample(4).to_bytes().unwrap();
        bytes[9] = 2;
        assert!(
            matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(m)) if m.contains("version"))
        );
    }

    #[test]
    fn wrong_width_names_the_tensor() {
        let c = sample(4);
        let wider = ModelHyper::new(7, 5, 8, 2, 2, 0.25);
        let err = c.check_compatible(&wider).unwrap_err();
        assert!(
            matches!(&err, Error::Config(m) if m.contains("item_table")),
            "{err}"
        );
        c.check_compatible(&c.params.hyper).unwrap();
    }
}
