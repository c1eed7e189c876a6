//! Versioned binary cache of a [`SequenceDataset`].
//!
//! Layout (little-endian): magic `FLAMEDATA`, `u32` version, `u32` max_len,
//! user keys, item keys (each a `u32` count then `u32`-length-prefixed UTF-8),
//! then per user the training ids (`u32` count + ids), validation id and test id.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::data::{SequenceDataset, UserSplit};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 9] = b"FLAMEDATA";
pub const DATASET_VERSION: u32 = 1;

pub(crate) fn encode(ds: &SequenceDataset) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.len_u32(ds.max_len)?;
    for keys in [&ds.user_keys, &ds.item_keys] {
        w.len_u32(keys.len())?;
        for k in keys.iter() {
            w.str(k)?;
        }
    }
    for u in &ds.users {
        w.len_u32(u.train.len())?;
        u.train.iter().for_each(|&i| w.u32(i));
        w.u32(u.valid);
        w.u32(u.test);
    }
    Ok(w.buf)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<SequenceDataset> {
    let mut r = Reader::new(bytes);
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset version {version}, expected {DATASET_VERSION}"
        )));
    }
    let max_len = r.u32()? as usize;
    let mut keys = [Vec::new(), Vec::new()];
    for k in &mut keys {
        let n = r.len(4)?;
        for _ in 0..n {
            k.push(r.str()?);
        }
    }
    let [user_keys, item_keys] = keys;
    let mut users = Vec::with_capacity(user_keys.len());
    for _ in 0..user_keys.len() {
        let n = r.len(4)?;
        let train = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        users.push(UserSplit {
            train,
            valid: r.u32()?,
            test: r.u32()?,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    SequenceDataset::new(user_keys, item_keys, users, max_len)
        .map_err(|e| Error::Format(format!("inconsistent dataset: {e}")))
}

pub fn save_dataset(ds: &SequenceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SequenceDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SequenceDataset {
        SequenceDataset::new(
            vec!["alice".into(), "bob".into()],
            vec!["x".into(), "y".into(), "zé".into()],
            vec![
                UserSplit {
                    train: vec![1, 2, 3],
                    valid: 1,
                    test: 2,
                },
                UserSplit {
                    train: vec![3, 3, 1, 2],
                    valid: 3,
                    test: 3,
                },
            ],
            7,
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let ds = sample();
        let bytes = encode(&ds).unwrap();
        assert_eq!(&bytes[..9], b"FLAMEDATA");
        assert_eq!(decode(&bytes).unwrap(), ds);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 5, 12, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[9] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
    }
}
