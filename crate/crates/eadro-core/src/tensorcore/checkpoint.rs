//! Binary checkpoint container for a [`ParameterStore`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   9 bytes  "EADROCKPT"
//! version u32      1
//! count   u32      number of entries
//! entry   repeated: name_len u32, name bytes, rank u32,
//!                   shape u32 × rank, payload f32 × prod(shape)
//! ```
//!
//! Entries are written in sorted-name order; the round trip is bit-exact.
//! Trainability is not stored — it is re-derived from the name on load
//! (see [`is_state_name`]).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorcore::store::{is_state_name, ParameterStore};
use crate::tensorcore::tensor::Tensor;

const MAGIC: &[u8; 9] = b"EADROCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(store: &ParameterStore<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(store.len() as u32).to_le_bytes())?;
        for (name, tensor) in store.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
            for d in tensor.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 9];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data("checkpoint magic mismatch"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::data(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::data("checkpoint entry name is not utf-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            read_exact(&mut r, &mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        store.insert(&name, Tensor::from_vec(&shape, data)?, !is_state_name(&name));
    }
    Ok(store)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::data("checkpoint truncated"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.insert(
            "w",
            Tensor::from_vec(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 9.5, -0.125]).unwrap(),
            true,
        );
        s.insert("enc.bn.running_mean", Tensor::zeros(&[3]), false);
        s
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let store = sample_store();
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(store, loaded);
        assert!(!loaded.is_trainable("enc.bn.running_mean"));
        assert!(loaded.is_trainable("w"));
    }

    #[test]
    fn empty_store_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        save_checkpoint(&ParameterStore::new(), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn truncated_payload_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&sample_store(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn magic_mismatch_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut f = File::create(&path).unwrap();
        f.write_all(b"NOTACKPT!").unwrap();
        f.write_all(&[0u8; 16]).unwrap();
        drop(f);
        assert!(load_checkpoint(&path).is_err());
    }
}
