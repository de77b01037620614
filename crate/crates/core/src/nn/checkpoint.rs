//! Parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "LRTACKP1"
//! u32      manifest length, then that many bytes of JSON
//! u32      parameter count
//! repeated:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank x u64 dims
//!   product(dims) x f64 payload
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::params::ParamStore;
use super::{NnError, Tensor};

const MAGIC: &[u8; 8] = b"LRTACKP1";

pub fn write_archive<W: Write>(
    mut w: W,
    manifest: &serde_json::Value,
    store: &ParamStore,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    let m = serde_json::to_vec(manifest)?;
    w.write_all(&(m.len() as u32).to_le_bytes())?;
    w.write_all(&m)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub struct Archive {
    pub manifest: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Archive, NnError> {
    let io = |e: std::io::Error| NnError::Checkpoint(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("not a parameter archive (bad magic)".into()));
    }
    let mlen = read_u32(&mut r).map_err(io)? as usize;
    let mut m = vec![0u8; mlen];
    r.read_exact(&mut m).map_err(io)?;
    let manifest = serde_json::from_slice(&m).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let count = read_u32(&mut r).map_err(io)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = read_u32(&mut r).map_err(io)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut r).map_err(io)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r).map_err(io)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r).map_err(io)?));
        }
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(Archive { manifest, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::RngState;

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let mut rng = RngState::new(9);
        let mut s = ParamStore::new();
        s.add_glorot("a.weight", 3, 5, &mut rng);
        s.add_filled("a.bias", &[3], -0.25);
        let manifest = serde_json::json!({"seed": 9, "config_hash": "abc"});
        let mut buf = Vec::new();
        write_archive(&mut buf, &manifest, &s).unwrap();
        let arc = read_archive(buf.as_slice()).unwrap();
        assert_eq!(arc.manifest, manifest);
        let mut t = s.clone();
        t.iter_mut().for_each(|p| p.value.fill(0.0));
        t.load_values(&arc.tensors).unwrap();
        assert_eq!(t.hash_prefix(""), s.hash_prefix(""));
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(read_archive(&b"NOTACKPTxxxx"[..]).is_err());
    }
}
