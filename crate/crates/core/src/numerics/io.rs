//! Binary tensor format.
//!
//! Layout: `b"ADT1"`, one dtype byte, `u32` rank, `rank` x `u64` extents,
//! then the little-endian payload. All integers are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"ADT1";
const BUNDLE_MAGIC: &[u8; 4] = b"ADB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self, NumericsError> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            c => Err(NumericsError::Format(format!("unknown dtype code {c}"))),
        }
    }
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor, dtype: Dtype) -> Result<(), NumericsError> {
    w.write_all(MAGIC)?;
    w.write_all(&[dtype as u8])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor, NumericsError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericsError::Format("bad magic".into()));
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let dtype = Dtype::from_code(code[0])?;
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank == 0 || rank > 16 {
        return Err(NumericsError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| NumericsError::Format("extent overflow".into()))?;
    if n == 0 || n > 1 << 32 {
        return Err(NumericsError::Format(format!("implausible extents {shape:?}")));
    }
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            for _ in 0..n {
                r.read_exact(&mut b4)?;
                data.push(f32::from_le_bytes(b4) as f64);
            }
        }
        Dtype::F64 => {
            for _ in 0..n {
                r.read_exact(&mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
        }
    }
    Tensor::new(shape, data)
}

pub fn to_bytes(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut buf = Vec::with_capacity(9 + 8 * t.rank() + 8 * t.numel());
    write_tensor(&mut buf, t, dtype).expect("writing to a Vec cannot fail");
    buf
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Tensor, NumericsError> {
    let t = read_tensor(&mut bytes)?;
    if !bytes.is_empty() {
        return Err(NumericsError::Format(format!("{} trailing bytes", bytes.len())));
    }
    Ok(t)
}

/// Named weights behind a JSON header, in one file: `b"ADB1"`, a `u64`
/// header length, the header `{"meta": .., "weights": [names]}`, then one
/// tensor record per name. Written to a temporary file and renamed.
pub fn write_bundle<H: Serialize>(path: &Path, meta: &H, params: &ParamStore) -> Result<(), NumericsError> {
    let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
    let header = serde_json::to_vec(&serde_json::json!({ "meta": meta, "weights": names }))
        .map_err(|e| NumericsError::Format(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in params.iter() {
        write_tensor(&mut buf, t, Dtype::F64)?;
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_bundle<H: DeserializeOwned>(path: &Path) -> Result<(H, ParamStore), NumericsError> {
    #[derive(Deserialize)]
    struct Header<H> {
        meta: H,
        weights: Vec<String>,
    }
    let bytes = fs::read(path)?;
    let mut r: &[u8] = &bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return Err(NumericsError::Format("bad bundle magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > r.len() {
        return Err(NumericsError::Format("truncated bundle header".into()));
    }
    let header: Header<H> = serde_json::from_slice(&r[..len]).map_err(|e| NumericsError::Format(e.to_string()))?;
    r = &r[len..];
    let mut params = ParamStore::new();
    for name in header.weights {
        params.insert(name, read_tensor(&mut r)?);
    }
    if !r.is_empty() {
        return Err(NumericsError::Format(format!("{} trailing bytes", r.len())));
    }
    Ok((header.meta, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_slice(&[2], &[1.0, 2.0]).unwrap();
        let b = to_bytes(&t, Dtype::F32);
        assert_eq!(&b[..4], b"ADT1");
        assert_eq!(b[4], 0);
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..17], &2u64.to_le_bytes());
        assert_eq!(&b[17..21], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 25);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = Tensor::from_slice(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let b = to_bytes(&t, Dtype::F64);
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
        assert!(from_bytes(b"ADT9").is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::numerics::Rng::new(seed);
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.normal() * 1e3).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = from_bytes(&to_bytes(&t, Dtype::F64)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
