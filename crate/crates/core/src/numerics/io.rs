//! Binary tensor container.
//!
//! Layout of one tensor (all integers little-endian):
//!
//! ```text
//! b"SMT1" | rank: u64 | dims: rank x u64 | values: prod(dims) x f64
//! ```
//!
//! A checkpoint is a named map of such tensors:
//!
//! ```text
//! b"SMCK" | count: u64 | count x ( name_len: u64 | name: utf-8 | tensor )
//! ```
//!
//! Entries are written in lexicographic name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"SMT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";

const MAX_RANK: u64 = 16;
const MAX_NAME: u64 = 4096;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated integer: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("missing tensor magic: {e}")))?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u64(r)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = read_u64(r)? as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        shape.push(d);
    }
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated tensor data: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * (t.rank() + t.numel()));
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

pub fn tensor_from_bytes(mut bytes: &[u8]) -> Result<Tensor> {
    let t = read_tensor(&mut bytes)?;
    if !bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
    }
    Ok(t)
}

pub fn write_checkpoint<W: Write>(w: &mut W, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("missing checkpoint magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let count = read_u64(r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u64(r)?;
        if len > MAX_NAME {
            return Err(Error::Format(format!("name length {len} too large")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let t = read_tensor(r)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::new([1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = tensor_to_bytes(&t);
        assert_eq!(&bytes[..4], b"SMT1");
        assert_eq!(&bytes[4..12], &2u64.to_le_bytes());
        assert_eq!(&bytes[12..20], &1u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &2u64.to_le_bytes());
        assert_eq!(&bytes[28..36], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 44);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = tensor_to_bytes(&t);
        assert!(tensor_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(tensor_from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(tensor_from_bytes(&extra).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = BTreeMap::new();
        m.insert("b.weight".to_string(), Tensor::from_vec(vec![0.5]));
        m.insert("a.bias".to_string(), Tensor::zeros([2, 3]));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn tensor_round_trip(shape in proptest::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed as f64) * 1e-3 + i as f64).sin() * 1e6).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
