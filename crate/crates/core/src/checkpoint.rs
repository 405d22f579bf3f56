//! `RVQW` named-tensor checkpoint, little-endian:
//!
//! ```text
//! "RVQW" | u32 count
//! count × (u16 name_len | name bytes | u8 rank | rank × u32 extent | f32 payload)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"RVQW";

/// Writes every tensor in insertion order. Values are stored as f32.
pub fn write_rvqw<T: Real, W: Write>(mut w: W, store: &ParamStore<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidInput(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::InvalidInput(format!("rank of '{name}' exceeds 255")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[rank])?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_rvqw<T: Real, R: Read>(mut r: R) -> Result<ParamStore<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let count = u32::from_le_bytes(u32b);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b)?;
        let mut name = vec![0u8; u16::from_le_bytes(u16b) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            r.read_exact(&mut u32b)?;
            shape.push(u32::from_le_bytes(u32b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::Format(format!("tensor '{name}': {e}")))?;
        if store.contains(&name) {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
        store.insert(name, t);
    }
    Ok(store)
}

pub fn save_rvqw<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_rvqw(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn load_rvqw<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    read_rvqw(BufReader::new(File::open(path)?))
}

/// Copies tensors from `source` into `target`, requiring each one to exist in
/// `target` with the same shape. Names in `target` missing from `source` keep
/// their current values. Returns how many tensors were copied.
pub fn load_into<T: Real>(target: &mut ParamStore<T>, source: &ParamStore<T>) -> Result<usize> {
    let mut copied = 0;
    for (name, t) in source.iter() {
        let slot = target
            .get_mut(name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor '{name}'")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
        copied += 1;
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.init_normal("a.w", &[3, 2], 1.0, 1);
        s.init_const("a.b", &[2], 0.5);
        s.init_normal("conv", &[2, 1, 3, 3], 0.1, 2);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let mut buf = Vec::new();
        write_rvqw(&mut buf, &s).unwrap();
        let back: ParamStore<f32> = read_rvqw(&buf[..]).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), s.names().collect::<Vec<_>>());
        for (name, t) in s.iter() {
            assert_eq!(back.get(name).unwrap(), t);
        }
    }

    #[test]
    fn layout() {
        let mut s = ParamStore::<f32>::new();
        s.insert("xy", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let mut buf = Vec::new();
        write_rvqw(&mut buf, &s).unwrap();
        let mut want = b"RVQW".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u16.to_le_bytes());
        want.extend(b"xy");
        want.push(1);
        want.extend(2u32.to_le_bytes());
        want.extend(1f32.to_le_bytes());
        want.extend(2f32.to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_truncation_and_shape_mismatch() {
        assert!(matches!(read_rvqw::<f32, _>(&b"RVQF\0\0\0\0"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_rvqw(&mut buf, &sample()).unwrap();
        buf.pop();
        assert!(read_rvqw::<f32, _>(&buf[..]).is_err());

        let mut target = sample();
        let mut other = ParamStore::<f32>::new();
        other.init_const("a.b", &[3], 0.0);
        assert!(matches!(load_into(&mut target, &other), Err(Error::Format(_))));
        let mut other = ParamStore::<f32>::new();
        other.init_const("a.b", &[2], 9.0);
        assert_eq!(load_into(&mut target, &other).unwrap(), 1);
        assert_eq!(target.get("a.b").unwrap().data(), &[9.0, 9.0]);
    }
}
