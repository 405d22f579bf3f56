//! `RVQF` region feature file, little-endian:
//!
//! ```text
//! "RVQF" | u32 version | u32 K | u32 D
//! K × (f32 x1, f32 y1, f32 x2, f32 y2, f32 score, u32 category)
//! K×D f32 features, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::bbox::BBox;
use super::RegionFeatureSet;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RVQF";
pub const VERSION: u32 = 1;

pub fn write_rvqf<W: Write>(mut w: W, set: &RegionFeatureSet) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in [VERSION, set.len() as u32, set.dim() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for b in &set.boxes {
        for v in [b.x1, b.y1, b.x2, b.y2, b.score] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&b.category.to_le_bytes())?;
    }
    for v in set.features() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub fn read_rvqf<R: Read>(mut r: R) -> Result<RegionFeatureSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad region feature magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported RVQF version {version}")));
    }
    let k = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut boxes = Vec::with_capacity(k);
    for _ in 0..k {
        let (x1, y1, x2, y2, score) = (
            read_f32(&mut r)?,
            read_f32(&mut r)?,
            read_f32(&mut r)?,
            read_f32(&mut r)?,
            read_f32(&mut r)?,
        );
        let category = read_u32(&mut r)?;
        boxes.push(BBox {
            x1,
            y1,
            x2,
            y2,
            score,
            category,
        });
    }
    let mut raw = vec![0u8; k * d * 4];
    r.read_exact(&mut raw)?;
    let features = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if k == 0 {
        return Ok(RegionFeatureSet::empty(d.max(1)));
    }
    RegionFeatureSet::new(boxes, d, features)
}

pub fn save_rvqf(path: &Path, set: &RegionFeatureSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_rvqf(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn load_rvqf(path: &Path) -> Result<RegionFeatureSet> {
    read_rvqf(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_set() -> impl Strategy<Value = RegionFeatureSet> {
        (1usize..6, 1usize..5).prop_flat_map(|(k, d)| {
            (
                prop::collection::vec((any::<f32>(), any::<f32>(), any::<f32>(), any::<f32>(), any::<f32>(), any::<u32>()), k),
                prop::collection::vec(any::<f32>(), k * d),
            )
                .prop_map(move |(bs, feats)| {
                    let boxes = bs
                        .into_iter()
                        .map(|(x1, y1, x2, y2, score, category)| BBox { x1, y1, x2, y2, score, category })
                        .collect();
                    RegionFeatureSet::new(boxes, d, feats).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(set in arb_set()) {
            let mut buf = Vec::new();
            write_rvqf(&mut buf, &set).unwrap();
            prop_assert_eq!(buf.len(), 16 + set.len() * 24 + set.features().len() * 4);
            let back = read_rvqf(&buf[..]).unwrap();
            let mut again = Vec::new();
            write_rvqf(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
        }
    }

    #[test]
    fn header_layout() {
        let set = RegionFeatureSet::new(vec![BBox::new(1., 2., 3., 4., 0.5, 7).unwrap()], 2, vec![1.0, -1.0]).unwrap();
        let mut buf = Vec::new();
        write_rvqf(&mut buf, &set).unwrap();
        assert_eq!(&buf[..4], b"RVQF");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&buf[36..40], &7u32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_rvqf(&b"XXXX\x01\0\0\0"[..]), Err(Error::Format(_))));
        let set = RegionFeatureSet::new(vec![BBox::new(1., 2., 3., 4., 0.5, 7).unwrap()], 2, vec![1.0, -1.0]).unwrap();
        let mut buf = Vec::new();
        write_rvqf(&mut buf, &set).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_rvqf(&buf[..]).is_err());
    }
}
