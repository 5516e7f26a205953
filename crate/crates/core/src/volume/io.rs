//! Raw volume and mask files.
//!
//! Header (24 bytes): 4-byte magic, `u32` H, W, D, `u32` domain flag
//! (0 = raw, 1 = unit) and 4 reserved zero bytes, all little-endian. The
//! payload follows x fastest: f32 LE for volumes, one byte per voxel for
//! masks.

use std::fs;
use std::path::Path;

use super::{Dims, IntensityDomain, LabelMask, Volume};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: [u8; 4] = *b"VOL3";
pub const MASK_MAGIC: [u8; 4] = *b"MSK3";
pub const HEADER_LEN: usize = 24;

/// Voxel counts beyond this are rejected before allocating.
const MAX_VOXELS: u64 = 1 << 31;

fn header(magic: [u8; 4], dims: Dims, flag: u32) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&magic);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::DimensionOverflow(format!("{dims:?}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&flag.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    Ok(out)
}

fn parse_header(bytes: &[u8], magic: [u8; 4], elem: usize) -> Result<(Dims, u32, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let dims64 = [word(0) as u64, word(1) as u64, word(2) as u64];
    let flag = word(3);
    if dims64.contains(&0) {
        return Err(Error::Format(format!("zero dimension in {dims64:?}")));
    }
    let count = dims64
        .iter()
        .try_fold(1u64, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= MAX_VOXELS)
        .ok_or_else(|| Error::DimensionOverflow(format!("{dims64:?}")))?;
    let expected = HEADER_LEN + count as usize * elem;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let dims = [dims64[0] as usize, dims64[1] as usize, dims64[2] as usize];
    Ok((dims, flag, &bytes[HEADER_LEN..]))
}

pub fn volume_to_bytes(v: &Volume) -> Result<Vec<u8>> {
    if let Some(bad) = v.voxels().iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("voxel value {bad}")));
    }
    let flag = match v.domain() {
        IntensityDomain::Raw => 0,
        IntensityDomain::Unit => 1,
    };
    let mut out = header(VOLUME_MAGIC, v.dims(), flag)?;
    out.reserve(v.len() * 4);
    for &x in v.voxels() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn volume_from_bytes(bytes: &[u8]) -> Result<Volume> {
    let (dims, flag, payload) = parse_header(bytes, VOLUME_MAGIC, 4)?;
    let domain = match flag {
        0 => IntensityDomain::Raw,
        1 => IntensityDomain::Unit,
        f => return Err(Error::Format(format!("unknown intensity flag {f}"))),
    };
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims, voxels, domain)
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let bytes = volume_to_bytes(v)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    volume_from_bytes(&bytes)
}

pub fn write_mask(m: &LabelMask, path: &Path) -> Result<()> {
    let mut out = header(MASK_MAGIC, m.dims(), 0)?;
    out.extend_from_slice(m.voxels());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<LabelMask> {
    let (dims, _, payload) = parse_header(bytes, MASK_MAGIC, 1)?;
    LabelMask::new(dims, payload.to_vec())
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    mask_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_size_matches_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vol3");
        let v = Volume::zeros([32, 32, 32]).unwrap();
        write_volume(&v, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 24 + 32768 * 4);
        assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[test]
    fn distinct_errors() {
        let v = Volume::new([2, 2, 1], vec![0.0, 0.5, 1.0, 0.25], IntensityDomain::Unit).unwrap();
        let mut good = volume_to_bytes(&v).unwrap();
        assert!(matches!(
            volume_from_bytes(&good[..good.len() - 2]),
            Err(Error::Truncated { .. })
        ));
        let mut wide = good.clone();
        for i in 0..3 {
            wide[4 + 4 * i..8 + 4 * i].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(volume_from_bytes(&wide), Err(Error::DimensionOverflow(_))));
        good[0] = b'X';
        assert!(matches!(volume_from_bytes(&good), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.msk3");
        let m = LabelMask::new([3, 1, 2], vec![0, 1, 1, 0, 0, 1]).unwrap();
        write_mask(&m, &p).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
        assert!(matches!(read_volume(&p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_non_finite() {
        let v = Volume::new([1, 1, 1], vec![f32::NAN], IntensityDomain::Raw).unwrap();
        assert!(matches!(volume_to_bytes(&v), Err(Error::NonFinite(_))));
    }
}
