//! Dense 3D scalar volumes, label masks, preprocessing and synthetic head
//! phantoms.
//!
//! Voxels are stored x fastest: index `x + H * (y + W * z)` for dims
//! `(H, W, D)`. The x axis runs left-right, y anterior-posterior and z
//! inferior-superior.

mod io;
mod manifest;
mod phantom;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_mask, read_volume, write_mask, write_volume, HEADER_LEN, MASK_MAGIC, VOLUME_MAGIC};
pub use manifest::{DatasetManifest, ManifestEntry, NORMAL_CLASS};
pub use phantom::{synth_phantom, PhantomSpec, SHELL_MIN_INTENSITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityDomain {
    Raw,
    /// Every voxel in `[0, 1]`.
    Unit,
}

/// Anatomical axis of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    /// Left-right, the x axis.
    LR,
    /// Anterior-posterior, the y axis.
    AP,
    /// Inferior-superior, the z axis.
    IS,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::LR, Axis::AP, Axis::IS];

    pub fn index(self) -> usize {
        match self {
            Axis::LR => 0,
            Axis::AP => 1,
            Axis::IS => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::LR => "x",
            Axis::AP => "y",
            Axis::IS => "z",
        }
    }
}

pub type Dims = [usize; 3];

#[inline]
pub fn voxel_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

#[inline]
pub fn voxel_coords(dims: Dims, i: usize) -> [usize; 3] {
    [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])]
}

fn checked_count(dims: Dims) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("dims {dims:?} must be positive")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimensionOverflow(format!("{dims:?}")))
}

fn check_len(dims: Dims, len: usize) -> Result<()> {
    let n = checked_count(dims)?;
    if n != len {
        return Err(Error::Shape {
            op: "volume",
            axis: "voxel count".into(),
            expected: n,
            got: len,
        });
    }
    Ok(())
}

fn flip_in_place<V: Copy>(dims: Dims, data: &[V], axis: Axis) -> Vec<V> {
    let mut out = Vec::with_capacity(data.len());
    let [h, w, d] = dims;
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                let (sx, sy, sz) = match axis {
                    Axis::LR => (h - 1 - x, y, z),
                    Axis::AP => (x, w - 1 - y, z),
                    Axis::IS => (x, y, d - 1 - z),
                };
                out.push(data[voxel_index(dims, sx, sy, sz)]);
            }
        }
    }
    out
}

/// Dense scalar grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxels: Vec<f32>,
    domain: IntensityDomain,
}

impl Volume {
    pub fn new(dims: Dims, voxels: Vec<f32>, domain: IntensityDomain) -> Result<Self> {
        check_len(dims, voxels.len())?;
        if domain == IntensityDomain::Unit {
            if let Some(bad) = voxels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!(
                    "unit-tagged volume holds out-of-range value {bad}"
                )));
            }
        }
        Ok(Volume {
            dims,
            voxels,
            domain,
        })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        let n = checked_count(dims)?;
        Self::new(dims, vec![0.0; n], IntensityDomain::Unit)
    }

    /// Build a unit volume, clamping every value into `[0, 1]`.
    pub fn unit_clamped(dims: Dims, mut voxels: Vec<f32>) -> Result<Self> {
        for v in &mut voxels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(dims, voxels, IntensityDomain::Unit)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn domain(&self) -> IntensityDomain {
        self.domain
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[voxel_index(self.dims, x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum::<f64>() / self.voxels.len() as f64
    }

    pub fn flipped(&self, axis: Axis) -> Volume {
        Volume {
            dims: self.dims,
            voxels: flip_in_place(self.dims, &self.voxels, axis),
            domain: self.domain,
        }
    }

    /// Apply `f` to every voxel and tag the result as `domain`.
    pub fn map(&self, domain: IntensityDomain, f: impl Fn(f32) -> f32) -> Result<Volume> {
        Volume::new(self.dims, self.voxels.iter().map(|&v| f(v)).collect(), domain)
    }

    /// Centered crop or zero pad to `target`.
    pub fn crop_or_pad(&self, target: Dims) -> Result<Volume> {
        checked_count(target)?;
        let offs: Vec<isize> = (0..3)
            .map(|a| (self.dims[a] as isize - target[a] as isize).div_euclid(2))
            .collect();
        let mut out = Vec::with_capacity(target.iter().product());
        for z in 0..target[2] {
            for y in 0..target[1] {
                for x in 0..target[0] {
                    let src = [x as isize + offs[0], y as isize + offs[1], z as isize + offs[2]];
                    let inside = (0..3).all(|a| src[a] >= 0 && (src[a] as usize) < self.dims[a]);
                    out.push(if inside {
                        self.get(src[0] as usize, src[1] as usize, src[2] as usize)
                    } else {
                        0.0
                    });
                }
            }
        }
        Volume::new(target, out, self.domain)
    }
}

/// Binary voxel mask paired with a [`Volume`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims,
    voxels: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims, voxels: Vec<u8>) -> Result<Self> {
        check_len(dims, voxels.len())?;
        if let Some(bad) = voxels.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {bad} is not binary")));
        }
        Ok(LabelMask { dims, voxels })
    }

    pub fn empty(dims: Dims) -> Result<Self> {
        let n = checked_count(dims)?;
        Ok(LabelMask {
            dims,
            voxels: vec![0; n],
        })
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize) -> bool) -> Result<Self> {
        let n = checked_count(dims)?;
        Ok(LabelMask {
            dims,
            voxels: (0..n).map(|i| f(i) as u8).collect(),
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[voxel_index(self.dims, x, y, z)] == 1
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1).count()
    }

    pub fn flipped(&self, axis: Axis) -> LabelMask {
        LabelMask {
            dims: self.dims,
            voxels: flip_in_place(self.dims, &self.voxels, axis),
        }
    }

    pub fn crop_or_pad(&self, target: Dims) -> Result<LabelMask> {
        let as_vol = Volume::new(
            self.dims,
            self.voxels.iter().map(|&v| v as f32).collect(),
            IntensityDomain::Unit,
        )?;
        let out = as_vol.crop_or_pad(target)?;
        LabelMask::new(target, out.voxels.iter().map(|&v| (v > 0.5) as u8).collect())
    }
}

/// Intensity mapping applied by [`preprocess`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PreprocessMode {
    ClampRescale { lo: f64, hi: f64 },
    Minmax,
}

/// Map intensities into `[0, 1]` and crop or pad (centered) to `target`.
pub fn preprocess(v: &Volume, mode: PreprocessMode, target: Dims) -> Result<Volume> {
    checked_count(target)?;
    let mapped = match mode {
        PreprocessMode::ClampRescale { lo, hi } => {
            if !(lo < hi) {
                return Err(Error::invalid(format!("clamp bounds lo={lo} hi={hi}")));
            }
            let span = hi - lo;
            v.map(IntensityDomain::Unit, |x| {
                (((x as f64).clamp(lo, hi) - lo) / span).clamp(0.0, 1.0) as f32
            })?
        }
        PreprocessMode::Minmax => {
            let (lo, hi) = v.min_max();
            if lo == hi {
                return Err(Error::ConstantInput(lo as f64));
            }
            let (lo, span) = (lo as f64, hi as f64 - lo as f64);
            v.map(IntensityDomain::Unit, |x| (((x as f64) - lo) / span).clamp(0.0, 1.0) as f32)?
        }
    };
    mapped.crop_or_pad(target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_rescale_bounds() {
        let v = Volume::new([2, 1, 1], vec![-15.0, 100.0], IntensityDomain::Raw).unwrap();
        let out = preprocess(&v, PreprocessMode::ClampRescale { lo: -15.0, hi: 100.0 }, [2, 1, 1]).unwrap();
        assert_eq!(out.voxels(), &[0.0, 1.0]);
        assert_eq!(out.domain(), IntensityDomain::Unit);
    }

    #[test]
    fn three_value_affine_map() {
        // (v - lo)/(hi - lo) with lo = -15, hi = 100; 42.5 sits at the midpoint
        let vals: Vec<f32> = (0..27).map(|i| [-20.0, 42.5, 200.0][i % 3]).collect();
        let v = Volume::new([3, 3, 3], vals, IntensityDomain::Raw).unwrap();
        let out = preprocess(&v, PreprocessMode::ClampRescale { lo: -15.0, hi: 100.0 }, [3, 3, 3]).unwrap();
        for (i, &o) in out.voxels().iter().enumerate() {
            assert_eq!(o, [0.0, 0.5, 1.0][i % 3]);
        }
    }

    #[test]
    fn minmax_rejects_constant() {
        let v = Volume::new([2, 2, 2], vec![3.0; 8], IntensityDomain::Raw).unwrap();
        assert!(matches!(
            preprocess(&v, PreprocessMode::Minmax, [2, 2, 2]),
            Err(Error::ConstantInput(_))
        ));
    }

    #[test]
    fn centered_crop_and_pad() {
        let v = Volume::new([4, 1, 1], vec![0.1, 0.2, 0.3, 0.4], IntensityDomain::Unit).unwrap();
        assert_eq!(v.crop_or_pad([2, 1, 1]).unwrap().voxels(), &[0.2, 0.3]);
        assert_eq!(
            v.crop_or_pad([6, 1, 1]).unwrap().voxels(),
            &[0.0, 0.1, 0.2, 0.3, 0.4, 0.0]
        );
    }

    #[test]
    fn flip_twice_is_identity() {
        let v = Volume::new([2, 3, 4], (0..24).map(|i| i as f32 / 24.0).collect(), IntensityDomain::Unit).unwrap();
        for a in Axis::ALL {
            assert_ne!(v.flipped(a), v);
            assert_eq!(v.flipped(a).flipped(a), v);
        }
        assert_eq!(v.flipped(Axis::LR).get(0, 0, 0), v.get(1, 0, 0));
        assert_eq!(v.flipped(Axis::IS).get(0, 0, 0), v.get(0, 0, 3));
    }

    #[test]
    fn unit_tag_enforced() {
        assert!(Volume::new([1, 1, 1], vec![1.5], IntensityDomain::Unit).is_err());
        assert!(LabelMask::new([1, 1, 1], vec![2]).is_err());
        assert!(Volume::new([2, 1, 1], vec![0.5], IntensityDomain::Unit).is_err());
    }
}
