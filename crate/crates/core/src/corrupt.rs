//! Near-OOD corruptions of unit volumes. Spatial manipulations are applied
//! to the label mask as well.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{voxel_index, Axis, IntensityDomain, LabelMask, Volume, SHELL_MIN_INTENSITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkRegion {
    /// The highest-index IS slab.
    Top,
    /// The slab centred on the IS axis.
    Middle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorruptionKind {
    Noise { sigma: f64 },
    BackgroundValue { value: f64 },
    Flip { axis: Axis },
    /// `thickness: None` resolves to 1/8 of the IS extent when applied.
    Chunk { region: ChunkRegion, thickness: Option<usize> },
    ShellStrip,
    Scale { factor: f64 },
}

impl CorruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::Noise { .. } => "noise",
            CorruptionKind::BackgroundValue { .. } => "background_value",
            CorruptionKind::Flip { .. } => "flip",
            CorruptionKind::Chunk { .. } => "chunk",
            CorruptionKind::ShellStrip => "shell_strip",
            CorruptionKind::Scale { .. } => "scale",
        }
    }

    /// Class label used in reports, e.g. `noise_0.01` or `flip_lr`.
    pub fn class_label(&self) -> String {
        match self {
            CorruptionKind::Noise { sigma } => format!("noise_{sigma}"),
            CorruptionKind::BackgroundValue { value } => format!("background_value_{value:.1}"),
            CorruptionKind::Flip { axis } => format!("flip_{}", format!("{axis:?}").to_lowercase()),
            CorruptionKind::Chunk { region, .. } => {
                format!("chunk_{}", format!("{region:?}").to_lowercase())
            }
            CorruptionKind::ShellStrip => "shell_strip".into(),
            CorruptionKind::Scale { factor } => format!("scale_{factor}"),
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, CorruptionKind::Flip { .. })
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        match *self {
            CorruptionKind::Noise { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                bad(format!("noise sigma {sigma} must be positive"))
            }
            CorruptionKind::BackgroundValue { value } if !(value > 0.0 && value <= 1.0) => {
                bad(format!("background value {value} not in (0, 1]"))
            }
            CorruptionKind::Chunk {
                thickness: Some(t), ..
            } if t < 1 || t >= dims[2] => bad(format!(
                "chunk thickness {t} must be in [1, {})",
                dims[2]
            )),
            CorruptionKind::Scale { factor } if !(factor > 0.0 && factor < 1.0) => {
                bad(format!("scale factor {factor} not in (0, 1)"))
            }
            _ => Ok(()),
        }
    }

    /// The parameter set as it will actually be applied to `dims`.
    pub fn resolved(&self, dims: [usize; 3]) -> CorruptionKind {
        match *self {
            CorruptionKind::Chunk {
                region,
                thickness: None,
            } => CorruptionKind::Chunk {
                region,
                thickness: Some(default_chunk_thickness(dims[2])),
            },
            k => k,
        }
    }
}

pub fn default_chunk_thickness(extent: usize) -> usize {
    (extent / 8).max(1)
}

/// IS slice range `[lo, hi)` removed by a chunk corruption.
pub fn chunk_slab(region: ChunkRegion, thickness: usize, depth: usize) -> (usize, usize) {
    match region {
        ChunkRegion::Top => (depth - thickness, depth),
        ChunkRegion::Middle => {
            let lo = (depth - thickness) / 2;
            (lo, lo + thickness)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub kind: CorruptionKind,
    pub seed: u64,
    /// Slice range touched by a chunk corruption.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub slab: Option<(usize, usize)>,
}

impl CorruptionRecord {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

/// Apply one corruption. Deterministic given `(inputs, kind, seed)`.
pub fn apply(v: &Volume, m: &LabelMask, kind: CorruptionKind, seed_value: u64) -> Result<(Volume, LabelMask, CorruptionRecord)> {
    if v.dims() != m.dims() {
        return Err(Error::Shape {
            op: "corrupt",
            axis: "mask dims".into(),
            expected: v.len(),
            got: m.voxels().len(),
        });
    }
    if v.domain() != IntensityDomain::Unit {
        return Err(Error::invalid("corruptions apply to unit-tagged volumes"));
    }
    kind.validate(v.dims())?;
    let kind = kind.resolved(v.dims());
    let dims = v.dims();
    let mut slab = None;
    let (out, mask) = match kind {
        CorruptionKind::Noise { sigma } => {
            let mut rng = seed::rng(seed::derive(seed_value, "noise"));
            let vox = v
                .voxels()
                .iter()
                .map(|&x| {
                    let e: f64 = rng.sample(StandardNormal);
                    (x as f64 + sigma * e).clamp(0.0, 1.0) as f32
                })
                .collect();
            (Volume::new(dims, vox, IntensityDomain::Unit)?, m.clone())
        }
        CorruptionKind::BackgroundValue { value } => {
            let c = value as f32;
            (v.map(IntensityDomain::Unit, |x| if x == 0.0 { c } else { x })?, m.clone())
        }
        CorruptionKind::Flip { axis } => (v.flipped(axis), m.flipped(axis)),
        CorruptionKind::Chunk { region, thickness } => {
            let (lo, hi) = chunk_slab(region, thickness.expect("resolved"), dims[2]);
            slab = Some((lo, hi));
            let mut vox = v.voxels().to_vec();
            for z in lo..hi {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        vox[voxel_index(dims, x, y, z)] = 0.0;
                    }
                }
            }
            (Volume::new(dims, vox, IntensityDomain::Unit)?, m.clone())
        }
        CorruptionKind::ShellStrip => {
            let t = SHELL_MIN_INTENSITY as f32;
            (v.map(IntensityDomain::Unit, |x| if x >= t { 0.0 } else { x })?, m.clone())
        }
        CorruptionKind::Scale { factor } => {
            let f = factor as f32;
            (v.map(IntensityDomain::Unit, |x| x * f)?, m.clone())
        }
    };
    Ok((
        out,
        mask,
        CorruptionRecord {
            kind,
            seed: seed_value,
            slab,
        },
    ))
}

/// Replay a record on the original inputs.
pub fn replay(v: &Volume, m: &LabelMask, record: &CorruptionRecord) -> Result<(Volume, LabelMask, CorruptionRecord)> {
    apply(v, m, record.kind, record.seed)
}

/// The fourteen corruption settings, in report order.
pub fn kinds() -> Vec<CorruptionKind> {
    use CorruptionKind::*;
    vec![
        Noise { sigma: 0.01 },
        Noise { sigma: 0.1 },
        Noise { sigma: 0.2 },
        BackgroundValue { value: 0.3 },
        BackgroundValue { value: 0.6 },
        BackgroundValue { value: 1.0 },
        Flip { axis: Axis::LR },
        Flip { axis: Axis::AP },
        Flip { axis: Axis::IS },
        Chunk {
            region: ChunkRegion::Top,
            thickness: None,
        },
        Chunk {
            region: ChunkRegion::Middle,
            thickness: None,
        },
        ShellStrip,
        Scale { factor: 0.1 },
        Scale { factor: 0.01 },
    ]
}

/// Class labels of [`kinds`], in the same order.
pub fn class_labels() -> Vec<String> {
    kinds().iter().map(|k| k.class_label()).collect()
}

pub fn suite(v: &Volume, m: &LabelMask, base_seed: u64) -> Result<Vec<(Volume, LabelMask, CorruptionRecord)>> {
    kinds()
        .into_iter()
        .enumerate()
        .map(|(i, k)| apply(v, m, k, seed::derive_index(base_seed, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{synth_phantom, PhantomSpec};

    fn phantom() -> (Volume, LabelMask) {
        synth_phantom(&PhantomSpec::default().with_seed(9), true).unwrap()
    }

    #[test]
    fn suite_has_fourteen_replayable_entries() {
        let (v, m) = phantom();
        let s = suite(&v, &m, 5).unwrap();
        assert_eq!(s.len(), 14);
        for (cv, cm, rec) in &s {
            let (rv, rm, _) = replay(&v, &m, rec).unwrap();
            assert_eq!(&rv, cv);
            assert_eq!(&rm, cm);
        }
        let labels = class_labels();
        assert_eq!(labels[0], "noise_0.01");
        assert_eq!(labels[5], "background_value_1.0");
        assert_eq!(labels[6], "flip_lr");
        assert_eq!(labels[9], "chunk_top");
        assert_eq!(labels[13], "scale_0.01");
    }

    #[test]
    fn scale_max() {
        let (v, m) = phantom();
        let (out, _, _) = apply(&v, &m, CorruptionKind::Scale { factor: 0.01 }, 0).unwrap();
        assert_eq!(out.min_max().1, v.min_max().1 * 0.01f32);
    }

    #[test]
    fn chunk_slabs() {
        assert_eq!(chunk_slab(ChunkRegion::Top, 4, 32), (28, 32));
        assert_eq!(chunk_slab(ChunkRegion::Middle, 4, 32), (14, 18));
        let (v, m) = phantom();
        let (out, om, rec) = apply(
            &v,
            &m,
            CorruptionKind::Chunk {
                region: ChunkRegion::Middle,
                thickness: None,
            },
            0,
        )
        .unwrap();
        assert_eq!(rec.slab, Some((14, 18)));
        assert_eq!(om, m);
        assert!((0..32).all(|x| out.get(x, 16, 15) == 0.0));
    }

    #[test]
    fn shell_strip_removes_only_the_shell() {
        let (v, m) = phantom();
        let (out, _, _) = apply(&v, &m, CorruptionKind::ShellStrip, 0).unwrap();
        for (a, b) in v.voxels().iter().zip(out.voxels()) {
            if *a >= SHELL_MIN_INTENSITY as f32 {
                assert_eq!(*b, 0.0);
            } else {
                assert_eq!(a, b);
            }
        }
        assert!(out.min_max().1 < v.min_max().1);
    }

    #[test]
    fn invalid_parameters() {
        let (v, m) = phantom();
        for k in [
            CorruptionKind::Noise { sigma: 0.0 },
            CorruptionKind::BackgroundValue { value: 0.0 },
            CorruptionKind::Scale { factor: 1.0 },
            CorruptionKind::Chunk {
                region: ChunkRegion::Top,
                thickness: Some(32),
            },
        ] {
            assert!(apply(&v, &m, k, 0).is_err(), "{k:?}");
        }
        let other = LabelMask::empty([16, 16, 16]).unwrap();
        assert!(apply(&v, &other, CorruptionKind::ShellStrip, 0).is_err());
    }

    #[test]
    fn record_json_uses_snake_case_names() {
        let r = CorruptionRecord {
            kind: CorruptionKind::BackgroundValue { value: 0.6 },
            seed: 1,
            slab: None,
        };
        let j = serde_json::to_string(&r).unwrap();
        assert!(j.contains("\"background_value\""), "{j}");
        let back: CorruptionRecord = serde_json::from_str(&j).unwrap();
        assert_eq!(back, r);
    }
}
