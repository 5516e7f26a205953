//! Procedural head phantoms: a bright ellipsoidal shell around a smoothed
//! noise interior, optional bright lesions, and a small notch in one
//! background corner that breaks every mirror symmetry. The head is also
//! shorter on the low side of the AP and IS axes, like a real skull.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{voxel_index, Dims, IntensityDomain, LabelMask, Volume};
use crate::error::{Error, Result};
use crate::seed;

/// Voxels at or above this intensity are treated as shell by the
/// shell-stripping corruption; nothing else in a phantom may reach it.
pub const SHELL_MIN_INTENSITY: f64 = 0.95;

const LESION_RETRIES: usize = 1000;
/// Empty voxels required between two lesions so they never touch.
const LESION_GAP: f64 = 2.0;
/// Per-phantom relative jitter of the head semi-axes.
const AXIS_JITTER: f64 = 0.06;
/// Head aspect (x, y, z) relative to `shell_radius`.
const HEAD_ASPECT: [f64; 3] = [0.86, 1.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub grid: Dims,
    /// Largest head semi-axis as a fraction of the half extent.
    pub shell_radius: f64,
    /// Shell thickness as a fraction of the head radius.
    pub shell_thickness: f64,
    pub shell_intensity: f64,
    /// Gaussian blur sigma of the interior texture, in voxels.
    pub texture_smoothness: f64,
    pub interior_band: (f64, f64),
    pub lesion_count: (usize, usize),
    /// Lesion radius range as a fraction of the half extent.
    pub lesion_radius: (f64, f64),
    pub lesion_intensity: f64,
    /// Fractional shortening of the head on the low side of each axis.
    /// Zero keeps that axis mirror-symmetric.
    pub taper: [f64; 3],
    pub asymmetry_marker: bool,
    pub marker_intensity: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: [32, 32, 32],
            shell_radius: 0.9,
            shell_thickness: 0.14,
            shell_intensity: 1.0,
            texture_smoothness: 1.5,
            interior_band: (0.25, 0.45),
            lesion_count: (1, 3),
            lesion_radius: (0.1, 0.2),
            lesion_intensity: 0.8,
            taper: [0.0, 0.12, 0.25],
            asymmetry_marker: true,
            marker_intensity: 0.9,
            seed: 0,
        }
    }
}

fn fraction_ok(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl PhantomSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("phantom spec: {m}")));
        if self.grid.iter().any(|&d| d < 8) {
            return bad(format!("grid {:?} needs at least 8 voxels per axis", self.grid));
        }
        for (name, v) in [
            ("shell_radius", self.shell_radius),
            ("shell_thickness", self.shell_thickness),
            ("lesion_radius.0", self.lesion_radius.0),
            ("lesion_radius.1", self.lesion_radius.1),
        ] {
            if !fraction_ok(v) {
                return bad(format!("{name} = {v} not in (0, 1)"));
            }
        }
        let (lo, hi) = self.interior_band;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!("interior band ({lo}, {hi})"));
        }
        if !(SHELL_MIN_INTENSITY..=1.0).contains(&self.shell_intensity) {
            return bad(format!(
                "shell intensity {} must lie in [{SHELL_MIN_INTENSITY}, 1]",
                self.shell_intensity
            ));
        }
        for (name, v) in [
            ("interior band", hi),
            ("lesion intensity", self.lesion_intensity),
            ("marker intensity", self.marker_intensity),
        ] {
            if !(v > 0.0 && v < SHELL_MIN_INTENSITY) {
                return bad(format!("{name} {v} must lie in (0, {SHELL_MIN_INTENSITY})"));
            }
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return bad(format!("lesion count range {:?}", self.lesion_count));
        }
        if self.lesion_radius.0 > self.lesion_radius.1 {
            return bad(format!("lesion radius range {:?}", self.lesion_radius));
        }
        if self.taper.iter().any(|t| !(0.0..1.0).contains(t)) {
            return bad(format!("taper {:?} must lie in [0, 1)", self.taper));
        }
        if self.texture_smoothness < 0.0 {
            return bad("negative texture smoothness".into());
        }
        Ok(())
    }

    /// Corner cube holding the asymmetry marker, as `[lo, hi)` per axis.
    pub fn marker_box(&self) -> [(usize, usize); 3] {
        let mut b = [(0, 0); 3];
        for a in 0..3 {
            let lo = self.grid[a] / 16;
            let side = (self.grid[a] * 5 / 32).max(2);
            b[a] = (lo, lo + side);
        }
        b
    }

    /// Expected non-zero voxel fraction: head ellipsoid plus marker, with
    /// the head semi-axes at their unjittered values.
    pub fn expected_foreground_fraction(&self) -> f64 {
        let n: f64 = self.grid.iter().map(|&d| d as f64).product();
        let head: f64 = (0..3)
            .map(|a| self.shell_radius * HEAD_ASPECT[a] * self.grid[a] as f64 / 2.0 * (1.0 - self.taper[a] / 2.0))
            .product::<f64>()
            * 4.0
            / 3.0
            * std::f64::consts::PI;
        let marker: f64 = if self.asymmetry_marker {
            self.marker_box().iter().map(|(lo, hi)| (hi - lo) as f64).product()
        } else {
            0.0
        };
        (head + marker) / n
    }
}

fn blur_axis(data: &mut [f64], dims: Dims, axis: usize, kernel: &[f64]) {
    let r = kernel.len() / 2;
    let n = dims[axis];
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut line = vec![0.0; n];
    for base in 0..data.len() {
        if (base / stride) % n != 0 {
            continue;
        }
        for (i, l) in line.iter_mut().enumerate() {
            *l = data[base + i * stride];
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                // reflect at the borders
                let j = i as isize + k as isize - r as isize;
                let j = if j < 0 {
                    (-j) as usize
                } else if j as usize >= n {
                    2 * (n - 1) - j as usize
                } else {
                    j as usize
                };
                acc += w * line[j.min(n - 1)];
            }
            data[base + i * stride] = acc;
        }
    }
}

/// Gaussian-smoothed white noise.
fn smooth_noise<R: Rng>(rng: &mut R, dims: Dims, sigma: f64) -> Vec<f64> {
    let n = dims.iter().product();
    let mut data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    if sigma > 0.0 {
        let r = (3.0 * sigma).ceil() as usize;
        let kernel: Vec<f64> = (0..=2 * r)
            .map(|k| {
                let d = k as f64 - r as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
        for axis in 0..3 {
            blur_axis(&mut data, dims, axis, &kernel);
        }
    }
    data
}

struct Lesion {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Lesion {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2)).sum::<f64>() <= 1.0
    }

    fn reach(&self) -> f64 {
        self.semi.iter().cloned().fold(0.0, f64::max)
    }
}

/// Generate one phantom and its lesion mask. Deterministic given `spec.seed`.
pub fn synth_phantom(spec: &PhantomSpec, with_lesions: bool) -> Result<(Volume, LabelMask)> {
    spec.validate()?;
    let dims = spec.grid;
    let mut rng = seed::rng(seed::derive(spec.seed, "phantom"));
    let center: Vec<f64> = dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
    let semi: Vec<f64> = (0..3)
        .map(|a| {
            let j = 1.0 + AXIS_JITTER * rng.gen_range(-1.0..1.0);
            spec.shell_radius * HEAD_ASPECT[a] * dims[a] as f64 / 2.0 * j
        })
        .collect();
    let inner = 1.0 - spec.shell_thickness;
    let radius = |x: usize, y: usize, z: usize| -> f64 {
        let p = [x as f64, y as f64, z as f64];
        (0..3)
            .map(|a| {
                let d = p[a] - center[a];
                let s = if d < 0.0 { semi[a] * (1.0 - spec.taper[a]) } else { semi[a] };
                (d / s).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    };

    let noise = smooth_noise(&mut rng, dims, spec.texture_smoothness);
    let n: usize = dims.iter().product();
    let mut vox = vec![0.0f64; n];
    let mut interior = vec![false; n];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = voxel_index(dims, x, y, z);
                let r = radius(x, y, z);
                if r <= inner {
                    interior[i] = true;
                    lo = lo.min(noise[i]);
                    hi = hi.max(noise[i]);
                } else if r <= 1.0 {
                    vox[i] = spec.shell_intensity;
                }
            }
        }
    }
    let (blo, bhi) = spec.interior_band;
    let span = (hi - lo).max(1e-12);
    for i in 0..n {
        if interior[i] {
            vox[i] = blo + (bhi - blo) * (noise[i] - lo) / span;
        }
    }

    let mut mask = vec![0u8; n];
    if with_lesions {
        let count = rng.gen_range(spec.lesion_count.0..=spec.lesion_count.1);
        let half = dims.iter().cloned().min().unwrap() as f64 / 2.0;
        let mut lesions: Vec<Lesion> = Vec::with_capacity(count);
        let mut tries = 0;
        while lesions.len() < count {
            tries += 1;
            if tries > LESION_RETRIES {
                return Err(Error::LesionPlacement(count));
            }
            let r = rng.gen_range(spec.lesion_radius.0..=spec.lesion_radius.1) * half;
            let semi_l = [
                r * rng.gen_range(0.8..1.2),
                r * rng.gen_range(0.8..1.2),
                r * rng.gen_range(0.8..1.2),
            ];
            let c = [
                rng.gen_range(0.0..dims[0] as f64 - 1.0),
                rng.gen_range(0.0..dims[1] as f64 - 1.0),
                rng.gen_range(0.0..dims[2] as f64 - 1.0),
            ];
            let cand = Lesion {
                center: c,
                semi: semi_l,
            };
            let separated = lesions.iter().all(|o| {
                let d = (0..3).map(|a| (o.center[a] - c[a]).powi(2)).sum::<f64>().sqrt();
                d > o.reach() + cand.reach() + LESION_GAP
            });
            if !separated {
                continue;
            }
            // every lesion voxel must sit in the interior band
            let mut voxels = Vec::new();
            let mut fits = true;
            let reach = cand.reach().ceil() as isize + 1;
            for dz in -reach..=reach {
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let p = [
                            c[0].round() as isize + dx,
                            c[1].round() as isize + dy,
                            c[2].round() as isize + dz,
                        ];
                        if (0..3).any(|a| p[a] < 0 || p[a] >= dims[a] as isize) {
                            continue;
                        }
                        let pf = [p[0] as f64, p[1] as f64, p[2] as f64];
                        if cand.contains(pf) {
                            let i = voxel_index(dims, p[0] as usize, p[1] as usize, p[2] as usize);
                            if !interior[i] {
                                fits = false;
                            }
                            voxels.push(i);
                        }
                    }
                }
            }
            if !fits || voxels.is_empty() {
                continue;
            }
            for i in voxels {
                vox[i] = spec.lesion_intensity;
                mask[i] = 1;
            }
            lesions.push(cand);
        }
    }

    if spec.asymmetry_marker {
        let b = spec.marker_box();
        for z in b[2].0..b[2].1 {
            for y in b[1].0..b[1].1 {
                for x in b[0].0..b[0].1 {
                    vox[voxel_index(dims, x, y, z)] = spec.marker_intensity;
                }
            }
        }
    }

    let volume = Volume::new(dims, vox.into_iter().map(|v| v as f32).collect(), IntensityDomain::Unit)?;
    Ok((volume, LabelMask::new(dims, mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Axis;

    #[test]
    fn deterministic_and_bounded() {
        let spec = PhantomSpec::default().with_seed(11);
        let (a, ma) = synth_phantom(&spec, true).unwrap();
        let (b, mb) = synth_phantom(&spec, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(a.domain(), IntensityDomain::Unit);
        assert_eq!(a.get(0, 0, 0), 0.0);
        assert_eq!(a.get(31, 31, 31), 0.0);
        assert!(ma.count() > 0);
    }

    #[test]
    fn no_lesions_gives_empty_mask() {
        let (_, m) = synth_phantom(&PhantomSpec::default().with_seed(2), false).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn marker_breaks_mirror_symmetry() {
        let (v, _) = synth_phantom(&PhantomSpec::default().with_seed(3), false).unwrap();
        for a in Axis::ALL {
            assert_ne!(v.flipped(a), v);
        }
    }

    #[test]
    fn shell_voxels_are_the_only_bright_ones() {
        let spec = PhantomSpec::default().with_seed(4);
        let (v, _) = synth_phantom(&spec, true).unwrap();
        let shell = v.voxels().iter().filter(|&&x| x as f64 >= SHELL_MIN_INTENSITY).count();
        assert!(shell > 0);
        assert!(v
            .voxels()
            .iter()
            .all(|&x| x as f64 >= SHELL_MIN_INTENSITY && x == spec.shell_intensity as f32
                || (x as f64) < SHELL_MIN_INTENSITY));
    }

    #[test]
    fn head_reaches_the_top_slab() {
        let (v, _) = synth_phantom(&PhantomSpec::default().with_seed(5), false).unwrap();
        let top: f32 = (0..32).flat_map(|y| (0..32).map(move |x| (x, y))).map(|(x, y)| v.get(x, y, 28)).sum();
        assert!(top > 0.0);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = PhantomSpec::default();
        s.shell_radius = 1.2;
        assert!(synth_phantom(&s, false).is_err());
        let mut s = PhantomSpec::default();
        s.lesion_intensity = 0.97;
        assert!(s.validate().is_err());
    }

    #[test]
    fn impossible_lesions_fail() {
        let mut s = PhantomSpec::default();
        s.lesion_count = (40, 40);
        s.lesion_radius = (0.3, 0.35);
        assert!(matches!(synth_phantom(&s, true), Err(Error::LesionPlacement(40))));
    }
}
