//! 3D convolution kernels (im2col + GEMM) shared by the tape primitives.
//!
//! Spatial axes are stored `(z, y, x)` with `x` fastest, matching the voxel
//! order of [`crate::volume::Volume`]. A geometry pairs an *image* side (the
//! input of a convolution, the output of a transposed convolution) with a
//! *grid* side (the strided side).

use super::tensor::{gemm, Mat, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub image: [usize; 3],
    pub grid: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

const AXES: [&str; 3] = ["z", "y", "x"];

impl ConvGeom {
    /// Geometry of a forward convolution over an input of extent `input`.
    pub fn conv(input: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::invalid("conv3d: kernel and stride must be >= 1"));
        }
        let mut grid = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad;
            if padded < kernel {
                return Err(Error::Shape {
                    op: "conv3d",
                    axis: format!("spatial axis {}", AXES[a]),
                    expected: kernel,
                    got: padded,
                });
            }
            grid[a] = (padded - kernel) / stride + 1;
        }
        Ok(ConvGeom {
            image: input,
            grid,
            kernel,
            stride,
            pad,
        })
    }

    /// Geometry of a transposed convolution over an input of extent `input`.
    pub fn transpose(input: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::invalid(
                "conv3d_transpose: kernel and stride must be >= 1",
            ));
        }
        let mut image = [0; 3];
        for a in 0..3 {
            let full = (input[a].max(1) - 1) * stride + kernel;
            if input[a] == 0 || full < 2 * pad + 1 {
                return Err(Error::Shape {
                    op: "conv3d_transpose",
                    axis: format!("spatial axis {}", AXES[a]),
                    expected: 2 * pad + 1,
                    got: full,
                });
            }
            image[a] = full - 2 * pad;
        }
        Ok(ConvGeom {
            image,
            grid: input,
            kernel,
            stride,
            pad,
        })
    }

    pub fn image_len(&self) -> usize {
        self.image.iter().product()
    }

    pub fn grid_len(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }
}

/// Unfold `channels x image` into a `(channels * k^3) x grid` column matrix.
pub fn im2col<T: Real>(src: &[T], channels: usize, g: &ConvGeom, dst: &mut [T]) {
    let [d0, d1, d2] = g.image;
    let [o0, o1, o2] = g.grid;
    let (k, s, p) = (g.kernel, g.stride as isize, g.pad as isize);
    let plen = g.grid_len();
    let ilen = g.image_len();
    let mut row = 0;
    for c in 0..channels {
        let src_c = &src[c * ilen..(c + 1) * ilen];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let out = &mut dst[row * plen..(row + 1) * plen];
                    let mut idx = 0;
                    for oz in 0..o0 {
                        let iz = oz as isize * s + kz as isize - p;
                        if iz < 0 || iz >= d0 as isize {
                            out[idx..idx + o1 * o2].fill(T::zero());
                            idx += o1 * o2;
                            continue;
                        }
                        for oy in 0..o1 {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= d1 as isize {
                                out[idx..idx + o2].fill(T::zero());
                                idx += o2;
                                continue;
                            }
                            let base = (iz as usize * d1 + iy as usize) * d2;
                            for ox in 0..o2 {
                                let ix = ox as isize * s + kx as isize - p;
                                out[idx] = if ix < 0 || ix >= d2 as isize {
                                    T::zero()
                                } else {
                                    src_c[base + ix as usize]
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto the image.
pub fn col2im<T: Real>(col: &[T], channels: usize, g: &ConvGeom, dst: &mut [T]) {
    let [d0, d1, d2] = g.image;
    let [o0, o1, o2] = g.grid;
    let (k, s, p) = (g.kernel, g.stride as isize, g.pad as isize);
    let plen = g.grid_len();
    let ilen = g.image_len();
    let mut row = 0;
    for c in 0..channels {
        let dst_c = &mut dst[c * ilen..(c + 1) * ilen];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * plen..(row + 1) * plen];
                    let mut idx = 0;
                    for oz in 0..o0 {
                        let iz = oz as isize * s + kz as isize - p;
                        if iz < 0 || iz >= d0 as isize {
                            idx += o1 * o2;
                            continue;
                        }
                        for oy in 0..o1 {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= d1 as isize {
                                idx += o2;
                                continue;
                            }
                            let base = (iz as usize * d1 + iy as usize) * d2;
                            for ox in 0..o2 {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < d2 as isize {
                                    dst_c[base + ix as usize] = dst_c[base + ix as usize] + src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution. `x`: `n x ci x image`, `w`: `co x ci x k^3`.
pub fn conv_forward<T: Real>(
    x: &[T],
    n: usize,
    ci: usize,
    co: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ilen, plen, rows) = (g.image_len(), g.grid_len(), ci * g.taps());
    let mut out = vec![T::zero(); n * co * plen];
    let mut col = vec![T::zero(); rows * plen];
    for b in 0..n {
        im2col(&x[b * ci * ilen..(b + 1) * ci * ilen], ci, g, &mut col);
        let dst = &mut out[b * co * plen..(b + 1) * co * plen];
        gemm(Mat::new(w, co, rows), Mat::new(&col, rows, plen), dst, T::zero());
        if let Some(bias) = bias {
            for (c, chunk) in dst.chunks_mut(plen).enumerate() {
                for v in chunk {
                    *v = *v + bias[c];
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &[T],
    gout: &[T],
    n: usize,
    ci: usize,
    co: usize,
    g: &ConvGeom,
    w: &[T],
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let (ilen, plen, rows) = (g.image_len(), g.grid_len(), ci * g.taps());
    let mut dx = need_dx.then(|| vec![T::zero(); n * ci * ilen]);
    let mut dw = need_dw.then(|| vec![T::zero(); co * rows]);
    let mut db = vec![T::zero(); co];
    let mut col = vec![T::zero(); rows * plen];
    for b in 0..n {
        let go = &gout[b * co * plen..(b + 1) * co * plen];
        for (c, chunk) in go.chunks(plen).enumerate() {
            db[c] = db[c] + chunk.iter().copied().sum::<T>();
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * ci * ilen..(b + 1) * ci * ilen], ci, g, &mut col);
            gemm(Mat::new(go, co, plen), Mat::t(&col, rows, plen), dw, T::one());
        }
        if let Some(dx) = dx.as_mut() {
            gemm(Mat::t(w, co, rows), Mat::new(go, co, plen), &mut col, T::zero());
            col2im(&col, ci, g, &mut dx[b * ci * ilen..(b + 1) * ci * ilen]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `x`: `n x ci x grid`, `w`: `ci x co x k^3`.
pub fn convt_forward<T: Real>(
    x: &[T],
    n: usize,
    ci: usize,
    co: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ilen, plen, rows) = (g.image_len(), g.grid_len(), co * g.taps());
    let mut out = vec![T::zero(); n * co * ilen];
    let mut col = vec![T::zero(); rows * plen];
    for b in 0..n {
        gemm(
            Mat::t(w, ci, rows),
            Mat::new(&x[b * ci * plen..(b + 1) * ci * plen], ci, plen),
            &mut col,
            T::zero(),
        );
        let dst = &mut out[b * co * ilen..(b + 1) * co * ilen];
        col2im(&col, co, g, dst);
        if let Some(bias) = bias {
            for (c, chunk) in dst.chunks_mut(ilen).enumerate() {
                for v in chunk {
                    *v = *v + bias[c];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn convt_backward<T: Real>(
    x: &[T],
    gout: &[T],
    n: usize,
    ci: usize,
    co: usize,
    g: &ConvGeom,
    w: &[T],
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let (ilen, plen, rows) = (g.image_len(), g.grid_len(), co * g.taps());
    let mut dx = need_dx.then(|| vec![T::zero(); n * ci * plen]);
    let mut dw = need_dw.then(|| vec![T::zero(); ci * rows]);
    let mut db = vec![T::zero(); co];
    let mut col = vec![T::zero(); rows * plen];
    for b in 0..n {
        let go = &gout[b * co * ilen..(b + 1) * co * ilen];
        for (c, chunk) in go.chunks(ilen).enumerate() {
            db[c] = db[c] + chunk.iter().copied().sum::<T>();
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(go, co, g, &mut col);
        if let Some(dx) = dx.as_mut() {
            gemm(
                Mat::new(w, ci, rows),
                Mat::new(&col, rows, plen),
                &mut dx[b * ci * plen..(b + 1) * ci * plen],
                T::zero(),
            );
        }
        if let Some(dw) = dw.as_mut() {
            gemm(
                Mat::new(&x[b * ci * plen..(b + 1) * ci * plen], ci, plen),
                Mat::t(&col, rows, plen),
                dw,
                T::one(),
            );
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2x2x2 max pooling with stride 2; returns pooled values and the flat
/// source index of each maximum (first maximum wins).
pub fn max_pool2<T: Real>(x: &[T], planes: usize, dims: [usize; 3]) -> (Vec<T>, Vec<usize>, [usize; 3]) {
    let out_dims = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let ilen: usize = dims.iter().product();
    let olen: usize = out_dims.iter().product();
    let mut out = Vec::with_capacity(planes * olen);
    let mut arg = Vec::with_capacity(planes * olen);
    for p in 0..planes {
        for oz in 0..out_dims[0] {
            for oy in 0..out_dims[1] {
                for ox in 0..out_dims[2] {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = p * ilen
                                    + ((2 * oz + dz) * dims[1] + 2 * oy + dy) * dims[2]
                                    + 2 * ox
                                    + dx;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (out, arg, out_dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shape_arithmetic() {
        let g = ConvGeom::conv([32, 32, 32], 4, 2, 1).unwrap();
        assert_eq!(g.grid, [16, 16, 16]);
        let t = ConvGeom::transpose([4, 4, 4], 2, 2, 0).unwrap();
        assert_eq!(t.image, [8, 8, 8]);
        let t = ConvGeom::transpose([16, 16, 16], 4, 2, 1).unwrap();
        assert_eq!(t.image, [32, 32, 32]);
    }

    #[test]
    fn conv_rejects_too_small_input_naming_axis() {
        let err = ConvGeom::conv([8, 1, 8], 3, 1, 0).unwrap_err();
        assert!(err.to_string().contains("axis y"), "{err}");
    }

    #[test]
    fn max_pool_picks_maxima() {
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let (out, arg, dims) = max_pool2(&x, 1, [2, 2, 2]);
        assert_eq!(out, vec![7.0]);
        assert_eq!(arg, vec![7]);
        assert_eq!(dims, [1, 1, 1]);
    }
}
