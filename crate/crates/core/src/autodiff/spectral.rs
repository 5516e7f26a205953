//! 3D DFT helpers for the spectral reconstruction loss.

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use super::tensor::Real;

/// Unnormalized 3D DFT of one `(d0, d1, d2)` block (`d2` fastest).
pub fn dft3<T: Real>(data: &[Complex<T>], dims: [usize; 3], direction: FftDirection) -> Vec<Complex<T>> {
    let mut buf = data.to_vec();
    let mut planner = FftPlanner::<T>::new();
    let [d0, d1, d2] = dims;
    // x: contiguous rows.
    let fx = planner.plan_fft(d2, direction);
    for row in buf.chunks_mut(d2) {
        fx.process(row);
    }
    // y and z: gather strided lines.
    let fy = planner.plan_fft(d1, direction);
    let mut line = vec![Complex::new(T::zero(), T::zero()); d1.max(d0)];
    for z in 0..d0 {
        for x in 0..d2 {
            for y in 0..d1 {
                line[y] = buf[(z * d1 + y) * d2 + x];
            }
            fy.process(&mut line[..d1]);
            for y in 0..d1 {
                buf[(z * d1 + y) * d2 + x] = line[y];
            }
        }
    }
    let fz = planner.plan_fft(d0, direction);
    for y in 0..d1 {
        for x in 0..d2 {
            for z in 0..d0 {
                line[z] = buf[(z * d1 + y) * d2 + x];
            }
            fz.process(&mut line[..d0]);
            for z in 0..d0 {
                buf[(z * d1 + y) * d2 + x] = line[z];
            }
        }
    }
    buf
}

pub fn forward_real<T: Real>(data: &[T], dims: [usize; 3]) -> Vec<Complex<T>> {
    let c: Vec<Complex<T>> = data.iter().map(|&x| Complex::new(x, T::zero())).collect();
    dft3(&c, dims, FftDirection::Forward)
}

pub fn magnitude<T: Real>(spec: &[Complex<T>]) -> Vec<T> {
    spec.iter().map(|c| c.norm()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_dft() {
        let dims = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 5) as f64 - 1.5).collect();
        let fast = forward_real(&data, dims);
        for k0 in 0..2 {
            for k1 in 0..3 {
                for k2 in 0..4 {
                    let mut acc = Complex::new(0.0, 0.0);
                    for n0 in 0..2 {
                        for n1 in 0..3 {
                            for n2 in 0..4 {
                                let ph = -2.0
                                    * std::f64::consts::PI
                                    * ((k0 * n0) as f64 / 2.0
                                        + (k1 * n1) as f64 / 3.0
                                        + (k2 * n2) as f64 / 4.0);
                                acc += Complex::new(ph.cos(), ph.sin())
                                    * data[(n0 * 3 + n1) * 4 + n2];
                            }
                        }
                    }
                    let f = fast[(k0 * 3 + k1) * 4 + k2];
                    assert!((f - acc).norm() < 1e-9);
                }
            }
        }
    }
}
