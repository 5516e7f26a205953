//! Causal multi-head attention kernels: exact softmax attention and the
//! FAVOR+ positive-random-feature approximation with prefix-sum
//! accumulation.
//!
//! Inputs are `(batch, len, model_dim)` row-major; head `h` owns columns
//! `h * head_dim .. (h + 1) * head_dim`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{gemm, lit, Mat, Real, Tensor};

/// Floor applied to the FAVOR+ normaliser.
pub const FAVOR_DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub enum AttentionMode<T> {
    Exact,
    /// Random feature matrix `omega`, shape `(features, head_dim)`.
    Favor(Tensor<T>),
}

/// Draw a FAVOR+ feature matrix of shape `(features, head_dim)`.
///
/// With `orthogonal`, rows are drawn in blocks of `head_dim` mutually
/// orthogonal directions and rescaled by independent chi-distributed norms,
/// so each row is still marginally `N(0, I)`.
pub fn draw_features<T: Real, R: Rng>(
    rng: &mut R,
    features: usize,
    head_dim: usize,
    orthogonal: bool,
) -> Tensor<T> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(features);
    while rows.len() < features {
        let mut block: Vec<Vec<f64>> = (0..head_dim)
            .map(|_| (0..head_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        if orthogonal {
            // Modified Gram-Schmidt to unit rows, then chi-distributed norms.
            for i in 0..head_dim {
                for j in 0..i {
                    let d: f64 = (0..head_dim).map(|c| block[i][c] * block[j][c]).sum();
                    for c in 0..head_dim {
                        block[i][c] -= d * block[j][c];
                    }
                }
                let norm = block[i].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for c in 0..head_dim {
                    block[i][c] /= norm;
                }
            }
            for row in block.iter_mut() {
                let chi = (0..head_dim)
                    .map(|_| {
                        let g: f64 = rng.sample(StandardNormal);
                        g * g
                    })
                    .sum::<f64>()
                    .sqrt();
                for x in row.iter_mut() {
                    *x *= chi;
                }
            }
        }
        for row in block {
            if rows.len() < features {
                rows.push(row);
            }
        }
    }
    let data = rows.into_iter().flatten().map(T::from_real).collect();
    Tensor::new(&[features, head_dim], data).expect("feature shape")
}

pub(crate) struct Layout {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub heads: usize,
}

impl Layout {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn gather<T: Real>(&self, x: &[T], b: usize, h: usize) -> Vec<T> {
        let dh = self.head_dim();
        let mut out = Vec::with_capacity(self.len * dh);
        for i in 0..self.len {
            let base = (b * self.len + i) * self.dim + h * dh;
            out.extend_from_slice(&x[base..base + dh]);
        }
        out
    }

    fn scatter_add<T: Real>(&self, dst: &mut [T], src: &[T], b: usize, h: usize) {
        let dh = self.head_dim();
        for i in 0..self.len {
            let base = (b * self.len + i) * self.dim + h * dh;
            for c in 0..dh {
                dst[base + c] = dst[base + c] + src[i * dh + c];
            }
        }
    }
}

/// Saved forward state needed by the backward pass.
pub(crate) enum Saved<T> {
    /// Attention probabilities per (batch, head), each `len x len`.
    Exact(Vec<Vec<T>>),
    /// Query/key features per (batch, head) and the clamped normaliser.
    Favor {
        omega: Tensor<T>,
        qf: Vec<Vec<T>>,
        kf: Vec<Vec<T>>,
        den: Vec<Vec<T>>,
        clamped: Vec<Vec<bool>>,
    },
}

pub(crate) fn forward<T: Real>(
    lay: &Layout,
    q: &[T],
    k: &[T],
    v: &[T],
    mode: &AttentionMode<T>,
) -> (Vec<T>, Saved<T>) {
    match mode {
        AttentionMode::Exact => exact_forward(lay, q, k, v),
        AttentionMode::Favor(omega) => favor_forward(lay, q, k, v, omega),
    }
}

fn exact_forward<T: Real>(lay: &Layout, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Saved<T>) {
    let (l, dh) = (lay.len, lay.head_dim());
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); q.len()];
    let mut probs = Vec::with_capacity(lay.batch * lay.heads);
    for b in 0..lay.batch {
        for h in 0..lay.heads {
            let (qh, kh, vh) = (lay.gather(q, b, h), lay.gather(k, b, h), lay.gather(v, b, h));
            let mut p = vec![T::zero(); l * l];
            gemm(Mat::new(&qh, l, dh), Mat::t(&kh, l, dh), &mut p, T::zero());
            for i in 0..l {
                let row = &mut p[i * l..(i + 1) * l];
                let mut max = T::neg_infinity();
                for x in row[..=i].iter_mut() {
                    *x = *x * scale;
                    max = max.max(*x);
                }
                let mut total = T::zero();
                for x in row[..=i].iter_mut() {
                    *x = (*x - max).exp();
                    total = total + *x;
                }
                for x in row[..=i].iter_mut() {
                    *x = *x / total;
                }
                row[i + 1..].fill(T::zero());
            }
            let mut oh = vec![T::zero(); l * dh];
            gemm(Mat::new(&p, l, l), Mat::new(&vh, l, dh), &mut oh, T::zero());
            lay.scatter_add(&mut out, &oh, b, h);
            probs.push(p);
        }
    }
    (out, Saved::Exact(probs))
}

/// `phi(u) = exp(omega u - |u|^2 / 2) / sqrt(m)` with `u = x / dh^(1/4)`.
fn features<T: Real>(x: &[T], l: usize, dh: usize, omega: &Tensor<T>) -> Vec<T> {
    let m = omega.shape()[0];
    let c = lit::<T>((dh as f64).powf(-0.25));
    let u: Vec<T> = x.iter().map(|&a| a * c).collect();
    let mut proj = vec![T::zero(); l * m];
    gemm(Mat::new(&u, l, dh), Mat::t(omega.data(), m, dh), &mut proj, T::zero());
    let inv_sqrt_m = lit::<T>(1.0 / (m as f64).sqrt());
    for i in 0..l {
        let half_sq = u[i * dh..(i + 1) * dh].iter().map(|&a| a * a).sum::<T>() * lit(0.5);
        for r in 0..m {
            let p = &mut proj[i * m + r];
            *p = (*p - half_sq).exp() * inv_sqrt_m;
        }
    }
    proj
}

fn favor_forward<T: Real>(
    lay: &Layout,
    q: &[T],
    k: &[T],
    v: &[T],
    omega: &Tensor<T>,
) -> (Vec<T>, Saved<T>) {
    let (l, dh, m) = (lay.len, lay.head_dim(), omega.shape()[0]);
    let floor = lit::<T>(FAVOR_DENOM_FLOOR);
    let mut out = vec![T::zero(); q.len()];
    let (mut qfs, mut kfs, mut dens, mut clamps) = (vec![], vec![], vec![], vec![]);
    for b in 0..lay.batch {
        for h in 0..lay.heads {
            let (qh, kh, vh) = (lay.gather(q, b, h), lay.gather(k, b, h), lay.gather(v, b, h));
            let qf = features(&qh, l, dh, omega);
            let kf = features(&kh, l, dh, omega);
            let mut state = vec![T::zero(); m * dh];
            let mut z = vec![T::zero(); m];
            let mut oh = vec![T::zero(); l * dh];
            let mut den = vec![T::zero(); l];
            let mut clamped = vec![false; l];
            for i in 0..l {
                let kfi = &kf[i * m..(i + 1) * m];
                let vi = &vh[i * dh..(i + 1) * dh];
                for r in 0..m {
                    z[r] = z[r] + kfi[r];
                    for c in 0..dh {
                        state[r * dh + c] = state[r * dh + c] + kfi[r] * vi[c];
                    }
                }
                let qfi = &qf[i * m..(i + 1) * m];
                let raw = (0..m).map(|r| qfi[r] * z[r]).sum::<T>();
                clamped[i] = raw < floor;
                den[i] = raw.max(floor);
                for c in 0..dh {
                    let num = (0..m).map(|r| qfi[r] * state[r * dh + c]).sum::<T>();
                    oh[i * dh + c] = num / den[i];
                }
            }
            lay.scatter_add(&mut out, &oh, b, h);
            qfs.push(qf);
            kfs.push(kf);
            dens.push(den);
            clamps.push(clamped);
        }
    }
    (
        out,
        Saved::Favor {
            omega: omega.clone(),
            qf: qfs,
            kf: kfs,
            den: dens,
            clamped: clamps,
        },
    )
}

pub(crate) struct Grads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

pub(crate) fn backward<T: Real>(
    lay: &Layout,
    q: &[T],
    k: &[T],
    v: &[T],
    gout: &[T],
    saved: &Saved<T>,
) -> Grads<T> {
    match saved {
        Saved::Exact(probs) => exact_backward(lay, q, k, v, gout, probs),
        Saved::Favor {
            omega,
            qf,
            kf,
            den,
            clamped,
        } => favor_backward(lay, q, k, v, gout, omega, qf, kf, den, clamped),
    }
}

fn exact_backward<T: Real>(
    lay: &Layout,
    q: &[T],
    k: &[T],
    v: &[T],
    gout: &[T],
    probs: &[Vec<T>],
) -> Grads<T> {
    let (l, dh) = (lay.len, lay.head_dim());
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let mut g = Grads {
        dq: vec![T::zero(); q.len()],
        dk: vec![T::zero(); k.len()],
        dv: vec![T::zero(); v.len()],
    };
    for b in 0..lay.batch {
        for h in 0..lay.heads {
            let p = &probs[b * lay.heads + h];
            let (qh, kh, vh) = (lay.gather(q, b, h), lay.gather(k, b, h), lay.gather(v, b, h));
            let go = lay.gather(gout, b, h);
            let mut dv = vec![T::zero(); l * dh];
            gemm(Mat::t(p, l, l), Mat::new(&go, l, dh), &mut dv, T::zero());
            let mut ds = vec![T::zero(); l * l];
            gemm(Mat::new(&go, l, dh), Mat::t(&vh, l, dh), &mut ds, T::zero());
            for i in 0..l {
                let row_p = &p[i * l..(i + 1) * l];
                let row = &mut ds[i * l..(i + 1) * l];
                let dot = (0..=i).map(|j| row_p[j] * row[j]).sum::<T>();
                for j in 0..l {
                    row[j] = if j <= i {
                        row_p[j] * (row[j] - dot) * scale
                    } else {
                        T::zero()
                    };
                }
            }
            let mut dq = vec![T::zero(); l * dh];
            gemm(Mat::new(&ds, l, l), Mat::new(&kh, l, dh), &mut dq, T::zero());
            let mut dk = vec![T::zero(); l * dh];
            gemm(Mat::t(&ds, l, l), Mat::new(&qh, l, dh), &mut dk, T::zero());
            lay.scatter_add(&mut g.dq, &dq, b, h);
            lay.scatter_add(&mut g.dk, &dk, b, h);
            lay.scatter_add(&mut g.dv, &dv, b, h);
        }
    }
    g
}

/// Chain rule through `phi`: `du = omega^T (dphi * phi) - u * sum(dphi * phi)`.
fn features_backward<T: Real>(
    x: &[T],
    dfeat: &[T],
    feat: &[T],
    l: usize,
    dh: usize,
    omega: &Tensor<T>,
) -> Vec<T> {
    let m = omega.shape()[0];
    let c = lit::<T>((dh as f64).powf(-0.25));
    let dproj: Vec<T> = dfeat.iter().zip(feat).map(|(&a, &b)| a * b).collect();
    let mut du = vec![T::zero(); l * dh];
    gemm(Mat::new(&dproj, l, m), Mat::new(omega.data(), m, dh), &mut du, T::zero());
    for i in 0..l {
        let s = dproj[i * m..(i + 1) * m].iter().copied().sum::<T>();
        for a in 0..dh {
            let u = x[i * dh + a] * c;
            du[i * dh + a] = (du[i * dh + a] - u * s) * c;
        }
    }
    du
}

#[allow(clippy::too_many_arguments)]
fn favor_backward<T: Real>(
    lay: &Layout,
    q: &[T],
    k: &[T],
    v: &[T],
    gout: &[T],
    omega: &Tensor<T>,
    qfs: &[Vec<T>],
    kfs: &[Vec<T>],
    dens: &[Vec<T>],
    clamps: &[Vec<bool>],
) -> Grads<T> {
    let (l, dh, m) = (lay.len, lay.head_dim(), omega.shape()[0]);
    let mut g = Grads {
        dq: vec![T::zero(); q.len()],
        dk: vec![T::zero(); k.len()],
        dv: vec![T::zero(); v.len()],
    };
    for b in 0..lay.batch {
        for h in 0..lay.heads {
            let idx = b * lay.heads + h;
            let (qf, kf, den, clamped) = (&qfs[idx], &kfs[idx], &dens[idx], &clamps[idx]);
            let (qh, kh, vh) = (lay.gather(q, b, h), lay.gather(k, b, h), lay.gather(v, b, h));
            let go = lay.gather(gout, b, h);
            let mut dnum = vec![T::zero(); l * dh];
            let mut dden = vec![T::zero(); l];
            let mut dqf = vec![T::zero(); l * m];
            let mut state = vec![T::zero(); m * dh];
            let mut z = vec![T::zero(); m];
            for i in 0..l {
                let kfi = &kf[i * m..(i + 1) * m];
                let vi = &vh[i * dh..(i + 1) * dh];
                for r in 0..m {
                    z[r] = z[r] + kfi[r];
                    for c in 0..dh {
                        state[r * dh + c] = state[r * dh + c] + kfi[r] * vi[c];
                    }
                }
                let qfi = &qf[i * m..(i + 1) * m];
                let gi = &go[i * dh..(i + 1) * dh];
                let mut g_dot_out = T::zero();
                for c in 0..dh {
                    let num = (0..m).map(|r| qfi[r] * state[r * dh + c]).sum::<T>();
                    g_dot_out = g_dot_out + gi[c] * num / den[i];
                    dnum[i * dh + c] = gi[c] / den[i];
                }
                dden[i] = if clamped[i] {
                    T::zero()
                } else {
                    -g_dot_out / den[i]
                };
                for r in 0..m {
                    let s = (0..dh)
                        .map(|c| state[r * dh + c] * dnum[i * dh + c])
                        .sum::<T>();
                    dqf[i * m + r] = s + z[r] * dden[i];
                }
            }
            let mut rev = vec![T::zero(); m * dh];
            let mut rz = vec![T::zero(); m];
            let mut dkf = vec![T::zero(); l * m];
            let mut dv = vec![T::zero(); l * dh];
            for i in (0..l).rev() {
                let qfi = &qf[i * m..(i + 1) * m];
                for r in 0..m {
                    rz[r] = rz[r] + qfi[r] * dden[i];
                    for c in 0..dh {
                        rev[r * dh + c] = rev[r * dh + c] + qfi[r] * dnum[i * dh + c];
                    }
                }
                let kfi = &kf[i * m..(i + 1) * m];
                let vi = &vh[i * dh..(i + 1) * dh];
                for r in 0..m {
                    let s = (0..dh).map(|c| rev[r * dh + c] * vi[c]).sum::<T>();
                    dkf[i * m + r] = s + rz[r];
                }
                for c in 0..dh {
                    dv[i * dh + c] = (0..m).map(|r| rev[r * dh + c] * kfi[r]).sum::<T>();
                }
            }
            let dq = features_backward(&qh, &dqf, qf, l, dh, omega);
            let dk = features_backward(&kh, &dkf, kf, l, dh, omega);
            lay.scatter_add(&mut g.dq, &dq, b, h);
            lay.scatter_add(&mut g.dk, &dk, b, h);
            lay.scatter_add(&mut g.dv, &dv, b, h);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_blocks_are_orthogonal() {
        let d = 8;
        let w = draw_features::<f64, _>(&mut crate::seed::rng(5), 2 * d, d, true);
        let row = |i: usize| &w.data()[i * d..(i + 1) * d];
        for b in 0..2 {
            for i in 0..d {
                for j in 0..i {
                    let dot: f64 = row(b * d + i).iter().zip(row(b * d + j)).map(|(x, y)| x * y).sum();
                    assert!(dot.abs() < 1e-10, "block {b} rows {i},{j}: {dot}");
                }
            }
        }
    }
}
