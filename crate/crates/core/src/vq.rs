//! Nearest-neighbour vector quantization with an EMA-maintained codebook.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookConfig {
    pub size: usize,
    pub dim: usize,
    pub decay: f64,
    pub epsilon: f64,
    /// Consecutive updates without an assignment before a code is reseeded.
    pub dead_after: usize,
}

impl CodebookConfig {
    pub fn toy() -> Self {
        CodebookConfig {
            size: 32,
            dim: 8,
            decay: 0.99,
            epsilon: 1e-5,
            dead_after: 64,
        }
    }

    pub fn paper() -> Self {
        CodebookConfig {
            size: 256,
            dim: 256,
            ..Self::toy()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub config: CodebookConfig,
    codes: Vec<f32>,
    counts: Vec<f64>,
    sums: Vec<f64>,
    idle: Vec<usize>,
}

impl Codebook {
    pub fn new<R: Rng>(config: CodebookConfig, rng: &mut R) -> Result<Self> {
        if config.size < 2 || config.dim == 0 {
            return Err(Error::invalid(format!(
                "codebook needs K >= 2 and n >= 1, got K={} n={}",
                config.size, config.dim
            )));
        }
        if !(0.0..1.0).contains(&config.decay) {
            return Err(Error::invalid(format!("decay {} not in [0, 1)", config.decay)));
        }
        let codes: Vec<f32> = (0..config.size * config.dim)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        Ok(Self::from_codes(config, codes))
    }

    fn from_codes(config: CodebookConfig, codes: Vec<f32>) -> Self {
        Codebook {
            config,
            sums: vec![0.0; codes.len()],
            counts: vec![0.0; config.size],
            idle: vec![0; config.size],
            codes,
        }
    }

    pub fn with_codes(config: CodebookConfig, codes: Vec<f32>) -> Result<Self> {
        if codes.len() != config.size * config.dim {
            return Err(Error::Shape {
                op: "codebook",
                axis: "codes".into(),
                expected: config.size * config.dim,
                got: codes.len(),
            });
        }
        Ok(Self::from_codes(config, codes))
    }

    pub fn size(&self) -> usize {
        self.config.size
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn code(&self, k: usize) -> &[f32] {
        &self.codes[k * self.config.dim..(k + 1) * self.config.dim]
    }

    pub fn codes(&self) -> &[f32] {
        &self.codes
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    /// Replace every code by a distinct random row of `z` (rows of length
    /// `dim`), with EMA statistics seeded to a count of one.
    pub fn init_from<R: Rng>(&mut self, z: &[f32], rng: &mut R) -> Result<()> {
        let n = self.config.dim;
        let rows = z.len() / n;
        if rows == 0 {
            return Err(Error::Empty("codebook init batch".into()));
        }
        let picks = rand::seq::index::sample(rng, rows, self.config.size.min(rows));
        for k in 0..self.config.size {
            let r = if k < picks.len() {
                picks.index(k)
            } else {
                rng.gen_range(0..rows)
            };
            self.codes[k * n..(k + 1) * n].copy_from_slice(&z[r * n..(r + 1) * n]);
            self.counts[k] = 1.0;
            for j in 0..n {
                self.sums[k * n + j] = self.codes[k * n + j] as f64;
            }
        }
        Ok(())
    }

    /// Index and squared distance of the nearest code; ties go to the lowest
    /// index.
    pub fn nearest(&self, v: &[f32]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.config.size {
            let d: f64 = self
                .code(k)
                .iter()
                .zip(v)
                .map(|(&c, &x)| {
                    let e = c as f64 - x as f64;
                    e * e
                })
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    pub fn export(&self, prefix: &str, ckpt: &mut Checkpoint) {
        let (k, n) = (self.config.size, self.config.dim);
        ckpt.push(format!("{prefix}codes"), Tensor::new(&[k, n], self.codes.clone()).unwrap());
        ckpt.push(
            format!("{prefix}ema_counts"),
            Tensor::new(&[k], self.counts.iter().map(|&c| c as f32).collect()).unwrap(),
        );
        ckpt.push(
            format!("{prefix}ema_sums"),
            Tensor::new(&[k, n], self.sums.iter().map(|&c| c as f32).collect()).unwrap(),
        );
    }

    pub fn import(config: CodebookConfig, prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        let get = |name: &str, len: usize| -> Result<Vec<f32>> {
            let t = ckpt
                .get(&format!("{prefix}{name}"))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}{name}")))?;
            if t.len() != len {
                return Err(Error::Format(format!("{prefix}{name} has {} values, expected {len}", t.len())));
            }
            Ok(t.data().to_vec())
        };
        let (k, n) = (config.size, config.dim);
        let mut cb = Self::with_codes(config, get("codes", k * n)?)?;
        cb.counts = get("ema_counts", k)?.into_iter().map(f64::from).collect();
        cb.sums = get("ema_sums", k * n)?.into_iter().map(f64::from).collect();
        Ok(cb)
    }
}

/// Latent grid after quantization. `dims` is `(h, w, d)` with positions in
/// x-fastest raster order; `vectors` holds one code row per position.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedGrid {
    pub dims: [usize; 3],
    pub indices: Vec<usize>,
    pub vectors: Vec<f32>,
    pub dim: usize,
    /// Squared distance from each input row to its code.
    pub distances: Vec<f64>,
}

impl QuantizedGrid {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Rebuild a grid from indices alone.
    pub fn from_indices(dims: [usize; 3], indices: Vec<usize>, codebook: &Codebook) -> Result<Self> {
        let len: usize = dims.iter().product();
        if indices.len() != len {
            return Err(Error::Shape {
                op: "quantized grid",
                axis: "positions".into(),
                expected: len,
                got: indices.len(),
            });
        }
        let mut vectors = Vec::with_capacity(len * codebook.dim());
        for &k in &indices {
            if k >= codebook.size() {
                return Err(Error::IndexOutOfRange {
                    index: k,
                    size: codebook.size(),
                });
            }
            vectors.extend_from_slice(codebook.code(k));
        }
        Ok(QuantizedGrid {
            dims,
            indices,
            vectors,
            dim: codebook.dim(),
            distances: vec![0.0; len],
        })
    }
}

/// Quantize `z`, `h * w * d` rows of length `n` in raster order.
pub fn quantize(z: &[f32], dims: [usize; 3], codebook: &Codebook) -> Result<QuantizedGrid> {
    let n = codebook.dim();
    let len: usize = dims.iter().product();
    if z.len() != len * n {
        return Err(Error::Shape {
            op: "quantize",
            axis: "latent dim".into(),
            expected: len * n,
            got: z.len(),
        });
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("latent vectors".into()));
    }
    let mut indices = Vec::with_capacity(len);
    let mut distances = Vec::with_capacity(len);
    let mut vectors = Vec::with_capacity(z.len());
    for row in z.chunks_exact(n) {
        let (k, d) = codebook.nearest(row);
        indices.push(k);
        distances.push(d);
        vectors.extend_from_slice(codebook.code(k));
    }
    Ok(QuantizedGrid {
        dims,
        indices,
        vectors,
        dim: n,
        distances,
    })
}

/// One EMA step from a batch of rows and their assignments.
///
/// Codes left unassigned for `dead_after` consecutive updates are reseeded
/// from a random batch row.
pub fn ema_update<R: Rng>(codebook: &mut Codebook, z: &[f32], assignments: &[usize], rng: &mut R) -> Result<()> {
    let (kk, n) = (codebook.size(), codebook.dim());
    if assignments.is_empty() {
        return Err(Error::Empty("ema_update batch".into()));
    }
    if z.len() != assignments.len() * n {
        return Err(Error::Shape {
            op: "ema_update",
            axis: "rows".into(),
            expected: assignments.len() * n,
            got: z.len(),
        });
    }
    let mut batch_counts = vec![0.0f64; kk];
    let mut batch_sums = vec![0.0f64; kk * n];
    for (row, &k) in z.chunks_exact(n).zip(assignments) {
        if k >= kk {
            return Err(Error::IndexOutOfRange { index: k, size: kk });
        }
        batch_counts[k] += 1.0;
        for (s, &x) in batch_sums[k * n..(k + 1) * n].iter_mut().zip(row) {
            *s += x as f64;
        }
    }
    let g = codebook.config.decay;
    for k in 0..kk {
        codebook.counts[k] = g * codebook.counts[k] + (1.0 - g) * batch_counts[k];
    }
    for j in 0..kk * n {
        codebook.sums[j] = g * codebook.sums[j] + (1.0 - g) * batch_sums[j];
    }
    let total: f64 = codebook.counts.iter().sum();
    let eps = codebook.config.epsilon;
    let smoothed = |c: f64| (c + eps) / (total + kk as f64 * eps) * total;
    let rows = assignments.len();
    for k in 0..kk {
        if batch_counts[k] > 0.0 {
            codebook.idle[k] = 0;
        } else {
            codebook.idle[k] += 1;
        }
        if codebook.idle[k] >= codebook.config.dead_after && codebook.config.dead_after > 0 {
            let r = rng.gen_range(0..rows);
            let s = smoothed(codebook.counts[k]);
            for j in 0..n {
                let x = z[r * n + j];
                codebook.codes[k * n + j] = x;
                codebook.sums[k * n + j] = x as f64 * s;
            }
            codebook.idle[k] = 0;
            continue;
        }
        if codebook.counts[k] > 0.0 {
            let s = smoothed(codebook.counts[k]);
            for j in 0..n {
                codebook.codes[k * n + j] = (codebook.sums[k * n + j] / s) as f32;
            }
        }
    }
    if codebook.codes.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("codebook after EMA update".into()));
    }
    Ok(())
}

/// Commitment loss `beta * mean((z - sg(z_q))^2)` and the straight-through
/// view of `z_q` whose gradient flows to `z` unchanged.
pub fn vq_losses(tape: &mut Tape<f32>, z: Var, zq: Tensor<f32>, beta: f64) -> Result<(Var, Var)> {
    let target = tape.constant(zq.clone());
    let mse = tape.mse(z, target)?;
    let commitment = tape.scale(mse, beta);
    let st = tape.straight_through(z, zq)?;
    Ok((commitment, st))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn book(codes: Vec<f32>, k: usize, n: usize) -> Codebook {
        Codebook::with_codes(
            CodebookConfig {
                size: k,
                dim: n,
                ..CodebookConfig::toy()
            },
            codes,
        )
        .unwrap()
    }

    #[test]
    fn exact_match_and_tie_rule() {
        let cb = book(vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 5.0, 5.0, 3.0, 0.0], 5, 2);
        let q = quantize(&[5.0, 5.0], [1, 1, 1], &cb).unwrap();
        assert_eq!((q.indices[0], q.distances[0]), (3, 0.0));
        let cb = book(vec![9.0, 9.0, 1.0, 0.0, 8.0, 8.0, 7.0, 7.0, 3.0, 0.0], 5, 2);
        // (2, 0) is equidistant from codes 1 and 4
        let q = quantize(&[2.0, 0.0], [1, 1, 1], &cb).unwrap();
        assert_eq!(q.indices[0], 1);
    }

    #[test]
    fn non_finite_rejected() {
        let cb = book(vec![0.0, 1.0], 2, 1);
        assert!(matches!(quantize(&[f32::NAN], [1, 1, 1], &cb), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_decay_gives_batch_mean() {
        let mut cb = book(vec![0.0, 0.0, 10.0, 10.0], 2, 2);
        cb.config.decay = 0.0;
        let z = [1.0, 2.0, 3.0, 4.0, 5.0, 9.0];
        ema_update(&mut cb, &z, &[0, 0, 0], &mut seed::rng(0)).unwrap();
        assert!((cb.code(0)[0] - 3.0).abs() < 1e-4);
        assert!((cb.code(0)[1] - 5.0).abs() < 1e-4);
        assert_eq!(cb.code(1), &[10.0, 10.0]);
    }

    #[test]
    fn idle_code_is_reseeded() {
        let mut cb = book(vec![0.0, 100.0], 2, 1);
        cb.config.dead_after = 3;
        let z = [0.5, 0.25];
        let mut rng = seed::rng(1);
        for _ in 0..2 {
            ema_update(&mut cb, &z, &[0, 0], &mut rng).unwrap();
            assert_eq!(cb.code(1), &[100.0]);
        }
        ema_update(&mut cb, &z, &[0, 0], &mut rng).unwrap();
        assert!(z.contains(&cb.code(1)[0]));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut cb = book(vec![0.0, 1.0], 2, 1);
        assert!(matches!(ema_update(&mut cb, &[], &[], &mut seed::rng(0)), Err(Error::Empty(_))));
    }

    #[test]
    fn commitment_scales_with_beta_and_vanishes_at_zq() {
        let z = Tensor::new(&[2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let zq = Tensor::new(&[2, 2], vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        let eval = |beta: f64, q: &Tensor<f32>| {
            let mut t = Tape::new();
            let zv = t.param(z.clone());
            let (c, _) = vq_losses(&mut t, zv, q.clone(), beta).unwrap();
            t.value(c).item()
        };
        assert_eq!(eval(0.25, &z), 0.0);
        assert_eq!(eval(0.5, &zq), 2.0 * eval(0.25, &zq));
    }

    #[test]
    fn straight_through_copies_gradient() {
        let z = Tensor::new(&[3], vec![0.4, -0.2, 1.1]).unwrap();
        let zq = Tensor::new(&[3], vec![0.5, 0.0, 1.0]).unwrap();
        let mut t = Tape::new();
        let zv = t.param(z);
        let (_, st) = vq_losses(&mut t, zv, zq.clone(), 0.25).unwrap();
        let sq = t.mul(st, st).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        // d/dzq sum(zq^2) = 2 zq
        let expect: Vec<f32> = zq.data().iter().map(|x| 2.0 * x).collect();
        assert_eq!(g.get(zv).unwrap().data(), &expect[..]);
    }
}
