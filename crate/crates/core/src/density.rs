//! Autoregressive transformer over flattened latent token grids.
//!
//! Grids are flattened x-fastest, then y, then z, and prefixed with a start
//! token whose id equals the codebook size.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Dense, LayerNorm};
use crate::autodiff::{draw_features, AdamConfig, AttentionMode, Bound, Checkpoint, OptimizerState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{IntensityDomain, Volume};
use crate::vq::QuantizedGrid;

pub const RASTER_ORDER: &str = "x-fastest";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    /// Start token followed by the `L` grid tokens.
    pub ids: Vec<usize>,
    /// Codebook size `K`; the start token id.
    pub codebook_size: usize,
    pub dims: [usize; 3],
    pub order: String,
}

impl TokenSequence {
    pub fn sos(&self) -> usize {
        self.codebook_size
    }

    pub fn vocab(&self) -> usize {
        self.codebook_size + 1
    }

    /// Number of observed tokens, excluding the start token.
    pub fn len(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> &[usize] {
        &self.ids[1..]
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.first() != Some(&self.codebook_size) {
            return Err(Error::invalid("token sequence must start with the start token"));
        }
        if self.len() != self.dims.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "token sequence of {} tokens for grid {:?}",
                self.len(),
                self.dims
            )));
        }
        for (i, &t) in self.tokens().iter().enumerate() {
            if t >= self.codebook_size {
                return Err(Error::invalid(format!(
                    "token {t} at position {} is outside the codebook of {}",
                    i + 1,
                    self.codebook_size
                )));
            }
        }
        Ok(())
    }
}

/// Sequence position of grid cell `(x, y, z)`; the start token is position 0.
pub fn position(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    1 + x + dims[0] * (y + dims[1] * z)
}

pub fn flatten(q: &QuantizedGrid, codebook_size: usize) -> Result<TokenSequence> {
    let mut ids = Vec::with_capacity(q.len() + 1);
    ids.push(codebook_size);
    ids.extend_from_slice(&q.indices);
    let s = TokenSequence {
        ids,
        codebook_size,
        dims: q.dims,
        order: RASTER_ORDER.into(),
    };
    s.validate()?;
    Ok(s)
}

/// Index grid (x fastest) of a sequence.
pub fn unflatten(seq: &TokenSequence, dims: [usize; 3]) -> Result<Vec<usize>> {
    let want: usize = dims.iter().product();
    if seq.len() != want {
        return Err(Error::Shape {
            op: "unflatten",
            axis: "length".into(),
            expected: want,
            got: seq.len(),
        });
    }
    Ok(seq.tokens().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Exact,
    Favor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub features: usize,
    pub attention: AttentionKind,
    /// Training steps between feature redraws; 0 keeps the first draw.
    pub redraw_interval: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PerformerConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl PerformerConfig {
    pub fn toy() -> Self {
        PerformerConfig {
            layers: 4,
            heads: 4,
            dim: 64,
            ff_dim: 128,
            features: 64,
            attention: AttentionKind::Exact,
            redraw_interval: 0,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }

    pub fn paper_shape() -> Self {
        PerformerConfig {
            layers: 22,
            heads: 8,
            dim: 256,
            ff_dim: 1024,
            features: 256,
            attention: AttentionKind::Favor,
            redraw_interval: 1000,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "density: dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.features == 0 || self.layers == 0 || self.ff_dim == 0 || self.batch_size == 0 {
            return Err(Error::invalid("density: zero layers, features, ff dim or batch size"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
    ln2: LayerNorm,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Clone, Debug)]
pub struct DensityModel {
    pub config: PerformerConfig,
    pub codebook_size: usize,
    /// Longest supported sequence, excluding the start token.
    pub max_len: usize,
    pub params: ParamStore,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Dense,
    /// Current FAVOR+ feature matrix per layer.
    features: Vec<Tensor<f32>>,
    draws: u64,
}

/// Log-likelihood of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLikelihood {
    pub total: f64,
    pub per_token: Vec<f64>,
}

impl DensityModel {
    pub fn new(config: &PerformerConfig, codebook_size: usize, max_len: usize) -> Result<Self> {
        config.validate()?;
        if codebook_size == 0 || max_len == 0 {
            return Err(Error::invalid("density: empty vocabulary or zero length"));
        }
        let mut rng = seed::rng(seed::derive(config.seed, "density-init"));
        let mut params = ParamStore::new();
        let d = config.dim;
        let tok = params.add_normal("tok", &[codebook_size + 1, d], 0.02, &mut rng);
        let pos = params.add_normal("pos", &[max_len, d], 0.02, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| {
                let n = |s: &str| format!("block{l}.{s}");
                Block {
                    ln1: LayerNorm::new(&mut params, &n("ln1"), d),
                    q: Dense::new(&mut params, &n("q"), d, d, true, &mut rng),
                    k: Dense::new(&mut params, &n("k"), d, d, true, &mut rng),
                    v: Dense::new(&mut params, &n("v"), d, d, true, &mut rng),
                    out: Dense::new(&mut params, &n("out"), d, d, true, &mut rng),
                    ln2: LayerNorm::new(&mut params, &n("ln2"), d),
                    ff1: Dense::new(&mut params, &n("ff1"), d, config.ff_dim, true, &mut rng),
                    ff2: Dense::new(&mut params, &n("ff2"), config.ff_dim, d, true, &mut rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut params, "ln_f", d);
        let head = Dense::new(&mut params, "head", d, codebook_size + 1, true, &mut rng);
        let mut m = DensityModel {
            config: config.clone(),
            codebook_size,
            max_len,
            params,
            tok,
            pos,
            blocks,
            ln_f,
            head,
            features: Vec::new(),
            draws: 0,
        };
        m.redraw_features();
        Ok(m)
    }

    pub fn vocab(&self) -> usize {
        self.codebook_size + 1
    }

    /// Draw fresh FAVOR+ features for every layer from the config seed.
    pub fn redraw_features(&mut self) {
        let dh = self.config.dim / self.config.heads;
        self.features = (0..self.config.layers)
            .map(|l| {
                let s = seed::derive_index(seed::derive(self.config.seed, "favor"), (self.draws << 16) | l as u64);
                draw_features(&mut seed::rng(s), self.config.features, dh, true)
            })
            .collect();
        self.draws += 1;
    }

    /// Zero the output projection, making every conditional uniform.
    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias.expect("head has a bias")] {
            let p = self.params.get_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
    }

    /// Logits `(batch * len, vocab)` for input rows of equal length.
    fn logits(&self, t: &mut Tape<f32>, p: &Bound, inputs: &[&[usize]]) -> Result<Var> {
        let b = inputs.len();
        let l = inputs[0].len();
        if l > self.max_len {
            return Err(Error::invalid(format!(
                "sequence of {l} tokens exceeds the model length {}",
                self.max_len
            )));
        }
        let mut ids = Vec::with_capacity(b * l);
        for row in inputs {
            if row.len() != l {
                return Err(Error::invalid("density batch mixes sequence lengths"));
            }
            if let Some(&bad) = row.iter().find(|&&i| i > self.codebook_size) {
                return Err(Error::IndexOutOfRange {
                    index: bad,
                    size: self.vocab(),
                });
            }
            ids.extend_from_slice(row);
        }
        let d = self.config.dim;
        let e = t.embedding(p[self.tok], &ids)?;
        let e = t.reshape(e, &[b, l, d])?;
        let pos = t.row_slice(p[self.pos], l)?;
        let mut h = t.add_broadcast(e, pos)?;
        for (li, blk) in self.blocks.iter().enumerate() {
            let n = blk.ln1.forward(t, p, h)?;
            let q = blk.q.forward(t, p, n)?;
            let k = blk.k.forward(t, p, n)?;
            let v = blk.v.forward(t, p, n)?;
            let mode = match self.config.attention {
                AttentionKind::Exact => AttentionMode::Exact,
                AttentionKind::Favor => AttentionMode::Favor(self.features[li].clone()),
            };
            let a = t.attention(q, k, v, self.config.heads, &mode)?;
            let a = blk.out.forward(t, p, a)?;
            h = t.add(h, a)?;
            let n = blk.ln2.forward(t, p, h)?;
            let f = blk.ff1.forward(t, p, n)?;
            let f = t.gelu(f);
            let f = blk.ff2.forward(t, p, f)?;
            h = t.add(h, f)?;
        }
        let h = self.ln_f.forward(t, p, h)?;
        let logits = self.head.forward(t, p, h)?;
        if !t.value(logits).is_finite() {
            return Err(Error::NonFinite("density logits".into()));
        }
        t.reshape(logits, &[b * l, self.vocab()])
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        seq.validate()?;
        if seq.codebook_size != self.codebook_size {
            return Err(Error::invalid(format!(
                "sequence vocabulary {} does not match the model's {}",
                seq.codebook_size, self.codebook_size
            )));
        }
        Ok(())
    }

    /// Log-softmax rows in f64 for every position.
    fn log_probs(&self, seqs: &[&TokenSequence]) -> Result<Vec<Vec<f64>>> {
        for s in seqs {
            self.check(s)?;
        }
        let mut t = Tape::new();
        let p = self.params.bind_frozen(&mut t);
        let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s.ids[..s.ids.len() - 1]).collect();
        let lg = self.logits(&mut t, &p, &inputs)?;
        let v = self.vocab();
        Ok(t.value(lg).data().chunks(v).map(log_softmax).collect())
    }

    /// `p(x_i | x_<i)` for every observed position `i`.
    pub fn conditionals(&self, seq: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .log_probs(&[seq])?
            .into_iter()
            .map(|row| row.into_iter().map(f64::exp).collect())
            .collect())
    }

    pub fn log_likelihood(&self, seq: &TokenSequence) -> Result<LogLikelihood> {
        Ok(self.log_likelihood_batch(&[seq])?.remove(0))
    }

    pub fn log_likelihood_batch(&self, seqs: &[&TokenSequence]) -> Result<Vec<LogLikelihood>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let rows = self.log_probs(seqs)?;
        let l = seqs[0].len();
        Ok(seqs
            .iter()
            .enumerate()
            .map(|(b, s)| {
                let per_token: Vec<f64> = s
                    .tokens()
                    .iter()
                    .enumerate()
                    .map(|(i, &tok)| rows[b * l + i][tok])
                    .collect();
                LogLikelihood {
                    total: per_token.iter().sum(),
                    per_token,
                }
            })
            .collect())
    }

    pub fn export_into(&self, prefix: &str, c: &mut Checkpoint) {
        self.params.export(prefix, c);
        for (l, f) in self.features.iter().enumerate() {
            c.push(format!("{prefix}favor{l}"), f.clone());
        }
    }

    pub fn import_from(config: &PerformerConfig, codebook_size: usize, max_len: usize, prefix: &str, c: &Checkpoint) -> Result<Self> {
        let mut m = DensityModel::new(config, codebook_size, max_len)?;
        m.params.import(prefix, c)?;
        for l in 0..m.features.len() {
            let key = format!("{prefix}favor{l}");
            m.features[l] = c
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {key}")))?
                .clone();
        }
        Ok(m)
    }
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x as f64 - lse).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensityHistory {
    /// Mean token cross-entropy per epoch.
    pub train_nll: Vec<f64>,
    pub val_nll: Vec<f64>,
}

/// Mean per-token negative log-likelihood.
pub fn mean_nll(model: &DensityModel, seqs: &[TokenSequence]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in seqs.chunks(model.config.batch_size.max(1)) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        for ll in model.log_likelihood_batch(&refs)? {
            sum -= ll.total;
            n += ll.per_token.len();
        }
    }
    Ok(sum / n.max(1) as f64)
}

pub fn train_density(
    model: &mut DensityModel,
    train: &[TokenSequence],
    val: &[TokenSequence],
    epochs: usize,
    seed_value: u64,
) -> Result<DensityHistory> {
    train_density_with(model, train, val, epochs, seed_value, |_, _, _| {})
}

/// Minimise mean token cross-entropy with AMSGrad. `on_epoch` receives the
/// epoch index, training NLL and validation NLL (NaN without a validation set).
pub fn train_density_with(
    model: &mut DensityModel,
    train: &[TokenSequence],
    val: &[TokenSequence],
    epochs: usize,
    seed_value: u64,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<DensityHistory> {
    if train.is_empty() {
        return Err(Error::Empty("density training set".into()));
    }
    for s in train.iter().chain(val) {
        model.check(s)?;
    }
    let mut opt = OptimizerState::new(AdamConfig::amsgrad(model.config.lr), &model.params);
    let mut rng = seed::rng(seed::derive(seed_value, "density-train"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = DensityHistory::default();
    let bs = model.config.batch_size;
    let mut step = 0usize;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(bs) {
            let l = train[batch[0]].len();
            let inputs: Vec<&[usize]> = batch.iter().map(|&i| &train[i].ids[..l]).collect();
            if batch.iter().any(|&i| train[i].len() != l) {
                return Err(Error::invalid("density training sequences differ in length"));
            }
            let targets: Vec<usize> = batch.iter().flat_map(|&i| train[i].tokens().iter().copied()).collect();
            let mut t = Tape::new();
            let p = model.params.bind(&mut t);
            let lg = model.logits(&mut t, &p, &inputs)?;
            let loss = t.cross_entropy(lg, &targets)?;
            let v = t.value(loss).item() as f64;
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("density loss {v}"),
                });
            }
            sum += v * batch.len() as f64;
            count += batch.len();
            let mut g = t.backward(loss)?;
            model.params.accumulate(&p, &mut g);
            opt.step(&mut model.params)?;
            step += 1;
            let r = model.config.redraw_interval;
            if model.config.attention == AttentionKind::Favor && r > 0 && step % r == 0 {
                model.redraw_features();
            }
        }
        let train_nll = sum / count as f64;
        let val_nll = if val.is_empty() { f64::NAN } else { mean_nll(model, val)? };
        on_epoch(epoch, train_nll, val_nll);
        history.train_nll.push(train_nll);
        history.val_nll.push(val_nll);
    }
    Ok(history)
}

/// Per-token log-probabilities as a volume: latent cells in raster order,
/// each repeated over its `2^levels` cube of input voxels.
pub fn spatial_map(per_token: &[f64], latent: [usize; 3], levels: usize) -> Result<Volume> {
    let want: usize = latent.iter().product();
    if per_token.len() != want {
        return Err(Error::Shape {
            op: "spatial_map",
            axis: "length".into(),
            expected: want,
            got: per_token.len(),
        });
    }
    let f = 1usize << levels;
    let dims = [latent[0] * f, latent[1] * f, latent[2] * f];
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let cell = x / f + latent[0] * (y / f + latent[1] * (z / f));
                out.push(per_token[cell] as f32);
            }
        }
    }
    Volume::new(dims, out, IntensityDomain::Raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PerformerConfig {
        PerformerConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            ff_dim: 32,
            features: 32,
            ..PerformerConfig::toy()
        }
    }

    fn seq(tokens: &[usize], k: usize, dims: [usize; 3]) -> TokenSequence {
        let mut ids = vec![k];
        ids.extend_from_slice(tokens);
        TokenSequence {
            ids,
            codebook_size: k,
            dims,
            order: RASTER_ORDER.into(),
        }
    }

    #[test]
    fn raster_positions() {
        let dims = [3, 4, 5];
        let indices: Vec<usize> = (0..60).collect();
        let s = seq(&indices, 64, dims);
        for z in 0..5 {
            for y in 0..4 {
                for x in 0..3 {
                    let p = position(dims, x, y, z);
                    assert_eq!(s.ids[p], x + 3 * y + 12 * z);
                }
            }
        }
        assert!(unflatten(&s, [3, 4, 4]).is_err());
        assert_eq!(unflatten(&s, dims).unwrap(), indices);
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = DensityModel::new(&small(), 32, 64).unwrap();
        m.zero_head();
        let s = seq(&[5; 64], 32, [4, 4, 4]);
        let ll = m.log_likelihood(&s).unwrap();
        assert!((ll.total + 64.0 * 33f64.ln()).abs() < 1e-9);
        for row in m.conditionals(&s).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_tokens() {
        let m = DensityModel::new(&small(), 8, 8).unwrap();
        assert!(m.log_likelihood(&seq(&[9, 0, 0, 0, 0, 0, 0, 0], 8, [2, 2, 2])).is_err());
        assert!(m.log_likelihood(&seq(&[0; 27], 8, [3, 3, 3])).is_err());
    }

    #[test]
    fn memorises_one_sequence() {
        let mut cfg = small();
        cfg.lr = 3e-3;
        cfg.batch_size = 1;
        let mut m = DensityModel::new(&cfg, 8, 8).unwrap();
        let s = seq(&[1, 7, 3, 3, 0, 5, 2, 6], 8, [2, 2, 2]);
        let h = train_density(&mut m, &[s.clone()], &[], 200, 3).unwrap();
        assert!(h.train_nll[0] > 1.5);
        assert!(*h.train_nll.last().unwrap() < 0.05, "{:?}", h.train_nll.last());
    }

    #[test]
    fn spatial_map_nearest_neighbour() {
        let per: Vec<f64> = (0..8).map(|i| -(i as f64)).collect();
        let v = spatial_map(&per, [2, 2, 2], 1).unwrap();
        assert_eq!(v.dims(), [4, 4, 4]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(v.get(x, y, z) as f64, per[x / 2 + 2 * (y / 2 + 2 * (z / 2))]);
                }
            }
        }
        assert!(spatial_map(&per, [2, 2, 3], 1).is_err());
    }
}
