//! Lesion segmentation baselines and per-lesion uncertainty.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Conv3d, ConvKind};
use crate::autodiff::{AdamConfig, Bound, Checkpoint, OptimizerState, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{voxel_index, Dims, IntensityDomain, LabelMask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    Dice,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub widths: Vec<usize>,
    pub dropout: f64,
    pub loss: SegLoss,
    pub leaky_slope: f64,
    pub patch: usize,
    pub patches_per_volume: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl UNetConfig {
    pub fn toy() -> Self {
        UNetConfig {
            widths: vec![8, 16, 32],
            dropout: 0.0,
            loss: SegLoss::Dice,
            leaky_slope: 0.01,
            patch: 16,
            patches_per_volume: 2,
            lr: 3e-3,
            batch_size: 4,
            augment: true,
            seed: 0,
        }
    }

    pub fn paper_shape() -> Self {
        UNetConfig {
            widths: vec![32, 32, 64, 128, 256],
            patch: 128,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::invalid("unet needs at least 2 non-empty levels"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        let f = 1 << (self.widths.len() - 1);
        if self.patch == 0 || self.patch % f != 0 {
            return Err(Error::invalid(format!("patch {} not divisible by {f}", self.patch)));
        }
        if self.batch_size == 0 || self.patches_per_volume == 0 {
            return Err(Error::invalid("zero batch size or patch count"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    a: Conv3d,
    b: Conv3d,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub params: ParamStore,
    down: Vec<ConvBlock>,
    up: Vec<Conv3d>,
    dec: Vec<ConvBlock>,
    head: Conv3d,
}

/// Dropout behaviour of one forward pass.
enum Drop<'a, R> {
    Off,
    On(f64, &'a mut R),
}

impl UNet {
    pub fn new(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(config.seed, "unet-init"));
        let mut params = ParamStore::new();
        let block = |p: &mut ParamStore, name: String, cin: usize, cout: usize, rng: &mut _| ConvBlock {
            a: Conv3d::new(p, &format!("{name}.a"), cin, cout, 3, 1, 1, ConvKind::Forward, rng),
            b: Conv3d::new(p, &format!("{name}.b"), cout, cout, 3, 1, 1, ConvKind::Forward, rng),
        };
        let w = &config.widths;
        let mut down = Vec::new();
        let mut cin = 1;
        for (l, &c) in w.iter().enumerate() {
            down.push(block(&mut params, format!("down{l}"), cin, c, &mut rng));
            cin = c;
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in (0..w.len() - 1).rev() {
            up.push(Conv3d::new(&mut params, &format!("up{l}"), w[l + 1], w[l], 2, 2, 0, ConvKind::Transpose, &mut rng));
            dec.push(block(&mut params, format!("dec{l}"), 2 * w[l], w[l], &mut rng));
        }
        let head = Conv3d::new(&mut params, "head", w[0], 2, 1, 1, 0, ConvKind::Forward, &mut rng);
        Ok(UNet {
            config: config.clone(),
            params,
            down,
            up,
            dec,
            head,
        })
    }

    fn conv_block<R: Rng>(&self, t: &mut Tape<f32>, p: &Bound, blk: &ConvBlock, x: Var, drop: &mut Drop<'_, R>) -> Result<Var> {
        let mut h = x;
        for c in [&blk.a, &blk.b] {
            h = c.forward(t, p, h)?;
            h = t.instance_norm(h)?;
            h = t.leaky_relu(h, self.config.leaky_slope);
        }
        if let Drop::On(prob, rng) = drop {
            if *prob > 0.0 {
                h = t.dropout(h, *prob, &mut **rng)?;
            }
        }
        Ok(h)
    }

    /// Two-channel logits for `(n, 1, z, y, x)` input.
    fn logits<R: Rng>(&self, t: &mut Tape<f32>, p: &Bound, x: Var, drop: &mut Drop<'_, R>) -> Result<Var> {
        let mut skips = Vec::new();
        let mut h = x;
        let last = self.down.len() - 1;
        for (l, blk) in self.down.iter().enumerate() {
            h = self.conv_block(t, p, blk, h, drop)?;
            if l < last {
                skips.push(h);
                h = t.max_pool3d(h)?;
            }
        }
        for (up, blk) in self.up.iter().zip(&self.dec) {
            h = up.forward(t, p, h)?;
            let s = skips.pop().expect("one skip per level");
            h = t.concat_channels(s, h)?;
            h = self.conv_block(t, p, blk, h, drop)?;
        }
        self.head.forward(t, p, h)
    }

    fn check_dims(&self, dims: Dims) -> Result<()> {
        let f = 1 << (self.config.widths.len() - 1);
        for (a, name) in ["x", "y", "z"].iter().enumerate() {
            if dims[a] % f != 0 {
                return Err(Error::Shape {
                    op: "unet",
                    axis: format!("{name} extent {} not divisible by {f}", dims[a]),
                    expected: f,
                    got: dims[a],
                });
            }
        }
        Ok(())
    }

    fn predict_inner<R: Rng>(&self, v: &Volume, drop: &mut Drop<'_, R>) -> Result<Vec<f32>> {
        self.check_dims(v.dims())?;
        let d = v.dims();
        let mut t = Tape::new();
        let p = self.params.bind_frozen(&mut t);
        let x = t.constant(Tensor::new(&[1, 1, d[2], d[1], d[0]], v.voxels().to_vec())?);
        let lg = self.logits(&mut t, &p, x, drop)?;
        let sm = t.softmax_channels(lg)?;
        let fg = t.select_channel(sm, 1)?;
        Ok(t.value(fg).data().to_vec())
    }

    /// Foreground probability per voxel, dropout off.
    pub fn predict(&self, v: &Volume) -> Result<Vec<f32>> {
        self.predict_inner::<rand_chacha::ChaCha8Rng>(v, &mut Drop::Off)
    }

    /// One stochastic pass with dropout active at the configured rate.
    pub fn predict_dropout<R: Rng>(&self, v: &Volume, rng: &mut R) -> Result<Vec<f32>> {
        self.predict_inner(v, &mut Drop::On(self.config.dropout, rng))
    }

    pub fn export_into(&self, prefix: &str, c: &mut Checkpoint) {
        self.params.export(prefix, c);
    }

    pub fn import_from(config: &UNetConfig, prefix: &str, c: &Checkpoint) -> Result<Self> {
        let mut m = UNet::new(config)?;
        m.params.import(prefix, c)?;
        Ok(m)
    }
}

/// Trilinear sample with edge clamping.
fn trilinear(v: &[f32], dims: Dims, p: [f64; 3]) -> f32 {
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, (dims[a] - 1) as f64);
        let f = c.floor();
        base[a] = f as usize;
        frac[a] = c - f;
    }
    let mut out = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            idx[a] = (base[a] + hi as usize).min(dims[a] - 1);
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
        }
        if w > 0.0 {
            out += w * v[voxel_index(dims, idx[0], idx[1], idx[2])] as f64;
        }
    }
    out as f32
}

/// Random affine (rotation about z, isotropic scale, per-axis flips) plus a
/// smooth displacement field from a coarse random lattice. Images are
/// resampled trilinearly, masks by nearest neighbour.
pub fn augment<R: Rng>(v: &Volume, m: &LabelMask, rng: &mut R) -> Result<(Volume, LabelMask)> {
    let d = v.dims();
    let angle = rng.gen_range(-0.2f64..0.2);
    let scale = rng.gen_range(0.9f64..1.1);
    let flip: [bool; 3] = [rng.gen(), rng.gen(), rng.gen()];
    const LATTICE: usize = 4;
    const AMPLITUDE: f64 = 1.5;
    let field: Vec<[f64; 3]> = (0..LATTICE * LATTICE * LATTICE)
        .map(|_| {
            let mut s = [0.0; 3];
            for x in &mut s {
                *x = AMPLITUDE * rng.sample::<f64, _>(StandardNormal);
            }
            s
        })
        .collect();
    let ldims = [LATTICE; 3];
    let comp: Vec<Vec<f32>> = (0..3).map(|a| field.iter().map(|f| f[a] as f32).collect()).collect();
    let (cos, sin) = (angle.cos(), angle.sin());
    let c = [(d[0] - 1) as f64 / 2.0, (d[1] - 1) as f64 / 2.0, (d[2] - 1) as f64 / 2.0];
    let mut img = Vec::with_capacity(v.len());
    let mut lab = Vec::with_capacity(v.len());
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let mut q = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                for a in 0..3 {
                    if flip[a] {
                        q[a] = -q[a];
                    }
                }
                let r = [
                    (cos * q[0] - sin * q[1]) * scale + c[0],
                    (sin * q[0] + cos * q[1]) * scale + c[1],
                    q[2] * scale + c[2],
                ];
                let lp = [
                    r[0] / d[0] as f64 * (LATTICE - 1) as f64,
                    r[1] / d[1] as f64 * (LATTICE - 1) as f64,
                    r[2] / d[2] as f64 * (LATTICE - 1) as f64,
                ];
                let s = [
                    r[0] + trilinear(&comp[0], ldims, lp) as f64,
                    r[1] + trilinear(&comp[1], ldims, lp) as f64,
                    r[2] + trilinear(&comp[2], ldims, lp) as f64,
                ];
                img.push(trilinear(v.voxels(), d, s));
                let n = [
                    s[0].round().clamp(0.0, (d[0] - 1) as f64) as usize,
                    s[1].round().clamp(0.0, (d[1] - 1) as f64) as usize,
                    s[2].round().clamp(0.0, (d[2] - 1) as f64) as usize,
                ];
                lab.push(m.get(n[0], n[1], n[2]) as u8);
            }
        }
    }
    let img = if v.domain() == IntensityDomain::Unit {
        Volume::unit_clamped(d, img)?
    } else {
        Volume::new(d, img, v.domain())?
    };
    Ok((img, LabelMask::new(d, lab)?))
}

/// Crop a `size^3` patch at `lo`.
fn crop(v: &[f32], dims: Dims, lo: [usize; 3], size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(size * size * size);
    for z in 0..size {
        for y in 0..size {
            let row = voxel_index(dims, lo[0], lo[1] + y, lo[2] + z);
            out.extend_from_slice(&v[row..row + size]);
        }
    }
    out
}

/// Patch corner; half the draws centre on a random lesion voxel.
fn patch_origin<R: Rng>(m: &LabelMask, size: usize, rng: &mut R) -> [usize; 3] {
    let d = m.dims();
    let fg: Vec<usize> = m.voxels().iter().enumerate().filter(|(_, &l)| l > 0).map(|(i, _)| i).collect();
    let mut lo = [0; 3];
    if !fg.is_empty() && rng.gen_bool(0.5) {
        let i = fg[rng.gen_range(0..fg.len())];
        let c = [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])];
        for a in 0..3 {
            lo[a] = c[a].saturating_sub(size / 2).min(d[a] - size);
        }
    } else {
        for a in 0..3 {
            lo[a] = rng.gen_range(0..=d[a] - size);
        }
    }
    lo
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegHistory {
    pub loss: Vec<f64>,
}

/// Train one network on `data`; `subset_seed` selects an 80% subset.
pub fn train_seg(
    data: &[(Volume, LabelMask)],
    config: &UNetConfig,
    epochs: usize,
    subset_seed: Option<u64>,
) -> Result<(UNet, SegHistory)> {
    if data.is_empty() {
        return Err(Error::Empty("segmentation training set".into()));
    }
    let mut model = UNet::new(config)?;
    let size = config.patch;
    for (v, m) in data {
        if v.dims() != m.dims() || v.dims().iter().any(|&e| e < size) {
            return Err(Error::invalid(format!(
                "segmentation sample of dims {:?} (mask {:?}) cannot hold a {size}^3 patch",
                v.dims(),
                m.dims()
            )));
        }
    }
    let subset: Vec<usize> = match subset_seed {
        Some(s) => {
            let n = ((data.len() as f64 * 0.8).round() as usize).max(1);
            let mut idx = sample(&mut seed::rng(seed::derive(s, "subset")), data.len(), n).into_vec();
            idx.sort_unstable();
            idx
        }
        None => (0..data.len()).collect(),
    };
    let mut rng = seed::rng(seed::derive(config.seed ^ subset_seed.unwrap_or(0), "seg-train"));
    let mut opt = OptimizerState::new(AdamConfig::amsgrad(config.lr), &model.params);
    let mut history = SegHistory::default();
    let mut jobs: Vec<usize> = Vec::new();
    for _ in 0..epochs {
        jobs.clear();
        for &i in &subset {
            jobs.extend(std::iter::repeat(i).take(config.patches_per_volume));
        }
        rand::seq::SliceRandom::shuffle(jobs.as_mut_slice(), &mut rng);
        let (mut sum, mut steps) = (0.0, 0usize);
        for batch in jobs.chunks(config.batch_size) {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for &i in batch {
                let (v, m) = &data[i];
                let (v, m) = if config.augment { augment(v, m, &mut rng)? } else { (v.clone(), m.clone()) };
                let lo = patch_origin(&m, size, &mut rng);
                xs.extend(crop(v.voxels(), v.dims(), lo, size));
                let mf: Vec<f32> = m.voxels().iter().map(|&l| (l > 0) as u8 as f32).collect();
                ys.extend(crop(&mf, m.dims(), lo, size));
            }
            let n = batch.len();
            let mut t = Tape::new();
            let p = model.params.bind(&mut t);
            let x = t.constant(Tensor::new(&[n, 1, size, size, size], xs)?);
            let lg = model.logits(&mut t, &p, x, &mut Drop::On(config.dropout, &mut rng))?;
            let loss = match config.loss {
                SegLoss::Dice => {
                    let sm = t.softmax_channels(lg)?;
                    let fg = t.select_channel(sm, 1)?;
                    let y = t.constant(Tensor::new(&[n, 1, size, size, size], ys)?);
                    t.dice(fg, y)?
                }
                SegLoss::CrossEntropy => {
                    let targets: Vec<usize> = ys.iter().map(|&y| y as usize).collect();
                    t.cross_entropy(lg, &targets)?
                }
            };
            let lv = t.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch: history.loss.len(),
                    detail: format!("segmentation loss {lv}"),
                });
            }
            sum += lv;
            steps += 1;
            let mut g = t.backward(loss)?;
            model.params.accumulate(&p, &mut g);
            opt.step(&mut model.params)?;
        }
        history.loss.push(sum / steps.max(1) as f64);
    }
    Ok((model, history))
}

/// `n` networks, each on its own 80% subset.
pub fn train_ensemble(data: &[(Volume, LabelMask)], config: &UNetConfig, epochs: usize, n: usize, seed_value: u64) -> Result<Vec<UNet>> {
    (0..n)
        .map(|i| {
            let mut c = config.clone();
            c.seed = seed::derive_index(seed_value, i as u64);
            train_seg(data, &c, epochs, Some(c.seed)).map(|(m, _)| m)
        })
        .collect()
}

/// Foreground-dice of a thresholded prediction.
pub fn dice_score(pred: &[f32], mask: &LabelMask, threshold: f32) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&x, &l) in pred.iter().zip(mask.voxels()) {
        let a = x >= threshold;
        let b = l > 0;
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SingleSoftmax,
    Ensemble,
    Dropout,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SingleSoftmax, Method::Ensemble, Method::Dropout];

    pub fn name(self) -> &'static str {
        match self {
            Method::SingleSoftmax => "single_softmax",
            Method::Ensemble => "ensemble",
            Method::Dropout => "dropout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub dims: Dims,
    pub maps: Vec<Vec<f32>>,
    pub source: Method,
}

impl PredictionSet {
    pub fn new(dims: Dims, maps: Vec<Vec<f32>>, source: Method) -> Result<Self> {
        let n: usize = dims.iter().product();
        if maps.is_empty() || maps.iter().any(|m| m.len() != n) {
            return Err(Error::invalid("prediction maps must be non-empty and match dims"));
        }
        if (source == Method::SingleSoftmax) != (maps.len() == 1) {
            return Err(Error::invalid(format!(
                "{} with {} maps",
                source.name(),
                maps.len()
            )));
        }
        Ok(PredictionSet { dims, maps, source })
    }
}

/// Prediction maps for one volume. `models` must hold one network for
/// single softmax and dropout, and at least two for the ensemble.
pub fn predict_set(models: &[UNet], v: &Volume, method: Method, passes: usize, seed_value: u64) -> Result<PredictionSet> {
    let maps = match method {
        Method::SingleSoftmax | Method::Dropout if models.len() != 1 => {
            return Err(Error::invalid(format!("{} needs one model, got {}", method.name(), models.len())));
        }
        Method::Ensemble if models.len() < 2 => {
            return Err(Error::invalid(format!("ensemble needs at least 2 models, got {}", models.len())));
        }
        Method::SingleSoftmax => vec![models[0].predict(v)?],
        Method::Ensemble => models.iter().map(|m| m.predict(v)).collect::<Result<_>>()?,
        Method::Dropout => {
            if passes < 2 {
                return Err(Error::invalid("dropout needs at least 2 passes"));
            }
            (0..passes)
                .map(|i| models[0].predict_dropout(v, &mut seed::rng(seed::derive_index(seed_value, i as u64))))
                .collect::<Result<_>>()?
        }
    };
    PredictionSet::new(v.dims(), maps, method)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertaintyFormula {
    /// `1 - H(mean p) / ln 2` with binary entropy `H`.
    MeanEntropy,
    /// `1 - sum_i p_i ln p_i`.
    Literal,
}

fn xlnx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Per-voxel certainty. A single softmax map uses `max(p, 1 - p)`.
pub fn voxel_certainty(ps: &PredictionSet, formula: CertaintyFormula) -> Vec<f64> {
    let n = ps.maps[0].len();
    (0..n)
        .map(|i| {
            if ps.source == Method::SingleSoftmax {
                let p = ps.maps[0][i] as f64;
                return p.max(1.0 - p);
            }
            match formula {
                CertaintyFormula::MeanEntropy => {
                    let m = ps.maps.iter().map(|p| p[i] as f64).sum::<f64>() / ps.maps.len() as f64;
                    let h = -(xlnx(m) + xlnx(1.0 - m));
                    (1.0 - h / std::f64::consts::LN_2).clamp(0.0, 1.0)
                }
                CertaintyFormula::Literal => 1.0 - ps.maps.iter().map(|p| xlnx(p[i] as f64)).sum::<f64>(),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    TwentySix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionSet {
    pub dims: Dims,
    /// Voxel indices per lesion, ascending; lesions ordered by first voxel.
    pub lesions: Vec<Vec<usize>>,
}

impl LesionSet {
    pub fn len(&self) -> usize {
        self.lesions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lesions.is_empty()
    }

    /// Component label per voxel, 0 for background.
    pub fn labels(&self) -> Vec<u32> {
        let mut out = vec![0; self.dims.iter().product()];
        for (k, l) in self.lesions.iter().enumerate() {
            for &i in l {
                out[i] = k as u32 + 1;
            }
        }
        out
    }
}

/// Connected components by breadth-first flood fill.
pub fn connected_components(mask: &[bool], dims: Dims, conn: Connectivity) -> Vec<Vec<usize>> {
    let mut offsets = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let nonzero = (dx != 0) as u8 + (dy != 0) as u8 + (dz != 0) as u8;
                let ok = match conn {
                    Connectivity::Six => nonzero == 1,
                    Connectivity::TwentySix => nonzero >= 1,
                };
                if ok {
                    offsets.push([dx, dy, dz]);
                }
            }
        }
    }
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            for o in &offsets {
                let mut n = [0usize; 3];
                let mut inside = true;
                for a in 0..3 {
                    let v = c[a] as i64 + o[a];
                    if v < 0 || v >= dims[a] as i64 {
                        inside = false;
                        break;
                    }
                    n[a] = v as usize;
                }
                if !inside {
                    continue;
                }
                let j = voxel_index(dims, n[0], n[1], n[2]);
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Majority-vote mask of maps thresholded at `threshold`; ties are foreground.
pub fn majority_vote(ps: &PredictionSet, threshold: f32) -> Vec<bool> {
    let n = ps.maps.len();
    (0..ps.maps[0].len())
        .map(|i| 2 * ps.maps.iter().filter(|m| m[i] >= threshold).count() >= n)
        .collect()
}

pub fn lesion_extract(ps: &PredictionSet, threshold: f32, conn: Connectivity) -> LesionSet {
    let vote = majority_vote(ps, threshold);
    LesionSet {
        dims: ps.dims,
        lesions: connected_components(&vote, ps.dims, conn),
    }
}

/// Mean certainty over each lesion.
pub fn lesion_scores(lesions: &LesionSet, certainty: &[f64]) -> Result<Vec<f64>> {
    if certainty.len() != lesions.dims.iter().product::<usize>() {
        return Err(Error::invalid("certainty map does not match the lesion dims"));
    }
    Ok(lesions
        .lesions
        .iter()
        .map(|l| l.iter().map(|&i| certainty[i]).sum::<f64>() / l.len() as f64)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TpFp {
    /// `true` for a true-positive lesion.
    pub true_positive: Vec<bool>,
    pub false_positives: usize,
}

/// A lesion is a true positive when at least half its voxels lie in `gt`.
pub fn tp_fp_label(lesions: &LesionSet, gt: &LabelMask) -> Result<TpFp> {
    if gt.dims() != lesions.dims {
        return Err(Error::invalid("ground truth dims differ from the lesion dims"));
    }
    let g = gt.voxels();
    let true_positive: Vec<bool> = lesions
        .lesions
        .iter()
        .map(|l| 2 * l.iter().filter(|&&i| g[i] > 0).count() >= l.len())
        .collect();
    let false_positives = true_positive.iter().filter(|&&t| !t).count();
    Ok(TpFp {
        true_positive,
        false_positives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{synth_phantom, PhantomSpec};

    #[test]
    fn certainty_examples() {
        let d = [2, 1, 1];
        let ps = PredictionSet::new(d, vec![vec![0.2, 1.0], vec![0.4, 1.0]], Method::Ensemble).unwrap();
        let c = voxel_certainty(&ps, CertaintyFormula::MeanEntropy);
        let h = -(0.3f64 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
        assert!((c[0] - (1.0 - h / 2f64.ln())).abs() < 1e-7);
        assert!((c[0] - 0.1187).abs() < 1e-3);
        assert_eq!(c[1], 1.0);
        assert_eq!(voxel_certainty(&ps, CertaintyFormula::Literal)[1], 1.0);
        let half = PredictionSet::new([1, 1, 1], vec![vec![0.5]; 5], Method::Dropout).unwrap();
        assert!(voxel_certainty(&half, CertaintyFormula::MeanEntropy)[0].abs() < 1e-12);
    }

    #[test]
    fn vote_and_components() {
        let ps = PredictionSet::new([2, 1, 1], vec![vec![0.6, 0.4], vec![0.4, 0.6]], Method::Ensemble).unwrap();
        assert_eq!(majority_vote(&ps, 0.5), vec![true, true]);
        let d = [3, 3, 3];
        let mut m = vec![false; 27];
        m[voxel_index(d, 0, 0, 0)] = true;
        m[voxel_index(d, 1, 1, 1)] = true;
        assert_eq!(connected_components(&m, d, Connectivity::TwentySix).len(), 1);
        assert_eq!(connected_components(&m, d, Connectivity::Six).len(), 2);
    }

    #[test]
    fn tp_fp_counts() {
        let d = [8, 1, 1];
        let l = LesionSet {
            dims: d,
            lesions: vec![(0..8).collect()],
        };
        let gt = LabelMask::new(d, vec![1, 1, 1, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(tp_fp_label(&l, &gt).unwrap().false_positives, 1);
        let gt = LabelMask::new(d, vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        assert_eq!(tp_fp_label(&l, &gt).unwrap().true_positive, vec![true]);
    }

    #[test]
    fn method_model_count_checked() {
        let (v, _) = synth_phantom(&PhantomSpec::default(), true).unwrap();
        let m = UNet::new(&UNetConfig::toy()).unwrap();
        assert!(predict_set(&[m.clone(), m.clone()], &v, Method::SingleSoftmax, 1, 0).is_err());
        assert!(predict_set(std::slice::from_ref(&m), &v, Method::Ensemble, 1, 0).is_err());
        let ps = predict_set(std::slice::from_ref(&m), &v, Method::Dropout, 5, 0).unwrap();
        // p = 0: every pass identical
        assert!(ps.maps.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(predict_set(&[m], &v, Method::SingleSoftmax, 1, 0).unwrap().maps.len(), 1);
    }

    #[test]
    fn augment_keeps_dims_and_domain() {
        let (v, m) = synth_phantom(&PhantomSpec::default(), true).unwrap();
        let (a, b) = augment(&v, &m, &mut seed::rng(1)).unwrap();
        assert_eq!(a.dims(), v.dims());
        assert_eq!(b.dims(), m.dims());
        assert!(b.count() > 0);
    }
}
