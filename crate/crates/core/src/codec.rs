//! Vector-quantized volume autoencoder with optional adversarial training.
//!
//! Each encoder level is a stride-2 convolution followed by a residual
//! block; the decoder mirrors it with stride-2 transposed convolutions and
//! ends in a sigmoid, so reconstructions are unit volumes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Conv3d, ConvKind};
use crate::autodiff::{AdamConfig, Bound, Checkpoint, OptimizerState, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{IntensityDomain, Volume};
use crate::vq::{self, Codebook, CodebookConfig, QuantizedGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossRecipe {
    Mse,
    /// MSE + perceptual.
    Perceptual,
    /// MSE + perceptual + spectral.
    Spectral,
}

impl LossRecipe {
    pub fn uses_perceptual(self) -> bool {
        !matches!(self, LossRecipe::Mse)
    }

    pub fn uses_spectral(self) -> bool {
        matches!(self, LossRecipe::Spectral)
    }

    fn label(self) -> &'static str {
        match self {
            LossRecipe::Mse => "MSE",
            LossRecipe::Perceptual => "Perceptual",
            LossRecipe::Spectral => "Spectral",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub perceptual: f64,
    pub spectral: f64,
    pub adversarial: f64,
    pub commitment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            perceptual: 1.0,
            spectral: 1.0,
            adversarial: 0.1,
            commitment: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            widths: vec![8, 16],
            leaky_slope: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub levels: usize,
    pub widths: Vec<usize>,
    pub codebook: CodebookConfig,
    pub recipe: LossRecipe,
    pub gan: bool,
    pub weights: LossWeights,
    pub discriminator: DiscriminatorConfig,
    /// Channel widths of the frozen perceptual feature extractor.
    pub perceptual_widths: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl CodecConfig {
    pub fn toy() -> Self {
        CodecConfig {
            levels: 3,
            widths: vec![8, 16, 32],
            codebook: CodebookConfig::toy(),
            recipe: LossRecipe::Mse,
            gan: false,
            weights: LossWeights::default(),
            discriminator: DiscriminatorConfig::default(),
            perceptual_widths: vec![4, 8, 16],
            lr: 1e-3,
            batch_size: 4,
            seed: 0,
        }
    }

    /// The full-size architecture: four levels and the large codebook.
    pub fn paper_shape() -> Self {
        CodecConfig {
            levels: 4,
            widths: vec![32, 64, 128, 256],
            codebook: CodebookConfig::paper(),
            recipe: LossRecipe::Spectral,
            gan: true,
            discriminator: DiscriminatorConfig {
                widths: vec![32, 64],
                leaky_slope: 0.2,
            },
            perceptual_widths: vec![8, 16, 32],
            lr: 1.65e-4,
            batch_size: 96,
            ..Self::toy()
        }
    }

    /// Name in the ablation grid, e.g. `3-layer Spectral GAN`.
    pub fn ablation_name(&self) -> String {
        format!(
            "{}-layer {} {}",
            self.levels,
            self.recipe.label(),
            if self.gan { "GAN" } else { "no-GAN" }
        )
    }

    /// Toy config for an ablation name such as `4-layer MSE no-GAN`.
    pub fn ablation(name: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown ablation config {name:?}"));
        let mut parts = name.split_whitespace();
        let levels = match parts.next() {
            Some("3-layer") => 3,
            Some("4-layer") => 4,
            _ => return Err(bad()),
        };
        let recipe = match parts.next() {
            Some("MSE") => LossRecipe::Mse,
            Some("Perceptual") => LossRecipe::Perceptual,
            Some("Spectral") => LossRecipe::Spectral,
            _ => return Err(bad()),
        };
        let gan = match parts.next() {
            Some("GAN") => true,
            Some("no-GAN") => false,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        let mut c = Self::toy();
        c.levels = levels;
        if levels == 4 {
            c.widths = vec![8, 16, 32, 32];
        }
        c.recipe = recipe;
        c.gan = gan;
        Ok(c)
    }

    pub fn ablation_grid() -> Vec<CodecConfig> {
        let mut out = Vec::new();
        for levels in [3, 4] {
            for recipe in ["MSE", "Perceptual", "Spectral"] {
                for gan in ["no-GAN", "GAN"] {
                    out.push(Self::ablation(&format!("{levels}-layer {recipe} {gan}")).unwrap());
                }
            }
        }
        out
    }

    pub fn factor(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.widths.len() != self.levels {
            return Err(Error::invalid(format!(
                "codec: {} widths for {} levels",
                self.widths.len(),
                self.levels
            )));
        }
        if self.widths.contains(&0) || self.batch_size == 0 {
            return Err(Error::invalid("codec: zero width or batch size"));
        }
        if self.codebook.size < 2 {
            return Err(Error::invalid("codec: codebook needs at least 2 entries"));
        }
        if self.recipe.uses_perceptual() && self.perceptual_widths.is_empty() {
            return Err(Error::invalid("codec: perceptual recipe needs extractor widths"));
        }
        Ok(())
    }

    /// Latent grid dims for an input of `dims`.
    pub fn latent_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let f = self.factor();
        let mut out = [0; 3];
        for (a, name) in ["x", "y", "z"].iter().enumerate() {
            if dims[a] % f != 0 || dims[a] == 0 {
                return Err(Error::Shape {
                    op: "codec",
                    axis: format!("{name} extent {} not divisible by {f}", dims[a]),
                    expected: f,
                    got: dims[a],
                });
            }
            out[a] = dims[a] / f;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv3: Conv3d,
    conv1: Conv3d,
}

impl ResBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        let conv3 = Conv3d::new(store, &format!("{name}.conv3"), c, c, 3, 1, 1, ConvKind::Forward, rng);
        let conv1 = Conv3d::new(store, &format!("{name}.conv1"), c, c, 1, 1, 0, ConvKind::Forward, rng);
        ResBlock { conv3, conv1 }
    }

    fn forward(&self, t: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv3.forward(t, p, x)?;
        let h = t.relu(h);
        let h = self.conv1.forward(t, p, h)?;
        let s = t.add(x, h)?;
        Ok(t.relu(s))
    }
}

#[derive(Clone, Debug)]
struct Network {
    enc_down: Vec<Conv3d>,
    enc_res: Vec<ResBlock>,
    enc_out: Conv3d,
    dec_in: Conv3d,
    dec_res: Vec<ResBlock>,
    dec_up: Vec<Conv3d>,
}

#[derive(Clone, Debug)]
struct Extractor {
    convs: Vec<Conv3d>,
    slope: f64,
}

impl Extractor {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, widths: &[usize], rng: &mut R) -> Self {
        let mut cin = 1;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv3d::new(store, &format!("{prefix}{i}"), cin, w, 4, 2, 1, ConvKind::Forward, rng);
                cin = w;
                c
            })
            .collect();
        Extractor { convs, slope: 0.2 }
    }

    /// Feature maps after every layer.
    fn features(&self, t: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = c.forward(t, p, h)?;
            h = t.leaky_relu(h, self.slope);
            out.push(h);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct Discriminator {
    convs: Vec<Conv3d>,
    slope: f64,
}

impl Discriminator {
    fn new<R: Rng>(store: &mut ParamStore, cfg: &DiscriminatorConfig, rng: &mut R) -> Self {
        let mut cin = 1;
        let mut convs = Vec::new();
        for (i, &w) in cfg.widths.iter().enumerate() {
            convs.push(Conv3d::new(store, &format!("disc.{i}"), cin, w, 4, 2, 1, ConvKind::Forward, rng));
            cin = w;
        }
        convs.push(Conv3d::new(store, "disc.out", cin, 1, 4, 2, 1, ConvKind::Forward, rng));
        Discriminator {
            convs,
            slope: cfg.leaky_slope,
        }
    }

    /// Patch logits.
    fn forward(&self, t: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(t, p, h)?;
            if i < last {
                h = t.leaky_relu(h, self.slope);
            }
        }
        Ok(h)
    }
}

/// Trained or freshly initialised codec.
#[derive(Clone, Debug)]
pub struct CodecModel {
    pub config: CodecConfig,
    pub params: ParamStore,
    pub codebook: Codebook,
    net: Network,
    pub disc_params: Option<ParamStore>,
    disc: Option<Discriminator>,
    /// Frozen random feature extractor for the perceptual term.
    pub perc_params: Option<ParamStore>,
    perc: Option<Extractor>,
}

/// Scalar losses recorded on a tape.
struct TapeLosses {
    total: Var,
    named: Vec<(&'static str, Var)>,
}

/// Output of one encode pass on a batch.
struct Encoded {
    z: Var,
    rows: Vec<f32>,
    grid: Vec<QuantizedGrid>,
    latent: [usize; 3],
}

pub fn stack_volumes(vols: &[&Volume]) -> Result<Tensor<f32>> {
    let dims = vols.first().ok_or_else(|| Error::Empty("volume batch".into()))?.dims();
    let mut data = Vec::with_capacity(vols.len() * vols[0].len());
    for v in vols {
        if v.dims() != dims {
            return Err(Error::invalid(format!(
                "batch mixes dims {:?} and {:?}",
                dims,
                v.dims()
            )));
        }
        data.extend_from_slice(v.voxels());
    }
    Tensor::new(&[vols.len(), 1, dims[2], dims[1], dims[0]], data)
}

/// `(b, c, l)` channels-first to `(b, l, c)` rows.
fn to_rows(data: &[f32], b: usize, c: usize, l: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        for ci in 0..c {
            for li in 0..l {
                out[(bi * l + li) * c + ci] = data[(bi * c + ci) * l + li];
            }
        }
    }
    out
}

fn from_rows(rows: &[f32], b: usize, c: usize, l: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows.len()];
    for bi in 0..b {
        for ci in 0..c {
            for li in 0..l {
                out[(bi * c + ci) * l + li] = rows[(bi * l + li) * c + ci];
            }
        }
    }
    out
}

impl CodecModel {
    pub fn new(config: &CodecConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(config.seed, "codec-init"));
        let mut params = ParamStore::new();
        let mut enc_down = Vec::new();
        let mut enc_res = Vec::new();
        let mut cin = 1;
        for (l, &w) in config.widths.iter().enumerate() {
            enc_down.push(Conv3d::new(&mut params, &format!("enc.down{l}"), cin, w, 4, 2, 1, ConvKind::Forward, &mut rng));
            enc_res.push(ResBlock::new(&mut params, &format!("enc.res{l}"), w, &mut rng));
            cin = w;
        }
        let n = config.codebook.dim;
        let enc_out = Conv3d::new(&mut params, "enc.out", cin, n, 1, 1, 0, ConvKind::Forward, &mut rng);
        let dec_in = Conv3d::new(&mut params, "dec.in", n, cin, 1, 1, 0, ConvKind::Forward, &mut rng);
        let mut dec_res = Vec::new();
        let mut dec_up = Vec::new();
        for l in (0..config.levels).rev() {
            let w = config.widths[l];
            let cout = if l == 0 { 1 } else { config.widths[l - 1] };
            dec_res.push(ResBlock::new(&mut params, &format!("dec.res{l}"), w, &mut rng));
            dec_up.push(Conv3d::new(&mut params, &format!("dec.up{l}"), w, cout, 4, 2, 1, ConvKind::Transpose, &mut rng));
        }
        let codebook = Codebook::new(config.codebook, &mut rng)?;
        let (disc_params, disc) = if config.gan {
            let mut s = ParamStore::new();
            let d = Discriminator::new(&mut s, &config.discriminator, &mut rng);
            (Some(s), Some(d))
        } else {
            (None, None)
        };
        let (perc_params, perc) = if config.recipe.uses_perceptual() {
            let mut s = ParamStore::new();
            let e = Extractor::new(&mut s, "perc.", &config.perceptual_widths, &mut rng);
            for p in s.iter_mut() {
                p.requires_grad = false;
            }
            (Some(s), Some(e))
        } else {
            (None, None)
        };
        Ok(CodecModel {
            config: config.clone(),
            params,
            codebook,
            net: Network {
                enc_down,
                enc_res,
                enc_out,
                dec_in,
                dec_res,
                dec_up,
            },
            disc_params,
            disc,
            perc_params,
            perc,
        })
    }

    fn encoder(&self, t: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (down, res) in self.net.enc_down.iter().zip(&self.net.enc_res) {
            h = down.forward(t, p, h)?;
            h = t.relu(h);
            h = res.forward(t, p, h)?;
        }
        self.net.enc_out.forward(t, p, h)
    }

    fn decoder(&self, t: &mut Tape<f32>, p: &Bound, zq: Var) -> Result<Var> {
        let mut h = self.net.dec_in.forward(t, p, zq)?;
        h = t.relu(h);
        let last = self.net.dec_up.len() - 1;
        for (i, (res, up)) in self.net.dec_res.iter().zip(&self.net.dec_up).enumerate() {
            h = res.forward(t, p, h)?;
            h = up.forward(t, p, h)?;
            if i < last {
                h = t.relu(h);
            }
        }
        Ok(t.sigmoid(h))
    }

    fn encode_on_tape(&self, t: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Encoded> {
        let s = t.shape(x).to_vec();
        let latent = self.config.latent_dims([s[4], s[3], s[2]])?;
        let z = self.encoder(t, p, x)?;
        let (b, n) = (s[0], self.codebook.dim());
        let l: usize = latent.iter().product();
        let rows = to_rows(t.value(z).data(), b, n, l);
        let grid = rows
            .chunks(l * n)
            .map(|r| vq::quantize(r, latent, &self.codebook))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoded { z, rows, grid, latent })
    }

    fn input_var(&self, t: &mut Tape<f32>, v: &Volume) -> Result<Var> {
        if v.domain() != IntensityDomain::Unit {
            return Err(Error::invalid("codec input must be a unit volume"));
        }
        let x = stack_volumes(&[v])?;
        Ok(t.constant(x))
    }

    pub fn encode_indices(&self, v: &Volume) -> Result<QuantizedGrid> {
        let mut t = Tape::new();
        let p = self.params.bind_frozen(&mut t);
        let x = self.input_var(&mut t, v)?;
        let mut enc = self.encode_on_tape(&mut t, &p, x)?;
        Ok(enc.grid.remove(0))
    }

    fn decode_vectors(&self, t: &mut Tape<f32>, p: &Bound, grids: &[&QuantizedGrid]) -> Result<Var> {
        let latent = grids[0].dims;
        let (n, l) = (self.codebook.dim(), latent.iter().product::<usize>());
        let rows: Vec<f32> = grids.iter().flat_map(|g| g.vectors.iter().copied()).collect();
        let cf = from_rows(&rows, grids.len(), n, l);
        let zq = t.constant(Tensor::new(&[grids.len(), n, latent[2], latent[1], latent[0]], cf)?);
        self.decoder(t, p, zq)
    }

    pub fn decode_indices(&self, q: &QuantizedGrid) -> Result<Volume> {
        let q = QuantizedGrid::from_indices(q.dims, q.indices.clone(), &self.codebook)?;
        let mut t = Tape::new();
        let p = self.params.bind_frozen(&mut t);
        let y = self.decode_vectors(&mut t, &p, &[&q])?;
        let f = self.config.factor();
        let dims = [q.dims[0] * f, q.dims[1] * f, q.dims[2] * f];
        Volume::unit_clamped(dims, t.value(y).data().to_vec())
    }

    pub fn reconstruct(&self, v: &Volume) -> Result<Volume> {
        self.decode_indices(&self.encode_indices(v)?)
    }

    /// Mean squared error of the reconstruction; the control OOD score.
    pub fn recon_mse_score(&self, v: &Volume) -> Result<f64> {
        let r = self.reconstruct(v)?;
        Ok(mse(v, &r))
    }

    fn recon_losses(
        &self,
        t: &mut Tape<f32>,
        x: Var,
        xhat: Var,
        recipe: LossRecipe,
        disc: Option<&Bound>,
    ) -> Result<TapeLosses> {
        let w = &self.config.weights;
        let mut named = Vec::new();
        let m = t.mse(xhat, x)?;
        named.push(("mse", m));
        let mut total = t.scale(m, w.recon);
        if recipe.uses_perceptual() {
            let (perc, pp) = match (&self.perc, &self.perc_params) {
                (Some(e), Some(s)) => (e, s),
                _ => return Err(Error::invalid("recipe needs a perceptual extractor this model lacks")),
            };
            let fb = pp.bind_frozen(t);
            let fx = perc.features(t, &fb, x)?;
            let fy = perc.features(t, &fb, xhat)?;
            let mut acc: Option<Var> = None;
            for (a, b) in fx.into_iter().zip(fy) {
                let d = t.mse(b, a)?;
                acc = Some(match acc {
                    Some(s) => t.add(s, d)?,
                    None => d,
                });
            }
            let pl = t.scale(acc.expect("extractor has layers"), 1.0 / perc.convs.len() as f64);
            named.push(("perceptual", pl));
            let s = t.scale(pl, w.perceptual);
            total = t.add(total, s)?;
        }
        if recipe.uses_spectral() {
            let raw = t.spectral(xhat, x)?;
            // orthonormal DFT scaling: mean squared magnitude error over voxels
            let s = t.shape(x);
            let voxels: usize = s[2..].iter().product();
            let sp = t.scale(raw, 1.0 / voxels as f64);
            named.push(("spectral", sp));
            let s = t.scale(sp, w.spectral);
            total = t.add(total, s)?;
        }
        if let Some(db) = disc {
            let d = self
                .disc
                .as_ref()
                .ok_or_else(|| Error::invalid("adversarial term requested without a discriminator"))?;
            let logits = d.forward(t, db, xhat)?;
            let mean = t.mean(logits);
            let adv = t.scale(mean, -1.0);
            named.push(("adversarial", adv));
            let s = t.scale(adv, w.adversarial);
            total = t.add(total, s)?;
        }
        Ok(TapeLosses { total, named })
    }

    /// Named reconstruction losses of `xhat` against `v`.
    pub fn loss_bundle(&self, v: &Volume, xhat: &Volume, recipe: LossRecipe) -> Result<BTreeMap<String, f64>> {
        if v.dims() != xhat.dims() {
            return Err(Error::invalid("loss bundle: volume dims differ"));
        }
        if recipe.uses_perceptual() && self.perc.is_none() {
            return Err(Error::invalid(format!(
                "recipe {recipe:?} needs a perceptual extractor; model was built for {:?}",
                self.config.recipe
            )));
        }
        let mut t = Tape::new();
        let x = self.input_var(&mut t, v)?;
        let y = t.constant(stack_volumes(&[xhat])?);
        let db = match &self.disc_params {
            Some(s) => Some(s.bind_frozen(&mut t)),
            None => None,
        };
        let l = self.recon_losses(&mut t, x, y, recipe, db.as_ref())?;
        let mut out: BTreeMap<String, f64> = l
            .named
            .iter()
            .map(|(n, v)| (n.to_string(), t.value(*v).item() as f64))
            .collect();
        out.insert("total".into(), t.value(l.total).item() as f64);
        Ok(out)
    }

    /// Fraction of real volumes with positive mean patch logit plus
    /// reconstructions with negative mean logit.
    pub fn discriminator_accuracy(&self, volumes: &[Volume]) -> Result<f64> {
        let (d, dp) = match (&self.disc, &self.disc_params) {
            (Some(d), Some(s)) => (d, s),
            _ => return Err(Error::invalid("model has no discriminator")),
        };
        let mut correct = 0usize;
        for v in volumes {
            let r = self.reconstruct(v)?;
            for (vol, real) in [(v, true), (&r, false)] {
                let mut t = Tape::new();
                let b = dp.bind_frozen(&mut t);
                let x = t.constant(stack_volumes(&[vol])?);
                let y = d.forward(&mut t, &b, x)?;
                let m = t.mean(y);
                let score = t.value(m).item();
                if (score > 0.0) == real {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / (2 * volumes.len()).max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(serde_json::json!({ "codec": self.config }));
        self.export_into("codec.", &mut c);
        Ok(c)
    }

    pub fn export_into(&self, prefix: &str, c: &mut Checkpoint) {
        self.params.export(&format!("{prefix}net."), c);
        self.codebook.export(&format!("{prefix}codebook."), c);
        if let Some(s) = &self.disc_params {
            s.export(&format!("{prefix}disc."), c);
        }
        if let Some(s) = &self.perc_params {
            s.export(&format!("{prefix}perc."), c);
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg: CodecConfig = serde_json::from_value(
            c.config
                .get("codec")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint has no codec config".into()))?,
        )?;
        Self::import_from(&cfg, "codec.", c)
    }

    pub fn import_from(cfg: &CodecConfig, prefix: &str, c: &Checkpoint) -> Result<Self> {
        let mut m = CodecModel::new(cfg)?;
        m.params.import(&format!("{prefix}net."), c)?;
        m.codebook = Codebook::import(cfg.codebook, &format!("{prefix}codebook."), c)?;
        if let Some(s) = &mut m.disc_params {
            s.import(&format!("{prefix}disc."), c)?;
        }
        if let Some(s) = &mut m.perc_params {
            s.import(&format!("{prefix}perc."), c)?;
        }
        Ok(m)
    }
}

pub fn mse(a: &Volume, b: &Volume) -> f64 {
    a.voxels()
        .iter()
        .zip(b.voxels())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len().max(1) as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    /// Mean of each named loss over the epoch's steps.
    pub losses: BTreeMap<String, f64>,
    /// Distinct codes used in the epoch.
    pub codes_used: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecHistory {
    pub epochs: Vec<EpochLosses>,
}

impl CodecHistory {
    pub fn curve(&self, name: &str) -> Vec<f64> {
        self.epochs
            .iter()
            .map(|e| e.losses.get(name).copied().unwrap_or(f64::NAN))
            .collect()
    }
}

/// Train a codec from scratch. Generator and discriminator steps alternate
/// 1:1 when the GAN term is on; the codebook is EMA-updated every step.
pub fn train_codec(data: &[Volume], config: &CodecConfig, epochs: usize, seed_value: u64) -> Result<(CodecModel, CodecHistory)> {
    train_codec_with(data, config, epochs, seed_value, |_| {})
}

pub fn train_codec_with(
    data: &[Volume],
    config: &CodecConfig,
    epochs: usize,
    seed_value: u64,
    mut on_epoch: impl FnMut(&EpochLosses),
) -> Result<(CodecModel, CodecHistory)> {
    if data.is_empty() {
        return Err(Error::Empty("codec training set".into()));
    }
    let mut cfg = config.clone();
    cfg.seed = seed_value;
    let mut model = CodecModel::new(&cfg)?;
    let bs = cfg.batch_size.min(data.len());
    let steps = data.len().div_ceil(bs);
    model.codebook.config.dead_after = steps;
    let mut gen_opt = OptimizerState::new(AdamConfig::amsgrad(cfg.lr), &model.params);
    let mut disc_opt = model
        .disc_params
        .as_ref()
        .map(|s| OptimizerState::new(AdamConfig::amsgrad(cfg.lr), s));
    let mut rng = seed::rng(seed::derive(seed_value, "codec-train"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = CodecHistory::default();
    let mut initialised = false;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut used = vec![false; model.codebook.size()];
        for batch in order.chunks(bs) {
            let vols: Vec<&Volume> = batch.iter().map(|&i| &data[i]).collect();
            let x_t = stack_volumes(&vols)?;

            if !initialised {
                let mut t = Tape::new();
                let gp = model.params.bind_frozen(&mut t);
                let x = t.constant(x_t.clone());
                let z = model.encoder(&mut t, &gp, x)?;
                let s = t.shape(z).to_vec();
                let rows = to_rows(t.value(z).data(), s[0], s[1], s[2] * s[3] * s[4]);
                model.codebook.init_from(&rows, &mut rng)?;
                initialised = true;
            }
            let mut t = Tape::new();
            let gp = model.params.bind(&mut t);
            let x = t.constant(x_t.clone());
            let enc = model.encode_on_tape(&mut t, &gp, x)?;
            let (b, n) = (batch.len(), model.codebook.dim());
            let l: usize = enc.latent.iter().product();
            let zq_rows: Vec<f32> = enc.grid.iter().flat_map(|g| g.vectors.iter().copied()).collect();
            let zq = Tensor::new(t.shape(enc.z), from_rows(&zq_rows, b, n, l))?;
            let (commit, st) = vq::vq_losses(&mut t, enc.z, zq, cfg.weights.commitment)?;
            let xhat = model.decoder(&mut t, &gp, st)?;
            let db = model.disc_params.as_ref().map(|s| s.bind_frozen(&mut t));
            let losses = model.recon_losses(&mut t, x, xhat, cfg.recipe, db.as_ref())?;
            let total = t.add(losses.total, commit)?;
            for (name, v) in losses.named.iter().chain([("commitment", commit), ("total", total)].iter()) {
                *sums.entry(name.to_string()).or_default() += t.value(*v).item() as f64;
            }
            let total_value = t.value(total).item();
            if !total_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("generator loss {total_value}"),
                });
            }
            let xhat_value = t.value(xhat).clone();
            let mut g = t.backward(total)?;
            model.params.accumulate(&gp, &mut g);
            gen_opt.step(&mut model.params)?;

            let assignments: Vec<usize> = enc.grid.iter().flat_map(|g| g.indices.iter().copied()).collect();
            for &k in &assignments {
                used[k] = true;
            }
            vq::ema_update(&mut model.codebook, &enc.rows, &assignments, &mut rng)?;

            if let (Some(d), Some(dp), Some(opt)) = (&model.disc, &mut model.disc_params, &mut disc_opt) {
                let mut t = Tape::new();
                let b = dp.bind(&mut t);
                let real = t.constant(x_t);
                let fake = t.constant(xhat_value);
                let lr = d.forward(&mut t, &b, real)?;
                let lf = d.forward(&mut t, &b, fake)?;
                let hr = t.hinge_real(lr);
                let hf = t.hinge_fake(lf);
                let dl = t.add(hr, hf)?;
                let v = t.value(dl).item() as f64;
                if !v.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("discriminator loss {v}"),
                    });
                }
                *sums.entry("discriminator".into()).or_default() += v;
                let mut g = t.backward(dl)?;
                dp.accumulate(&b, &mut g);
                opt.step(dp)?;
            }
        }
        let e = EpochLosses {
            epoch,
            losses: sums.into_iter().map(|(k, v)| (k, v / steps as f64)).collect(),
            codes_used: used.iter().filter(|&&u| u).count(),
        };
        on_epoch(&e);
        history.epochs.push(e);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{synth_phantom, PhantomSpec};

    #[test]
    fn ablation_names_round_trip() {
        let grid = CodecConfig::ablation_grid();
        assert_eq!(grid.len(), 12);
        assert_eq!(grid[0].ablation_name(), "3-layer MSE no-GAN");
        assert_eq!(grid[11].ablation_name(), "4-layer Spectral GAN");
        for c in &grid {
            assert_eq!(&CodecConfig::ablation(&c.ablation_name()).unwrap(), c);
        }
        assert!(CodecConfig::ablation("5-layer MSE GAN").is_err());
    }

    #[test]
    fn latent_shapes() {
        let c = CodecConfig::toy();
        assert_eq!(c.latent_dims([32, 32, 32]).unwrap(), [4, 4, 4]);
        let p = CodecConfig::paper_shape();
        assert_eq!(p.latent_dims([176, 208, 176]).unwrap(), [11, 13, 11]);
        let e = c.latent_dims([32, 30, 32]).unwrap_err().to_string();
        assert!(e.contains('y'), "{e}");
    }

    #[test]
    fn shapes_invert_for_every_ablation_config() {
        let (v, _) = synth_phantom(&PhantomSpec::default(), false).unwrap();
        for cfg in CodecConfig::ablation_grid() {
            let m = CodecModel::new(&cfg).unwrap();
            let q = m.encode_indices(&v).unwrap();
            let f = 32 / cfg.factor();
            assert_eq!(q.dims, [f, f, f]);
            let r = m.decode_indices(&q).unwrap();
            assert_eq!(r.dims(), v.dims());
            assert!(r.voxels().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn identical_inputs_give_zero_losses() {
        let (v, _) = synth_phantom(&PhantomSpec::default(), false).unwrap();
        let mut cfg = CodecConfig::toy();
        cfg.recipe = LossRecipe::Spectral;
        let m = CodecModel::new(&cfg).unwrap();
        let l = m.loss_bundle(&v, &v, LossRecipe::Spectral).unwrap();
        for k in ["mse", "perceptual", "spectral"] {
            assert!(l[k].abs() < 1e-6, "{k} = {}", l[k]);
        }
        let shifted = v.map(IntensityDomain::Unit, |x| (x + 0.1).min(1.0)).unwrap();
        let plain = CodecModel::new(&CodecConfig::toy()).unwrap();
        assert!(plain.loss_bundle(&v, &shifted, LossRecipe::Perceptual).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = CodecConfig::toy();
        cfg.gan = true;
        cfg.recipe = LossRecipe::Perceptual;
        let m = CodecModel::new(&cfg).unwrap();
        let c = Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
        let back = CodecModel::from_checkpoint(&c).unwrap();
        let (v, _) = synth_phantom(&PhantomSpec::default(), false).unwrap();
        assert_eq!(back.encode_indices(&v).unwrap(), m.encode_indices(&v).unwrap());
    }
}
