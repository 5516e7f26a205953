//! Experiment stages. Each stage reads its inputs from the run directory,
//! writes artifacts back into it and is recorded in the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vox_core::autodiff::Checkpoint;
use vox_core::codec::{self, CodecConfig, CodecModel};
use vox_core::corrupt::{self, CorruptionKind};
use vox_core::density::{self, DensityModel, PerformerConfig, TokenSequence};
use vox_core::eval::{self, AblationTable, Histogram, Label, LesionAucRow, OodTable, Report, ScatterRow, ScoreSet};
use vox_core::seed;
use vox_core::seg::{self, Method, UNet, UNetConfig};
use vox_core::volume::{read_mask, read_volume};
use vox_core::volume::{DatasetManifest, ManifestEntry, NORMAL_CLASS};
use vox_core::volume::{synth_phantom, LabelMask, Volume};
use vox_core::vq::QuantizedGrid;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{write_atomic, RunManifest};

pub const STAGES: [&str; 11] = [
    "synth-data",
    "corrupt",
    "train-codec",
    "encode",
    "train-density",
    "score",
    "seg-train",
    "seg-uncertainty",
    "eval-ood",
    "eval-ablation",
    "report",
];

pub const DATA_MANIFEST: &str = "data/manifest.json";
pub const CORRUPT_MANIFEST: &str = "data/corrupt_manifest.json";
pub const CODEC_CKPT: &str = "models/codec.ckpt";
pub const DENSITY_CKPT: &str = "models/density.ckpt";
pub const OOD_CKPT: &str = "models/ood.ckpt";
pub const TOKENS: &str = "tokens/tokens.json";
pub const SCORES: &str = "scores/scores.jsonl";
pub const LESIONS: &str = "lesions/lesions.csv";
pub const REPORTS: &str = "reports";

/// Stages that must have completed before `stage` can run.
pub fn prerequisites(stage: &str) -> &'static [&'static str] {
    match stage {
        "corrupt" | "train-codec" | "seg-train" => &["synth-data"],
        "encode" => &["corrupt", "train-codec"],
        "train-density" => &["encode"],
        "score" => &["train-density"],
        "seg-uncertainty" => &["seg-train", "corrupt"],
        "eval-ood" => &["score"],
        "eval-ablation" => &["corrupt"],
        "report" => &["eval-ood", "seg-uncertainty", "score"],
        _ => &[],
    }
}

pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub manifest: RunManifest,
}

fn io_err(p: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", p.display()))
}

fn need(p: &Path) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(p.display().to_string()))
    }
}

impl Run {
    pub fn open(dir: &Path, config: RunConfig) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let manifest = RunManifest::open(dir, &config)?;
        Ok(Run {
            dir: dir.to_path_buf(),
            config,
            manifest,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Run one stage unless it already completed with intact artifacts.
    /// Returns whether the stage executed.
    pub fn stage(&mut self, name: &str) -> CliResult<bool> {
        if self.manifest.is_done(&self.dir, name) {
            log::info!("{name}: already complete, skipping");
            return Ok(false);
        }
        for pre in prerequisites(name) {
            if !self.manifest.is_done(&self.dir, pre) {
                return Err(CliError::MissingInput(format!("stage {name} needs {pre} to have run")));
            }
        }
        let t0 = Instant::now();
        log::info!("{name}: start");
        let (inputs, artifacts) = match name {
            "synth-data" => self.synth_data()?,
            "corrupt" => self.corrupt()?,
            "train-codec" => self.train_codec()?,
            "encode" => self.encode()?,
            "train-density" => self.train_density()?,
            "score" => self.score()?,
            "seg-train" => self.seg_train()?,
            "seg-uncertainty" => self.seg_uncertainty()?,
            "eval-ood" => self.eval_ood()?,
            "eval-ablation" => self.eval_ablation()?,
            "report" => self.report()?,
            other => return Err(CliError::Usage(format!("unknown stage {other}"))),
        };
        let secs = t0.elapsed().as_secs_f64();
        log::info!("{name}: done in {secs:.1}s");
        self.manifest.record(&self.dir, name, secs, &inputs, &artifacts)?;
        Ok(true)
    }

    pub fn full(&mut self) -> CliResult<()> {
        for s in STAGES {
            self.stage(s)?;
        }
        Ok(())
    }

    fn data_manifest(&self) -> CliResult<DatasetManifest> {
        let p = self.path(DATA_MANIFEST);
        need(&p)?;
        Ok(DatasetManifest::read(&p)?)
    }

    fn corrupt_manifest(&self) -> CliResult<DatasetManifest> {
        let p = self.path(CORRUPT_MANIFEST);
        need(&p)?;
        Ok(DatasetManifest::read(&p)?)
    }

    fn load_entry(&self, e: &ManifestEntry) -> CliResult<(Volume, LabelMask)> {
        let data = self.path("data");
        let v = read_volume(&data.join(&e.volume))?;
        let m = match &e.mask {
            Some(p) => read_mask(&data.join(p))?,
            None => LabelMask::empty(v.dims())?,
        };
        Ok((v, m))
    }

    fn load_split(&self, m: &DatasetManifest, split: &str, limit: usize) -> CliResult<Vec<(String, String, Volume, LabelMask)>> {
        let entries: Vec<&ManifestEntry> = m.split(split).take(limit).collect();
        entries
            .par_iter()
            .map(|e| {
                let (v, mk) = self.load_entry(e)?;
                Ok((e.id.clone(), e.class.clone(), v, mk))
            })
            .collect()
    }

    fn synth_data(&mut self) -> CliResult<(Vec<PathBuf>, Vec<PathBuf>)> {
        let c = &self.config;
        let data = self.path("data");
        let mut man = DatasetManifest::new(c.seed, None);
        let mut artifacts = Vec::new();
        for (split, count) in [("train", c.data.train_count), ("test", c.data.test_count)] {
            let base = seed::derive(c.seed, split);
            let made: Vec<(ManifestEntry, Vec<PathBuf>)> = (0..count)
                .into_par_iter()
                .map(|i| {
                    let spec = c.data.phantom.with_seed(seed::derive_index(base, i as u64));
                    let (v, m) = synth_phantom(&spec, true)?;
                    let id = format!("{split}_{i:04}");
                    let (vp, mp) = (format!("{split}/{id}.vol3"), format!("{split}/{id}.msk3"));
                    save_volume(&v, &data.join(&vp))?;
                    save_mask(&m, &data.join(&mp))?;
                    Ok((
                        ManifestEntry {
                            id,
                            volume: vp.clone(),
                            mask: Some(mp.clone()),
                            class: NORMAL_CLASS.into(),
                            corruption: None,
                            split: split.into(),
                        },
                        vec![data.join(vp), data.join(mp)],
                    ))
                })
                .collect::<CliResult<_>>()?;
            for (e, paths) in made {
                man.entries.push(e);
                artifacts.extend(paths);
            }
        }
        man.validate()?;
        let p = self.path(DATA_MANIFEST);
        man.write(&p)?;
        artifacts.push(p);
        Ok((Vec::new(), artifacts))
    }

    fn corrupt(&mut self) -> CliResult<(Vec<PathBuf>, Vec<PathBuf>)> {
        let src = self.data_manifest()?;
        let data = self.path("data");
        let base = seed::derive(self.config.seed, "corrupt");
        let tests: Vec<(usize, &ManifestEntry)> = src.split("test").enumerate().collect();
        let made: Vec<Vec<(ManifestEntry, Vec<PathBuf>)>> = tests
            .par_iter()
            .map(|&(i, e)| {
                let (v, m) = self.load_entry(e)?;
                let outs = corrupt::suite(&v, &m, seed::derive_index(base, i as u64))?;
                outs.into_iter()
                    .map(|(cv, cm, rec)| {
                        let class = rec.kind.class_label();
                        let id = format!("{}__{class}", e.id);
                        let (vp, mp) = (format!("corrupt/{id}.vol3"), format!("corrupt/{id}.msk3"));
                        save_volume(&cv, &data.join(&vp))?;
                        save_mask(&cm, &data.join(&mp))?;
                        Ok((
                            ManifestEntry {
                                id,
                                volume: vp.clone(),
                                mask: Some(mp.clone()),
                                class,
                                corruption: Some(rec),
                                split: "corrupt".into(),
                            },
                            vec![data.join(vp), data.join(mp)],
                        ))
                    })
                    .collect()
            })
            .collect::<CliResult<_>>()?;
        let mut man = DatasetManifest::new(base, None);
        let mut artifacts = Vec::new();
        for (e, p) in made.into_iter().flatten() {
            man.entries.push(e);
            artifacts.extend(p);
        }
        man.validate()?;
        let p = self.path(CORRUPT_MANIFEST);
        man.write(&p)?;
        artifacts.push(p);
        Ok((vec![self.path(DATA_MANIFEST)], artifacts))
    }

    fn train_codec(&mut self) -> CliResult<(Vec<PathBuf>, Vec<PathBuf>)> {
        let m = self.data_manifest()?;
        let train: Vec<Volume> = self.load_split(&m, "train", usize::MAX)?.into_iter().map(|x| x.2).collect();
        let c = &self.config;
        let (model, hist) = codec::train_codec_with(&train, &c.codec, c.codec_epochs, seed::derive(c.seed, "codec"), |e| {
            log::info!("codec epoch {} {:?} codes {}", e.epoch, e.losses, e.codes_used)
        })?;
        let ck = self.path(CODEC_CKPT);
        fs::create_dir_all(ck.parent().unwrap())?;
        model.to_checkpoint()?.write(&ck)?;
        let h = self.path(&format!("{REPORTS}/codec_history.json"));
        write_json(&h, &serde_json::json!({"schema_version": 1, "history": hist}))?;
        Ok((vec![self.path(DATA_MANIFEST)], vec![ck, h]))
    }

    fn encode(&mut self) -> CliResult<(Vec<PathBuf>, Vec<PathBuf>)> {
        let ck = self.path(CODEC_CKPT);
        need(&ck)?;
        let model = CodecModel::from_checkpoint(&Checkpoint::read(&ck)?)?;
        let data = self.data_manifest()?;
        let cor = self.corrupt_manifest()?;
        let entries: Vec<&ManifestEntry> = data.entries.iter().chain(&cor.entries).collect();
        let rows: Vec<TokenRecord> = entries
            .par_iter()
            .map(|e| {
                let (v, _) = self.load_entry(e)?;
                let q = model.encode_indices(&v)?;
                Ok(TokenRecord {
                    id: e.id.clone(),
                    class: e.class.clone(),
                    split: e.split.clone(),
                    dims: q.dims,
                    indices: q.indices,
                })
            })
            .collect::<CliResult<_>>()?;
        let p = self.path(TOKENS);
        write_json(
            &p,
            &TokenFile {
                codebook_size: model.codebook.size(),
                rows,
            },
        )?;
        Ok((vec![ck, self.path(DATA_MANIFEST), self.path(CORRUPT_MANIFEST)], vec![p]))
    }

    fn tokens(&self) -> CliResult<TokenFile> {
        let p = self.path(TOKENS);
        need(&p)?;
        Ok(serde_json::from_slice(&fs::read(&p)?)?)
    }

    fn train_density(&mut self) -> CliResult<(Vec<PathBuf>, Vec<PathBuf>)> {
        let tf = self.tokens()?;
        let seqs = |split: &str| -> CliResult<Vec<TokenSequence>> {
            tf.rows.iter().filter(|r| r.split == split).map(|r| r.sequence(tf.codebook_size)).collect()
        };
        let (train, val) = (seqs("train")?, seqs("test")?);
        let c = &self.config;
        let mut dcfg = c.density.clone();
        dcfg.seed = seed::derive(c.seed, "density");
        let len = c.latent_dims().iter().product();
        let mut model = DensityModel::new(&dcfg, tf.codebook_size, len)?;
        let hist = density::train_density_with(&mut model, &train, &val, c.density_epochs, dcfg.seed, |e, t, v| {
            log::info!("density epoch {e} train {t:.4} val {v:.4}")
        })?;
        let ck = self.path(DENSITY_CKPT);
        let mut cp = Checkpoint::new(serde_json::json!({
            "density": dcfg,
            "codebook_size": tf.codebook_size,
            "max_len": len,
        }));
        model.export_into("density.", &mut cp);
        cp.write(&ck)?;
        let h = self.path(&format!("{REPORTS}/density_history.json"));
        write_json(&h, &serde_json::json!({"schema_version": 1, "history": hist}))?;
        Ok((vec![self.path(TOKENS)], vec![ck, h]))
    }

    fn score(&mut self) -> CliResult<(Vec<PathBuf>, Vec<PathBuf>)> {
        let codec_ck = self.path(CODEC_CKPT);
        let dens_ck = self.path(DENSITY_CKPT);
        need(&codec_ck)?;
        need(&dens_ck)?;
        let tf = self.tokens()?;
        let dc = Checkpoint::read(&dens_ck)?;
        let density = load_density(&dc)?;
        let cc = Checkpoint::read(&codec_ck)?;
        let codec = CodecModel::from_checkpoint(&cc)?;
        let bs = density.config.batch_size.max(1);
        let seqs: Vec<TokenSequence> = tf.rows.iter().map(|r| r.sequence(tf.codebook_size)).collect::<CliResult<_>>()?;
        let lls: Vec<density::LogLikelihood> = seqs
            .par_chunks(bs)
            .map(|chunk| {
                let refs: Vec<&TokenSequence> = chunk.iter().collect();
                density.log_likelihood_batch(&refs).map_err(CliError::from)
            })
            .collect::<CliResult<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let train_ll: Vec<f64> = tf.rows.iter().zip(&lls).filter(|(r, _)| r.split == "train").map(|(_, l)| l.total).collect();
        let threshold = percentile(&train_ll, self.config.threshold_percentile);

        let data = self.data_manifest()?;
        let cor = self.corrupt_manifest()?;
        let by_id: BTreeMap<&str, &ManifestEntry> = data.entries.iter().chain(&cor.entries).map(|e| (e.id.as_str(), e)).collect();
        let per_dir = self.path("scores/per_token");
        let map_dir = self.path("maps");
        fs::create_dir_all(&per_dir)?;
        fs::create_dir_all(&map_dir)?;
        let levels = codec.config.levels;
        let evaluated: Vec<(usize, &TokenRecord)> = tf.rows.iter().enumerate().filter(|(_, r)| r.split != "train").collect();
        let results: Vec<(ScoreRecord, Vec<PathBuf>)> = evaluated
            .par_iter()
            .map(|&(i, r)| {
                let e = by_id[r.id.as_str()];
                let (v, _) = self.load_entry(e)?;
                let mse = codec.recon_mse_score(&v)?;
                let ll = &lls[i];
                let rel = format!("scores/per_token/{}.json", r.id);
                let pt = self.path(&rel);
                write_json(&pt, &ll.per_token)?;
                let mut paths = vec![pt];
                let mut chunk = None;
                if let Some(rec) = &e.corruption {
                    if let (CorruptionKind::Chunk { .. }, Some((lo, hi))) = (&rec.kind, rec.slab) {
                        let map = density::spatial_map(&ll.per_token, r.dims, levels)?;
                        let mp = map_dir.join(format!("{}.vol3", r.id));
                        save_volume(&map, &mp)?;
                        paths.push(mp);
                        chunk = Some(slab_means(&map, lo, hi));
                    }
                }
                Ok((
                    ScoreRecord {
                        volume_id: r.id.clone(),
                        class: r.class.clone(),
                        split: r.split.clone(),
                        total_loglik: ll.total,
                        recon_mse: mse,
                        accept: ll.total >= threshold,
                        per_token: rel,
                        slab_inside: chunk.map(|c| c.0),
                        slab_outside: chunk.map(|c| c.1),
                    },
                    paths,
                ))
            })
            .collect::<CliResult<_>>()?;
        let mut lines = Vec::new();
        let mut artifacts = Vec::new();
        for (rec, paths) in results {
            lines.extend(serde_json::to_vec(&rec)?);
            lines.push(b'\n');
            artifacts.extend(paths);
        }
        let sp = self.path(SCORES);
        write_atomic(&sp, &lines)?;
        artifacts.push(sp);
        let tp = self.path(&format!("{REPORTS}/threshold.json"));
        write_json(
            &tp,
            &serde_json::json!({
                "schema_version": 1,
                "percentile": self.config.threshold_percentile,
                "threshold": threshold,
                "train_count": train_ll.len(),
            }),
        )?;
        artifacts.push(tp);
        // bundle for single-volume scoring
        let mut ood = Checkpoint::new(serde_json::json!({
            "codec": codec.config,
            "density": density.config,
            "codebook_size": density.codebook_size,
            "max_len": density.max_len,
            "threshold": threshold,
        }));
        codec.export_into("codec.", &mut ood);
        density.export_into("density.", &mut ood);
        let op = self.path(OOD_CKPT);
        ood.write(&op)?;
        artifacts.push(op);
        Ok((vec![codec_ck, dens_ck, self.path(TOKENS)], artifacts))
    }

    pub fn scores(&self) -> CliResult<Vec<ScoreRecord>> {
        let p = self.path(SCORES);
        need(&p)?;
        let text = fs::read_to_string(&p)?;
        text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
    }

    fn seg_paths(&self) -> (Vec<PathBuf>, PathBuf) {
        let ens = (0..self.config.seg.ensemble_size)
            .map(|i| self.path(&format!("models/seg_ensemble_{i}.ckpt")))
            .collect();
        (ens, self.path("models/seg_dropout.ckpt"))
    }

    fn seg_train(&mut self) -> CliResult<(Vec<PathBuf>, Vec<PathBuf>)> {
        let m = self.data_manifest()?;
        let s = &self.config.seg;
        let data: Vec<(Volume, LabelMask)> = self
            .load_split(&m, "train", s.train_count)?
            .into_iter()
            .map(|x| (x.2, x.3))
            .collect();
        let base = seed::derive(self.config.seed, "seg");
        let mut plain = s.unet.clone();
        plain.dropout = 0.0;
        let mut drop = s.unet.clone();
        drop.dropout = s.dropout;
        drop.seed = seed::derive(base, "dropout-net");
        let jobs: Vec<(UNetConfig, Option<u64>)> = (0..s.ensemble_size)
            .map(|i| {
                let mut c = plain.clone();
                c.seed = seed::derive_index(base, i as u64);
                (c.clone(), Some(c.seed))
            })
            .chain(std::iter::once((drop, None)))
            .collect();
        let models: Vec<UNet> = jobs
            .par_iter()
            .map(|(c, sub)| seg::train_seg(&data, c, s.epochs, *sub).map(|(m, _)| m).map_err(CliError::from))
            .collect::<CliResult<_>>()?;
        let (ens, dp) = self.seg_paths();
        let mut artifacts = Vec::new();
        fs::create_dir_all(self.path("models"))?;
        for (m, p) in models.iter().zip(ens.iter().chain(std::iter::once(&dp))) {
            let mut ck = Checkpoint::new(serde_json::json!({ "unet": m.config }));
            m.export_into("seg.", &mut ck);
            ck.write(p)?;
            artifacts.push(p.clone());
        }
        Ok((vec![self.path(DATA_MANIFEST)], artifacts))
    }

    fn load_seg(&self) -> CliResult<(Vec<UNet>, UNet)> {
        let (ens, dp) = self.seg_paths();
        let load = |p: &Path| -> CliResult<UNet> {
            need(p)?;
            let ck = Checkpoint::read(p)?;
            let cfg: UNetConfig = serde_json::from_value(ck.config["unet"].clone())?;
            Ok(UNet::import_from(&cfg, "seg.", &ck)?)
        };
        Ok((ens.iter().map(|p| load(p)).collect::<CliResult<_>>()?, load(&dp)?))
    }

    /// Test phantoms (normal and every corruption) used for lesion analysis.
    fn seg_eval_entries(&self) -> CliResult<Vec<ManifestEntry>> {
        let data = self.data_manifest()?;
        let cor = self.corrupt_manifest()?;
        let ids: Vec<String> = data.split("test").take(self.config.seg.eval_count).map(|e| e.id.clone()).collect();
        let mut out: Vec<ManifestEntry> = data.split("test").take(self.config.seg.eval_count).cloned().collect();
        for e in &cor.entries {
            if ids.iter().any(|id| e.id.starts_with(&format!("{id}__"))) {
                out.push(e.clone());
            }
        }
        Ok(out)
    }

    fn seg_uncertainty(&mut self) -> CliResult<(Vec<PathBuf>, Vec<PathBuf>)> {
        let (ens, dropnet) = self.load_seg()?;
        let s = &self.config.seg;
        let entries = self.seg_eval_entries()?;
        let base = seed::derive(self.config.seed, "mc-dropout");
        let rows: Vec<Vec<LesionRow>> = entries
            .par_iter()
            .enumerate()
            .map(|(vi, e)| {
                let (v, gt) = self.load_entry(e)?;
                let mut out = Vec::new();
                for method in Method::ALL {
                    let ps = match method {
                        Method::SingleSoftmax => seg::predict_set(&ens[..1], &v, method, 1, 0)?,
                        Method::Ensemble => seg::predict_set(&ens, &v, method, 1, 0)?,
                        Method::Dropout => seg::predict_set(
                            std::slice::from_ref(&dropnet),
                            &v,
                            method,
                            s.dropout_passes,
                            seed::derive_index(base, vi as u64),
                        )?,
                    };
                    let cert = seg::voxel_certainty(&ps, s.certainty);
                    let les = seg::lesion_extract(&ps, s.threshold, s.connectivity);
                    let scores = seg::lesion_scores(&les, &cert)?;
                    let tf = seg::tp_fp_label(&les, &gt)?;
                    for (k, (l, sc)) in les.lesions.iter().zip(&scores).enumerate() {
                        out.push(LesionRow {
                            volume_id: e.id.clone(),
                            lesion_id: k,
                            voxels: l.len(),
                            score: *sc,
                            tp_fp: if tf.true_positive[k] { "TP".into() } else { "FP".into() },
                            method: method.name().into(),
                            corruption_class: e.class.clone(),
                        });
                    }
                    if les.lesions.is_empty() {
                        // keeps the volume visible to FP-count consumers
                        out.push(LesionRow {
                            volume_id: e.id.clone(),
                            lesion_id: usize::MAX,
                            voxels: 0,
                            score: f64::NAN,
                            tp_fp: "none".into(),
                            method: method.name().into(),
                            corruption_class: e.class.clone(),
                        });
                    }
                }
                Ok(out)
            })
            .collect::<CliResult<_>>()?;
        let p = self.path(LESIONS);
        fs::create_dir_all(p.parent().unwrap())?;
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&p).map_err(csv_err)?;
        for r in rows.iter().flatten().filter(|r| r.lesion_id != usize::MAX) {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        drop(w);
        let vp = self.path("lesions/volumes.json");
        let vols: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        write_json(&vp, &vols)?;
        let (mut inputs, dp) = self.seg_paths();
        inputs.push(dp);
        Ok((inputs, vec![p, vp]))
    }

    pub fn lesions(&self) -> CliResult<Vec<LesionRow>> {
        let p = self.path(LESIONS);
        need(&p)?;
        let mut r = csv::Reader::from_path(&p).map_err(csv_err)?;
        r.deserialize().map(|x| x.map_err(csv_err)).collect()
    }

    fn eval_ood(&mut self) -> CliResult<(Vec<PathBuf>, Vec<PathBuf>)> {
        let scores = self.scores()?;
        let order = class_order();
        let mut ll: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut mse: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &scores {
            ll.entry(s.class.clone()).or_default().push(s.total_loglik);
            // negated so that higher means more normal, like the likelihood
            mse.entry(s.class.clone()).or_default().push(-s.recon_mse);
        }
        let dir = self.path(REPORTS);
        let mut artifacts = Vec::new();
        let t = OodTable {
            score: "log_likelihood".into(),
            rows: eval::summarize(&ll, NORMAL_CLASS, &order)?,
        };
        artifacts.extend(eval::export_report(&Report::OodTable(t), &dir, "ood_table")?);
        let t = OodTable {
            score: "negative_recon_mse".into(),
            rows: eval::summarize(&mse, NORMAL_CLASS, &order)?,
        };
        artifacts.extend(eval::export_report(&Report::OodTable(t), &dir, "mse_table")?);
        let h = Histogram::build(&ll, self.config.histogram_bins)?;
        artifacts.extend(eval::export_report(&Report::Histogram(h), &dir, "histogram")?);

        let chunks: Vec<SlabRow> = scores
            .iter()
            .filter_map(|s| {
                Some(SlabRow {
                    volume_id: s.volume_id.clone(),
                    class: s.class.clone(),
                    mean_inside: s.slab_inside?,
                    mean_outside: s.slab_outside?,
                })
            })
            .collect();
        let below = chunks.iter().filter(|c| c.mean_inside < c.mean_outside).count();
        let sp = dir.join("spatial_chunks.json");
        write_json(
            &sp,
            &serde_json::json!({
                "schema_version": 1,
                "volumes": chunks.len(),
                "inside_below_outside": below,
                "rows": chunks,
            }),
        )?;
        artifacts.push(sp);

        let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for s in &scores {
            let e = acc.entry(s.class.clone()).or_default();
            e.0 += s.accept as usize;
            e.1 += 1;
        }
        let ap = dir.join("acceptance_rates.json");
        let rates: BTreeMap<String, f64> = acc.into_iter().map(|(k, (a, n))| (k, a as f64 / n as f64)).collect();
        write_json(&ap, &serde_json::json!({"schema_version": 1, "accept_rate": rates}))?;
        artifacts.push(ap);
        Ok((vec![self.path(SCORES)], artifacts))
    }

    fn eval_ablation(&mut self) -> CliResult<(Vec<PathBuf>, Vec<PathBuf>)> {
        let cfg = self.config.clone();
        let a = &cfg.ablation;
        let data = self.data_manifest()?;
        let cor = self.corrupt_manifest()?;
        let train: Vec<Volume> = self.load_split(&data, "train", a.train_count)?.into_iter().map(|x| x.2).collect();
        let mut eval_set = self.load_split(&data, "test", usize::MAX)?;
        eval_set.extend(self.load_split(&cor, "corrupt", usize::MAX)?);
        let classes: Vec<String> = corrupt::class_labels();
        let mut scores: BTreeMap<(String, String), ScoreSet> = BTreeMap::new();
        for (mi, name) in a.configs.iter().enumerate() {
            log::info!("ablation {name}");
            let mut cc = CodecConfig::ablation(name)?;
            cc.batch_size = cfg.codec.batch_size;
            cc.lr = cfg.codec.lr;
            cc.codebook = cfg.codec.codebook;
            let s = seed::derive_index(seed::derive(cfg.seed, "ablation"), mi as u64);
            let (codec, _) = codec::train_codec(&train, &cc, a.codec_epochs, s)?;
            let enc = |v: &Volume| -> CliResult<TokenSequence> {
                let q = codec.encode_indices(v)?;
                Ok(density::flatten(&q, codec.codebook.size())?)
            };
            let train_seqs: Vec<TokenSequence> = train.par_iter().map(enc).collect::<CliResult<_>>()?;
            let mut dcfg = cfg.density.clone();
            dcfg.seed = seed::derive(s, "density");
            let len = train_seqs[0].len();
            let mut dm = DensityModel::new(&dcfg, codec.codebook.size(), len)?;
            density::train_density(&mut dm, &train_seqs, &[], a.density_epochs, dcfg.seed)?;
            let lls: Vec<(String, String, f64)> = eval_set
                .par_iter()
                .map(|(id, class, v, _)| {
                    let sq = enc(v)?;
                    Ok((id.clone(), class.clone(), dm.log_likelihood(&sq)?.total))
                })
                .collect::<CliResult<_>>()?;
            for c in &classes {
                let mut set = ScoreSet::default();
                for (id, class, ll) in &lls {
                    if class == NORMAL_CLASS {
                        set.push(*ll, Label::Positive, class, id);
                    } else if class == c {
                        set.push(*ll, Label::Negative, class, id);
                    }
                }
                scores.insert((name.clone(), c.clone()), set);
            }
        }
        let table = AblationTable::build(
            &a.configs,
            &classes,
            &scores,
            cfg.bootstrap_reps,
            eval::DEFAULT_ALPHA,
            seed::derive(cfg.seed, "bootstrap"),
        )?;
        let out = eval::export_report(&Report::AblationTable(table), &self.path(REPORTS), "ablation_table")?;
        Ok((vec![self.path(DATA_MANIFEST), self.path(CORRUPT_MANIFEST)], out))
    }

    fn report(&mut self) -> CliResult<(Vec<PathBuf>, Vec<PathBuf>)> {
        let lesions = self.lesions()?;
        let scores = self.scores()?;
        let vols: Vec<String> = serde_json::from_slice(&fs::read(self.path("lesions/volumes.json"))?)?;
        let mut rows = Vec::new();
        let mut order = vec!["all".to_string()];
        order.extend(class_order());
        for method in Method::ALL {
            for class in &order {
                let pick: Vec<&LesionRow> = lesions
                    .iter()
                    .filter(|r| r.method == method.name() && (class == "all" || &r.corruption_class == class))
                    .collect();
                if class != "all" && !vols.iter().any(|v| class_of(v) == class.as_str()) {
                    continue;
                }
                let tp: Vec<f64> = pick.iter().filter(|r| r.tp_fp == "TP").map(|r| r.score).collect();
                let fp: Vec<f64> = pick.iter().filter(|r| r.tp_fp == "FP").map(|r| r.score).collect();
                rows.push(LesionAucRow {
                    method: method.name().into(),
                    class: class.clone(),
                    auc: eval::auc_of(&tp, &fp).ok().map(|r| r.auc),
                    true_positives: tp.len(),
                    false_positives: fp.len(),
                });
            }
        }
        let dir = self.path(REPORTS);
        let mut artifacts = eval::export_report(&Report::LesionAucTable { rows }, &dir, "lesion_auc_table")?;
        let ll: BTreeMap<&str, f64> = scores.iter().map(|s| (s.volume_id.as_str(), s.total_loglik)).collect();
        let mut missing = Vec::new();
        let scatter: Vec<ScatterRow> = vols
            .iter()
            .filter_map(|v| match ll.get(v.as_str()) {
                Some(&l) => Some(ScatterRow {
                    volume_id: v.clone(),
                    log_likelihood: l,
                    false_positives: lesions
                        .iter()
                        .filter(|r| &r.volume_id == v && r.method == Method::Dropout.name() && r.tp_fp == "FP")
                        .count(),
                }),
                None => {
                    missing.push(v.clone());
                    None
                }
            })
            .collect();
        if !missing.is_empty() {
            return Err(CliError::MissingInput(format!("scores for {}", missing.join(", "))));
        }
        artifacts.extend(eval::export_report(&Report::Scatter { rows: scatter }, &dir, "scatter")?);

        // index of every report file with its hash
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().map(|n| n != "summary.json").unwrap_or(false))
            .collect();
        files.sort();
        let index: BTreeMap<String, String> = files
            .iter()
            .map(|p| {
                Ok((
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    crate::manifest::sha256_file(p)?,
                ))
            })
            .collect::<CliResult<_>>()?;
        let sp = dir.join("summary.json");
        write_json(&sp, &serde_json::json!({"schema_version": 1, "reports": index}))?;
        artifacts.push(sp);
        Ok((vec![self.path(LESIONS), self.path(SCORES)], artifacts))
    }
}

fn save_volume(v: &Volume, p: &Path) -> CliResult<()> {
    fs::create_dir_all(p.parent().unwrap())?;
    Ok(vox_core::volume::write_volume(v, p)?)
}

fn save_mask(m: &LabelMask, p: &Path) -> CliResult<()> {
    fs::create_dir_all(p.parent().unwrap())?;
    Ok(vox_core::volume::write_mask(m, p)?)
}

fn class_of(id: &str) -> &str {
    id.split_once("__").map(|x| x.1).unwrap_or(NORMAL_CLASS)
}

/// Normal first, then the corruption suite order.
pub fn class_order() -> Vec<String> {
    let mut v = vec![NORMAL_CLASS.to_string()];
    v.extend(corrupt::class_labels());
    v
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Other(format!("csv: {e}"))
}

pub fn write_json<T: Serialize + ?Sized>(p: &Path, v: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    write_atomic(p, &bytes)
}

/// Linear-interpolated percentile (`q` in 0..=100).
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Mean map value inside and outside the z slab `[lo, hi)`.
pub fn slab_means(map: &Volume, lo: usize, hi: usize) -> (f64, f64) {
    let d = map.dims();
    let plane = d[0] * d[1];
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (i, &x) in map.voxels().iter().enumerate() {
        let z = i / plane;
        if (lo..hi).contains(&z) {
            si += x as f64;
            ni += 1;
        } else {
            so += x as f64;
            no += 1;
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}

pub fn load_density(c: &Checkpoint) -> CliResult<DensityModel> {
    let cfg: PerformerConfig = serde_json::from_value(c.config["density"].clone())?;
    let k = c.config["codebook_size"]
        .as_u64()
        .ok_or_else(|| CliError::Other("checkpoint lacks codebook_size".into()))? as usize;
    let len = c.config["max_len"]
        .as_u64()
        .ok_or_else(|| CliError::Other("checkpoint lacks max_len".into()))? as usize;
    Ok(DensityModel::import_from(&cfg, k, len, "density.", c)?)
}

/// Codec, density model and threshold from a bundled checkpoint.
pub struct OodModel {
    pub codec: CodecModel,
    pub density: DensityModel,
    pub threshold: f64,
}

impl OodModel {
    pub fn load(path: &Path) -> CliResult<Self> {
        need(path)?;
        let c = Checkpoint::read(path)?;
        let cfg: CodecConfig = serde_json::from_value(c.config["codec"].clone())?;
        Ok(OodModel {
            codec: CodecModel::import_from(&cfg, "codec.", &c)?,
            density: load_density(&c)?,
            threshold: c.config["threshold"].as_f64().unwrap_or(f64::NEG_INFINITY),
        })
    }

    pub fn score(&self, v: &Volume) -> CliResult<serde_json::Value> {
        let q = self.codec.encode_indices(v)?;
        let s = density::flatten(&q, self.codec.codebook.size())?;
        let ll = self.density.log_likelihood(&s)?;
        Ok(serde_json::json!({
            "total_loglik": ll.total,
            "threshold": self.threshold,
            "accept": ll.total >= self.threshold,
            "tokens": ll.per_token.len(),
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub id: String,
    pub class: String,
    pub split: String,
    pub dims: [usize; 3],
    pub indices: Vec<usize>,
}

impl TokenRecord {
    pub fn sequence(&self, k: usize) -> CliResult<TokenSequence> {
        let q = QuantizedGrid {
            dims: self.dims,
            indices: self.indices.clone(),
            vectors: Vec::new(),
            dim: 0,
            distances: Vec::new(),
        };
        Ok(density::flatten(&q, k)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenFile {
    pub codebook_size: usize,
    pub rows: Vec<TokenRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub volume_id: String,
    pub class: String,
    pub split: String,
    pub total_loglik: f64,
    pub recon_mse: f64,
    pub accept: bool,
    pub per_token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slab_inside: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slab_outside: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlabRow {
    pub volume_id: String,
    pub class: String,
    pub mean_inside: f64,
    pub mean_outside: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRow {
    pub volume_id: String,
    pub lesion_id: usize,
    pub voxels: usize,
    pub score: f64,
    pub tp_fp: String,
    pub method: String,
    pub corruption_class: String,
}
