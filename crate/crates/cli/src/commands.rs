//! Argument parsing and dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vox_core::codec::CodecModel;
use vox_core::autodiff::Checkpoint;
use vox_core::density;
use vox_core::volume::read_volume;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{OodModel, Run};

#[derive(Debug, Parser)]
#[command(name = "vox", version, about = "Volumetric OOD detection pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config document, layered over its preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Preset used when no config is given, or to override the config's.
    #[arg(long)]
    pub preset: Option<String>,
    /// Training-likelihood percentile for the accept threshold.
    #[arg(long)]
    pub threshold_percentile: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct Single {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint for single-volume mode.
    #[arg(long, requires = "volume")]
    pub model: Option<PathBuf>,
    /// Volume for single-volume mode.
    #[arg(long, requires = "model")]
    pub volume: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    SynthData(Common),
    Corrupt(Common),
    TrainCodec(Common),
    /// Encode every run volume, or one volume with --model/--volume.
    Encode(Single),
    TrainDensity(Common),
    /// Score every run volume, or one volume with --model/--volume.
    Score(Single),
    SegTrain(Common),
    SegUncertainty(Common),
    EvalOod(Common),
    EvalAblation(Common),
    Report(Common),
    /// Every stage in order, resuming completed ones.
    FullExperiment(Common),
}

impl Common {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut doc = match &self.config {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| CliError::MissingInput(format!("{}: {e}", p.display())))?;
                serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::json!({}),
        };
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
        if let Some(p) = &self.preset {
            obj.insert("preset".into(), p.clone().into());
        }
        if let Some(s) = self.seed {
            obj.insert("seed".into(), s.into());
        }
        if let Some(t) = self.threshold_percentile {
            obj.insert("threshold_percentile".into(), t.into());
        }
        RunConfig::from_json(&doc)
    }

    pub fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new("runs").join(&cfg.name))
    }

    fn open(&self) -> CliResult<Run> {
        let cfg = self.resolve()?;
        let dir = self.out_dir(&cfg);
        Run::open(&dir, cfg)
    }
}

fn stage(c: &Common, name: &str) -> CliResult<()> {
    let mut run = c.open()?;
    run.stage(name)?;
    println!("{}", serde_json::json!({"stage": name, "out": run.dir, "status": "ok"}));
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::SynthData(c) => stage(&c, "synth-data"),
        Command::Corrupt(c) => stage(&c, "corrupt"),
        Command::TrainCodec(c) => stage(&c, "train-codec"),
        Command::Encode(s) => match (&s.model, &s.volume) {
            (Some(m), Some(v)) => {
                let ck = load_ckpt(m)?;
                // accepts a bare codec checkpoint or the scoring bundle
                let codec = if ck.config.get("density").is_some() {
                    OodModel::load(m)?.codec
                } else {
                    CodecModel::from_checkpoint(&ck)?
                };
                let q = codec.encode_indices(&read_volume(v)?)?;
                let seq = density::flatten(&q, codec.codebook.size())?;
                println!(
                    "{}",
                    serde_json::json!({"dims": q.dims, "codebook_size": seq.codebook_size, "tokens": seq.tokens()})
                );
                Ok(())
            }
            _ => stage(&s.common, "encode"),
        },
        Command::TrainDensity(c) => stage(&c, "train-density"),
        Command::Score(s) => match (&s.model, &s.volume) {
            (Some(m), Some(v)) => {
                let model = OodModel::load(m)?;
                let mut line = model.score(&read_volume(v)?)?;
                if let Some(t) = s.common.threshold_percentile {
                    line["note"] = format!("threshold fixed at scoring time; --threshold-percentile {t} ignored").into();
                }
                println!("{line}");
                Ok(())
            }
            _ => stage(&s.common, "score"),
        },
        Command::SegTrain(c) => stage(&c, "seg-train"),
        Command::SegUncertainty(c) => stage(&c, "seg-uncertainty"),
        Command::EvalOod(c) => stage(&c, "eval-ood"),
        Command::EvalAblation(c) => stage(&c, "eval-ablation"),
        Command::Report(c) => stage(&c, "report"),
        Command::FullExperiment(c) => {
            let mut run = c.open()?;
            run.full()?;
            println!("{}", serde_json::json!({"stage": "full-experiment", "out": run.dir, "status": "ok"}));
            Ok(())
        }
    }
}

fn load_ckpt(p: &Path) -> CliResult<Checkpoint> {
    if !p.exists() {
        return Err(CliError::MissingInput(p.display().to_string()));
    }
    Ok(Checkpoint::read(p)?)
}

/// Size the global pool from VOX_THREADS when set.
pub fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("VOX_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("VOX_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(CliError::Usage("VOX_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    Ok(())
}

/// Parse, run and map failures to an exit code with a JSON line on stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::Usage(e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
