//! Run configuration: a JSON document layered over a named preset.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vox_core::codec::CodecConfig;
use vox_core::density::PerformerConfig;
use vox_core::seg::{CertaintyFormula, Connectivity, UNetConfig};
use vox_core::volume::PhantomSpec;

use crate::error::{CliError, CliResult};

pub const PRESETS: [&str; 2] = ["toy", "paper-shape"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub phantom: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegStageConfig {
    pub unet: UNetConfig,
    pub epochs: usize,
    /// Training phantoms used for segmentation (taken from the train split).
    pub train_count: usize,
    /// Test phantoms per class evaluated for lesion uncertainty.
    pub eval_count: usize,
    pub ensemble_size: usize,
    pub dropout: f64,
    pub dropout_passes: usize,
    pub certainty: CertaintyFormula,
    pub connectivity: Connectivity,
    pub threshold: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Codec configs by ablation name; the first is the baseline.
    pub configs: Vec<String>,
    pub train_count: usize,
    pub codec_epochs: usize,
    pub density_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub preset: String,
    pub seed: u64,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub codec_epochs: usize,
    pub density: PerformerConfig,
    pub density_epochs: usize,
    pub seg: SegStageConfig,
    pub ablation: AblationConfig,
    /// Percentile of training log-likelihoods below which a volume is rejected.
    pub threshold_percentile: f64,
    pub bootstrap_reps: usize,
    pub histogram_bins: usize,
}

impl RunConfig {
    pub fn preset(name: &str) -> CliResult<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper-shape" => Ok(Self::paper_shape()),
            other => Err(CliError::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn toy() -> Self {
        RunConfig {
            name: "toy".into(),
            preset: "toy".into(),
            seed: 0,
            data: DataConfig {
                train_count: 512,
                test_count: 64,
                phantom: PhantomSpec::default(),
            },
            codec: CodecConfig::toy(),
            codec_epochs: 20,
            density: PerformerConfig::toy(),
            density_epochs: 30,
            seg: SegStageConfig {
                unet: UNetConfig::toy(),
                epochs: 10,
                train_count: 64,
                eval_count: 4,
                ensemble_size: 5,
                dropout: 0.5,
                dropout_passes: 5,
                certainty: CertaintyFormula::MeanEntropy,
                connectivity: Connectivity::TwentySix,
                threshold: 0.5,
            },
            ablation: AblationConfig {
                configs: vec!["3-layer MSE no-GAN".into(), "3-layer Spectral GAN".into()],
                train_count: 128,
                codec_epochs: 10,
                density_epochs: 15,
            },
            threshold_percentile: 5.0,
            bootstrap_reps: 1000,
            histogram_bins: 30,
        }
    }

    /// Full-size shapes; far beyond a desk run but kept for structure.
    pub fn paper_shape() -> Self {
        let toy = Self::toy();
        RunConfig {
            name: "paper-shape".into(),
            preset: "paper-shape".into(),
            data: DataConfig {
                phantom: PhantomSpec {
                    grid: [176, 208, 176],
                    ..PhantomSpec::default()
                },
                ..toy.data
            },
            codec: CodecConfig::paper_shape(),
            density: PerformerConfig::paper_shape(),
            seg: SegStageConfig {
                unet: UNetConfig::paper_shape(),
                ..toy.seg
            },
            ablation: AblationConfig {
                configs: CodecConfig::ablation_grid().iter().map(|c| c.ablation_name()).collect(),
                ..toy.ablation
            },
            ..toy
        }
    }

    /// Parse a config document. A `preset` key selects the base config and
    /// every other key overrides it, recursively for objects.
    pub fn from_json(doc: &Value) -> CliResult<Self> {
        let obj = doc
            .as_object()
            .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
        let preset = match obj.get("preset") {
            None => "toy",
            Some(Value::String(s)) => s.as_str(),
            Some(_) => return Err(CliError::Config("preset must be a string".into())),
        };
        let mut base = serde_json::to_value(Self::preset(preset)?).expect("config serializes");
        merge(&mut base, doc);
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
        let doc: Value = serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&doc)
    }

    pub fn validate(&self) -> CliResult<()> {
        let c = |e: vox_core::Error| CliError::Config(e.to_string());
        self.data.phantom.validate().map_err(c)?;
        self.codec.validate().map_err(c)?;
        self.codec.latent_dims(self.data.phantom.grid).map_err(c)?;
        self.density.validate().map_err(c)?;
        self.seg.unet.validate().map_err(c)?;
        if self.data.train_count == 0 || self.data.test_count == 0 {
            return Err(CliError::Config("train and test counts must be positive".into()));
        }
        if self.seg.train_count > self.data.train_count || self.seg.eval_count > self.data.test_count {
            return Err(CliError::Config("segmentation counts exceed the dataset".into()));
        }
        if self.ablation.train_count > self.data.train_count {
            return Err(CliError::Config("ablation train count exceeds the dataset".into()));
        }
        if self.seg.ensemble_size < 2 || self.seg.dropout_passes < 2 {
            return Err(CliError::Config("ensemble size and dropout passes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.seg.dropout) {
            return Err(CliError::Config("segmentation dropout must lie in [0, 1)".into()));
        }
        if !(0.0..=100.0).contains(&self.threshold_percentile) {
            return Err(CliError::Config("threshold percentile must lie in [0, 100]".into()));
        }
        if self.bootstrap_reps == 0 || self.histogram_bins == 0 {
            return Err(CliError::Config("bootstrap reps and histogram bins must be positive".into()));
        }
        for name in &self.ablation.configs {
            CodecConfig::ablation(name).map_err(c)?;
        }
        Ok(())
    }

    pub fn latent_dims(&self) -> [usize; 3] {
        self.codec.latent_dims(self.data.phantom.grid).expect("validated")
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            RunConfig::preset(p).unwrap().validate().unwrap();
        }
        assert_eq!(RunConfig::paper_shape().latent_dims(), [11, 13, 11]);
    }

    #[test]
    fn overrides_merge_into_preset() {
        let c = RunConfig::from_json(&json!({"preset": "toy", "seed": 7, "data": {"train_count": 200}})).unwrap();
        assert_eq!((c.seed, c.data.train_count, c.data.test_count), (7, 200, 64));
        assert!(matches!(
            RunConfig::from_json(&json!({"bogus": 1})),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(&json!({"preset": "huge"})),
            Err(CliError::Config(_))
        ));
    }
}
