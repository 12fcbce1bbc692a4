//! Experiment configuration: one TOML file, unknown keys rejected.

use std::path::{Path, PathBuf};

use mome_core::backbone::{AdapterSpec, ModelConfig};
use mome_core::matryoshka::{CompressionMode, RateGrid};
use mome_core::mome::MomeConfig;
use mome_core::objective::ScaleWeights;
use mome_core::synthdata::SynthSpec;
use mome_core::trainer::{Phase, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{self, LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            train: 6400,
            val: 64,
            test: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Source stream lengths `(T_audio, T_video)` for the cost table.
    pub cost_lengths: [usize; 2],
    pub rounding: mome_core::analysis::Rounding,
    /// Test samples used for the similarity alignment counts.
    pub similarity_samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            cost_lengths: [1106, 567],
            rounding: Default::default(),
            similarity_samples: 16,
        }
    }
}

/// Everything one experiment needs.
///
/// `seed` drives parameter initialization and batch order in both phases
/// and overrides the `seed` fields of `[pretrain]` and `[train]`; the data
/// depend on `synth.seed` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub compression: CompressionMode,
    /// Row-major `G × L` loss weights; empty means all ones.
    pub scale_weights: Vec<f64>,
    pub model: ModelConfig,
    pub mome: MomeConfig,
    pub grid: RateGrid,
    pub synth: SynthSpec,
    pub data: DataSizes,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

pub fn default_pretrain() -> TrainConfig {
    TrainConfig {
        phase: Phase::Pretrain,
        epochs: 2,
        batch_size: 8,
        lr_max: 3e-3,
        lr_min: 3e-4,
        warmup_steps: 20,
        ..TrainConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            compression: CompressionMode::Avg,
            scale_weights: vec![1.0, 1.0, 1.5, 2.0],
            model: ModelConfig::default(),
            mome: MomeConfig::default(),
            grid: RateGrid::new(vec![4, 16], vec![2, 5]).expect("valid grid"),
            synth: SynthSpec::default(),
            data: DataSizes::default(),
            pretrain: default_pretrain(),
            train: TrainConfig {
                epochs: 2,
                lr_max: 3e-3,
                ..TrainConfig::default()
            },
            analysis: AnalysisConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn bad(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

impl ExperimentConfig {
    /// Keys missing from `text` keep the values of [`ExperimentConfig::default`],
    /// table by table.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        let mut merged = toml::Table::try_from(ExperimentConfig::default()).expect("configuration serializes");
        merge(&mut merged, user);
        let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = error::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| bad(format!("{} is not UTF-8", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            LabError::Config(m) => bad(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        error::write(path, self.to_toml().as_bytes())
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| bad(format!("[model] {e}")))?;
        self.mome.validate().map_err(|e| bad(format!("[mome] {e}")))?;
        self.synth
            .validate_for_grid(&self.grid)
            .map_err(|e| bad(format!("[synth] {e}")))?;
        self.scale_weights()?;
        for (name, t, phase) in [
            ("pretrain", &self.pretrain, Phase::Pretrain),
            ("train", &self.train, Phase::Adapters),
        ] {
            t.validate().map_err(|e| bad(format!("[{name}] {e}")))?;
            if t.phase != phase {
                return Err(bad(format!("[{name}] phase must be {phase:?}")));
            }
        }
        let (m, s) = (&self.model, &self.synth);
        if m.vocab_size != s.vocab_size + 3 {
            return Err(bad(format!(
                "model.vocab_size {} must equal synth.vocab_size + 3 = {}",
                m.vocab_size,
                s.vocab_size + 3
            )));
        }
        if m.audio_dim != s.audio_dim || m.video_dim != s.video_dim {
            return Err(bad("model feature dims must match synth feature dims"));
        }
        if m.max_audio_frames < s.max_audio_frames() || m.max_video_frames < s.max_video_frames() {
            return Err(bad(format!(
                "position tables ({}, {}) are shorter than the longest streams ({}, {})",
                m.max_audio_frames,
                m.max_video_frames,
                s.max_audio_frames(),
                s.max_video_frames()
            )));
        }
        if m.max_text_len < s.target_len_range[1] + 3 {
            return Err(bad(format!(
                "model.max_text_len {} cannot hold prompt, {} symbols and the end token",
                m.max_text_len, s.target_len_range[1]
            )));
        }
        let d = &self.data;
        if d.train == 0 || d.val == 0 || d.test == 0 {
            return Err(bad("[data] split sizes must be positive"));
        }
        if self.analysis.similarity_samples == 0 || self.analysis.cost_lengths.contains(&0) {
            return Err(bad("[analysis] sample count and cost lengths must be positive"));
        }
        Ok(())
    }

    pub fn scale_weights(&self) -> Result<ScaleWeights> {
        let (g, l) = (self.grid.audio_rates().len(), self.grid.video_rates().len());
        if self.scale_weights.is_empty() {
            return Ok(ScaleWeights::uniform(g, l));
        }
        ScaleWeights::new(g, l, self.scale_weights.clone()).map_err(|e| bad(format!("scale_weights: {e}")))
    }

    pub fn adapter_spec(&self) -> AdapterSpec {
        AdapterSpec {
            mome: self.mome.clone(),
            grid: self.grid.clone(),
            mode: self.compression,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("seed = 1\n[mome]\ntop_kk = 3\n").unwrap_err();
        assert!(matches!(err, LabError::Config(_)));
        assert!(ExperimentConfig::from_toml("colour = 1\n").is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 4\n[mome]\ntop_k = 1\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.mome.top_k, 1);
        assert_eq!(cfg.mome.n_routed, MomeConfig::default().n_routed);
        let cfg = ExperimentConfig::from_toml("[pretrain]\nepochs = 1\n").unwrap();
        assert_eq!(cfg.pretrain, TrainConfig { epochs: 1, ..default_pretrain() });
    }

    #[test]
    fn inconsistent_sections_fail() {
        assert!(ExperimentConfig::from_toml("[synth]\nvideo_repeat = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("scale_weights = [1.0, 2.0]\n").is_err());
        assert!(ExperimentConfig::from_toml("[grid]\naudio_rates = [4, 2]\nvideo_rates = [1]\n").is_err());
    }
}
