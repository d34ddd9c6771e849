//! Experiment configuration: one JSON document drives every command.

use std::path::{Path, PathBuf};

use ezdit_core::diffusion::{make_schedule, BaseSchedule, GuidanceConfig, NoiseSchedule};
use ezdit_core::dit::{ModelConfig, Scale, Variant};
use ezdit_core::training::{EvalPlan, StageConfig, SyntheticSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// A named preset (`"ezaudio_dit"`, `"dit-l/cross_dit"`, ...) or a full model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Preset(String),
    Custom(ModelConfig),
}

impl ModelChoice {
    pub fn preset_names() -> Vec<String> {
        let mut names = Vec::new();
        for scale in [Scale::Toy, Scale::DitL, Scale::DitXl] {
            for v in Variant::ALL {
                names.push(if scale == Scale::Toy {
                    v.name().to_string()
                } else {
                    format!("{}/{}", scale.name(), v.name())
                });
            }
        }
        names
    }

    pub fn resolve(&self) -> Result<ModelConfig, CliError> {
        match self {
            ModelChoice::Custom(c) => Ok(c.clone()),
            ModelChoice::Preset(name) => {
                let (scale, variant) = match name.split_once('/') {
                    Some((s, v)) => (s.parse::<Scale>().ok(), v),
                    None => (Some(Scale::Toy), name.as_str()),
                };
                match (scale, variant.parse::<Variant>()) {
                    (Some(s), Ok(v)) => Ok(v.apply(&s.config())),
                    _ => Err(CliError::Usage(format!(
                        "unknown model preset `{name}`, expected one of {}",
                        Self::preset_names().join(", ")
                    ))),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub base: BaseSchedule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            base: BaseSchedule::ScaledLinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub w: f64,
    pub phi: f64,
    pub seed: u64,
    /// Text tokens; empty samples unconditionally.
    pub text: Vec<usize>,
    /// Sample `i` uses seed `seed + i`.
    pub num_samples: usize,
    /// Defaults to the newest text-conditioned stage checkpoint in the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            w: 3.0,
            phi: 0.0,
            seed: 0,
            text: Vec::new(),
            num_samples: 1,
            checkpoint: None,
        }
    }
}

impl SamplerConfig {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig::new(self.w, self.phi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Stages {
    /// Desk-scale budgets, sized so each stage finishes in a few minutes on one core.
    pub fn toy() -> Self {
        Self {
            stage1: StageConfig::new(1, 1500, 8, 2e-3, 7),
            stage2: StageConfig::new(2, 600, 8, 1e-3, 8),
            stage3: StageConfig::new(3, 300, 8, 2e-4, 9),
        }
    }

    /// Full-scale ladder: 100K / 50K / 30K steps at batch 128.
    pub fn full_scale() -> Self {
        Self {
            stage1: StageConfig::new(1, 100_000, 128, 1e-4, 7),
            stage2: StageConfig::new(2, 50_000, 128, 5e-5, 8),
            stage3: StageConfig::new(3, 30_000, 128, 1e-5, 9),
        }
    }

    pub fn get(&self, stage: u8) -> Option<&StageConfig> {
        match stage {
            1 => Some(&self.stage1),
            2 => Some(&self.stage2),
            3 => Some(&self.stage3),
            _ => None,
        }
    }

    pub fn get_mut(&mut self, stage: u8) -> Option<&mut StageConfig> {
        match stage {
            1 => Some(&mut self.stage1),
            2 => Some(&mut self.stage2),
            3 => Some(&mut self.stage3),
            _ => None,
        }
    }
}

impl Default for Stages {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantsConfig {
    pub scale: Scale,
    /// Memory-estimate workload.
    pub batch: usize,
    pub frames: usize,
    pub text_len: usize,
    /// `--train-toy` budget per variant (stage-1 masked training at toy scale).
    pub train_steps: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub train_seed: u64,
}

impl Default for VariantsConfig {
    fn default() -> Self {
        Self {
            scale: Scale::DitL,
            batch: 16,
            frames: 500,
            text_len: 32,
            train_steps: 300,
            train_batch: 8,
            train_lr: 2e-3,
            train_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ws: Vec<f64>,
    pub phis: Vec<f64>,
    pub num_samples: usize,
    pub steps: usize,
    pub base_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ws: (1..=7).map(f64::from).collect(),
            phis: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            num_samples: 64,
            steps: 25,
            base_seed: 1000,
            checkpoint: None,
        }
    }
}

impl SweepConfig {
    pub fn plan(&self) -> EvalPlan {
        EvalPlan {
            steps: self.steps,
            num_samples: self.num_samples,
            base_seed: self.base_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub threshold: f64,
    /// `mock` or `file:PATH`.
    pub scorer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            threshold: 0.40,
            scorer: "mock".into(),
            manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelChoice,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub stages: Stages,
    pub dataset: SyntheticSpec,
    /// Seed of the synthetic train/test split.
    pub data_seed: u64,
    pub variants: VariantsConfig,
    pub sweep: SweepConfig,
    pub filter: FilterConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelChoice::Preset("ezaudio_dit".into()),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            stages: Stages::toy(),
            dataset: SyntheticSpec::default(),
            data_seed: 0,
            variants: VariantsConfig::default(),
            sweep: SweepConfig::default(),
            filter: FilterConfig::default(),
            output_dir: PathBuf::from("runs/toy"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = self.model.resolve()?;
        m.validate()?;
        Ok(m)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(make_schedule(self.schedule.timesteps, self.schedule.base)?)
    }

    /// Cross-section consistency that the individual sections cannot check.
    pub fn validate(&self) -> Result<(), CliError> {
        let m = self.model_config()?;
        self.dataset.validate()?;
        if m.latent_channels != self.dataset.latent_channels {
            return Err(CliError::Usage(format!(
                "model has {} latent channels but the dataset has {}",
                m.latent_channels, self.dataset.latent_channels
            )));
        }
        if m.text_vocab != self.dataset.num_classes + 1 {
            return Err(CliError::Usage(format!(
                "text_vocab must be num_classes + 1 (one token per class plus the null token), got {} for {} classes",
                m.text_vocab, self.dataset.num_classes
            )));
        }
        if self.schedule.timesteps < 2 {
            return Err(CliError::Usage("schedule.timesteps must be at least 2".into()));
        }
        for s in 1..=3u8 {
            let st = self.stages.get(s).expect("stage exists");
            if st.stage != s {
                return Err(CliError::Usage(format!("stages.stage{s}.stage must be {s}, got {}", st.stage)));
            }
            st.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_toy_preset() {
        let c: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
        assert_eq!(c.sampler.steps, 50);
        assert_eq!(c.sampler.w, 3.0);
        assert_eq!(c.sampler.phi, 0.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"modle": "ezaudio_dit"}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sampler": {"stps": 3}}"#).is_err());
    }

    #[test]
    fn presets_resolve_and_bad_names_list_options() {
        let m = ModelChoice::Preset("dit-l/pixelart_dit".into()).resolve().unwrap();
        assert_eq!(m.width, 1024);
        match ModelChoice::Preset("big".into()).resolve() {
            Err(CliError::Usage(msg)) => assert!(msg.contains("dit-xl/ezaudio_dit")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
