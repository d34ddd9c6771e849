use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::loss::{batch_loss_and_grads, draw_conditional, draw_masked, Example};
use super::mask::{sample_mask, MaskSpec};
use super::optimizer::{AdamW, AdamWConfig};
use crate::autodiff::Rng;
use crate::diffusion::NoiseSchedule;
use crate::dit::{graft_cross_attention, Checkpoint, DitModel, ModelConfig};
use crate::parallel::Exec;
use crate::{Error, Result};

pub const LOSS_CSV_HEADER: &str = "step,loss,lr,stage";

fn default_text_drop() -> f64 {
    0.1
}

/// Settings of one training stage.
///
/// Stage 1 always trains with span masks (a full mask with probability
/// `full_mask_prob`). Stages 2 and 3 use the full-sequence loss unless
/// `masking` is set, in which case they mask like stage 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub full_mask_prob: f64,
    #[serde(default)]
    pub masking: bool,
    #[serde(default = "default_text_drop")]
    pub text_drop_prob: f64,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Checkpoint of the previous stage (stages 2 and 3).
    #[serde(default)]
    pub resume: Option<PathBuf>,
    /// Also write a checkpoint every this many steps.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl StageConfig {
    /// Defaults for `stage` with the given budget.
    pub fn new(stage: u8, steps: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            stage,
            steps,
            batch_size,
            learning_rate,
            full_mask_prob: match stage {
                1 => 0.1,
                2 => 0.2,
                _ => 0.0,
            },
            masking: false,
            text_drop_prob: 0.1,
            mask: MaskSpec::default(),
            optimizer: AdamWConfig::default(),
            seed,
            resume: None,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, p) in [("full_mask_prob", self.full_mask_prob), ("text_drop_prob", self.text_drop_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.mask.validate()
    }

    fn masks(&self) -> bool {
        self.stage == 1 || self.masking
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub stage: u8,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DitModel,
    pub losses: Vec<LossRecord>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Builds the starting model of a stage.
///
/// Stage 1 starts fresh without cross-attention. Stage 2 grafts
/// cross-attention onto a stage-1 checkpoint. Stage 3 continues a stage-2
/// checkpoint.
pub fn prepare_stage_model(
    stage: u8,
    config: &ModelConfig,
    resume: Option<Checkpoint>,
    rng: &mut Rng,
) -> Result<DitModel> {
    let resumed_stage = |c: &Checkpoint| c.metadata.get("stage").and_then(|v| v.as_u64());
    match (stage, resume) {
        (1, None) => {
            let mut cfg = config.clone();
            cfg.cross_attention = false;
            DitModel::new(cfg, rng)
        }
        (1, Some(_)) => Err(Error::Config("stage 1 trains from scratch and takes no resume checkpoint".into())),
        (2 | 3, None) => Err(Error::Config(format!(
            "stage {stage} needs the stage-{} checkpoint to resume from",
            stage - 1
        ))),
        (s @ (2 | 3), Some(ckpt)) => {
            let found = resumed_stage(&ckpt);
            if found != Some(u64::from(s - 1)) {
                return Err(Error::Config(format!(
                    "stage {s} resumes from a stage-{} checkpoint, found stage {found:?}",
                    s - 1
                )));
            }
            let model = DitModel::from_checkpoint(ckpt)?;
            if s == 2 {
                graft_cross_attention(&model, rng)
            } else {
                Ok(model)
            }
        }
        (s, _) => Err(Error::Config(format!("stage must be 1, 2 or 3, got {s}"))),
    }
}

fn draw_batch(cfg: &StageConfig, schedule: &NoiseSchedule, data: &Dataset, rng: &mut Rng) -> Result<Vec<Example>> {
    (0..cfg.batch_size)
        .map(|_| {
            let (x0, class) = &data.items[rng.below(data.len())];
            let frames = x0.shape()[1];
            let mask = if !cfg.masks() {
                None
            } else if rng.bernoulli(cfg.full_mask_prob) {
                Some(vec![true; frames])
            } else {
                Some(sample_mask(frames, &cfg.mask, rng)?)
            };
            if cfg.stage == 1 {
                draw_masked(schedule, x0, mask.expect("stage 1 masks"), rng)
            } else {
                draw_conditional(schedule, x0, &[*class], cfg.text_drop_prob, mask, rng)
            }
        })
        .collect()
}

/// Writes the loss curve as CSV with header [`LOSS_CSV_HEADER`].
pub fn write_loss_csv<W: Write>(mut w: W, losses: &[LossRecord]) -> Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for r in losses {
        writeln!(w, "{},{},{},{}", r.step, r.loss, r.lr, r.stage)?;
    }
    w.flush()?;
    Ok(())
}

fn save_stage(model: &DitModel, stage: u8, path: &Path) -> Result<()> {
    let mut ckpt = model.to_checkpoint()?;
    ckpt.metadata.insert("stage".into(), serde_json::json!(stage));
    crate::dit::save_checkpoint(path, &ckpt)
}

/// Runs one stage from `model`.
///
/// Logs the batch loss of every step. With `out_dir` set, writes
/// `stage{n}.ezdt` and `loss_stage{n}.csv` there. Deterministic given the
/// config seed, independent of `exec`.
pub fn train_stage(
    cfg: &StageConfig,
    mut model: DitModel,
    schedule: &NoiseSchedule,
    data: &Dataset,
    exec: Exec,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.stage > 1 && !model.config.cross_attention {
        return Err(Error::Config(format!("stage {} needs a model with cross-attention", cfg.stage)));
    }
    let ckpt_path = out_dir.map(|d| d.join(format!("stage{}.ezdt", cfg.stage)));
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut rng = Rng::new(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = draw_batch(cfg, schedule, data, &mut rng)?;
        let (loss, grads) = batch_loss_and_grads(&model, schedule, &batch, exec)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                last_checkpoint: last_checkpoint.map_or_else(|| "none".into(), |p| p.display().to_string()),
            });
        }
        opt.step(&mut model.params, &grads, cfg.learning_rate)?;
        losses.push(LossRecord {
            step,
            loss,
            lr: cfg.learning_rate,
            stage: cfg.stage,
        });
        if let (Some(every), Some(path)) = (cfg.checkpoint_every, &ckpt_path) {
            if (step + 1) % every == 0 {
                save_stage(&model, cfg.stage, path)?;
                last_checkpoint = Some(path.clone());
            }
        }
    }

    if let (Some(dir), Some(path)) = (out_dir, &ckpt_path) {
        save_stage(&model, cfg.stage, path)?;
        let csv = std::fs::File::create(dir.join(format!("loss_stage{}.csv", cfg.stage)))?;
        write_loss_csv(std::io::BufWriter::new(csv), &losses)?;
    }
    Ok(TrainOutcome {
        model,
        losses,
        checkpoint: ckpt_path,
    })
}
