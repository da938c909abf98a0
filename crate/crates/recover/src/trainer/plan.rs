//! Staged training plans: parsing, validation, and the mode-transition rules.

use crate::costvolume::CostVolumeMode;
use crate::datasynth;
use crate::netblocks::ModelConfig;
use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeTransition {
    Keep,
    BeginFade,
    CutOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Name of a dataset recipe from `datasynth::stage_recipes`.
    pub recipe: String,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// (H, W) crop fed to the model.
    pub crop: (usize, usize),
    #[serde(default = "default_transition")]
    pub transition: ModeTransition,
}

fn default_transition() -> ModeTransition {
    ModeTransition::Keep
}

/// Ordered training stages plus the architecture they train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(rename = "stage")]
    pub stages: Vec<StageSpec>,
    /// Supervision decay across refinement iterations.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Warmup as a fraction of each stage's steps.
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    /// Validation cadence in steps (also runs at each stage end).
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    /// Held-out samples per stage recipe.
    #[serde(default = "default_val_samples")]
    pub val_samples: usize,
}

fn default_gamma() -> f64 {
    0.8
}
fn default_warmup_fraction() -> f64 {
    0.05
}
fn default_val_every() -> usize {
    500
}
fn default_val_samples() -> usize {
    64
}

impl StagePlan {
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let plan: StagePlan =
            toml::from_str(text).map_err(|e| TrainError::Plan(format!("parse error: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("plan serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model
            .validate()
            .map_err(|e| TrainError::Plan(format!("model config: {e}")))?;
        if self.stages.is_empty() {
            return Err(TrainError::Plan("plan has no stages".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::Plan("warmup_fraction must be in [0, 1]".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(TrainError::Plan("gamma must be in (0, 1]".into()));
        }
        let transitions: Vec<usize> = self
            .stages
            .iter()
            .enumerate()
            .filter(|(_, s)| s.transition != ModeTransition::Keep)
            .map(|(i, _)| i)
            .collect();
        if transitions.len() > 1 {
            return Err(TrainError::Plan(format!(
                "removal is irreversible: at most one stage may carry begin_fade or cut_off, found {} (stages {:?})",
                transitions.len(),
                transitions
            )));
        }
        match self.model.mode {
            CostVolumeMode::Active => {}
            CostVolumeMode::Removed => {
                if !transitions.is_empty() {
                    return Err(TrainError::Plan(
                        "removal is irreversible: a plan starting in removed mode cannot fade or cut off".into(),
                    ));
                }
            }
            CostVolumeMode::Fading { .. } => {
                return Err(TrainError::Plan(
                    "plans must start in active or removed mode; fading is scheduled by the trainer".into(),
                ));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            let recipe = datasynth::recipe_by_name(&s.recipe)
                .ok_or_else(|| TrainError::Plan(format!("stage {i}: unknown recipe {}", s.recipe)))?;
            if s.steps == 0 {
                return Err(TrainError::Plan(format!("stage {i}: steps must be >= 1")));
            }
            if s.batch_size == 0 {
                return Err(TrainError::Plan(format!("stage {i}: batch_size must be >= 1")));
            }
            if !(s.peak_lr > 0.0) {
                return Err(TrainError::Plan(format!("stage {i}: peak_lr must be > 0")));
            }
            if s.weight_decay < 0.0 {
                return Err(TrainError::Plan(format!("stage {i}: weight_decay must be >= 0")));
            }
            if s.crop.0 % 8 != 0 || s.crop.1 % 8 != 0 {
                return Err(TrainError::Plan(format!(
                    "stage {i}: crop {:?} must be divisible by 8",
                    s.crop
                )));
            }
            if s.crop.0 > recipe.resolution.0 || s.crop.1 > recipe.resolution.1 {
                return Err(TrainError::Plan(format!(
                    "stage {i}: crop {:?} exceeds recipe resolution {:?}",
                    s.crop, recipe.resolution
                )));
            }
        }
        Ok(())
    }

    /// The default four-stage curriculum with the cut-off at stage 3 (index 2).
    pub fn default_plan() -> Self {
        let stage = |recipe: &str, steps: usize, peak_lr: f64, transition: ModeTransition| StageSpec {
            recipe: recipe.into(),
            steps,
            batch_size: 2,
            peak_lr,
            weight_decay: 1e-5,
            crop: (64, 96),
            transition,
        };
        StagePlan {
            model: ModelConfig::default(),
            stages: vec![
                stage("stage1-rigid", 3000, 4e-4, ModeTransition::Keep),
                stage("stage2-affine", 4000, 4e-4, ModeTransition::Keep),
                stage("stage3-deforming", 4000, 3e-4, ModeTransition::CutOff),
                stage("stage4-mixed", 4000, 3e-4, ModeTransition::Keep),
            ],
            gamma: default_gamma(),
            warmup_fraction: default_warmup_fraction(),
            val_every: default_val_every(),
            val_samples: default_val_samples(),
        }
    }
}
