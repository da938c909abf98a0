//! Loss computation, optimization schedule, the staged training loop with
//! fade-out/cut-off transitions, and checkpointing.

mod checkpoint;
pub mod loss;
mod optim;
mod plan;
mod schedule;

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint};
pub use loss::{laplace_mixture_loss, sequence_loss, sequence_weights};
pub use optim::AdamW;
pub use plan::{ModeTransition, StagePlan, StageSpec};
pub use schedule::{make_schedule, OneCycle};

use crate::costvolume::CostVolumeMode;
use crate::datasynth::{self, augment, crop_sample, generate, AugmentPolicy, Sample};
use crate::evaluator;
use crate::flowio::FlowField;
use crate::netblocks::Model;
use crate::rng::{derive_seed, rng_from, tag};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::Rng;
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Training sample indices start here; indices below are held out for
/// validation.
pub const TRAIN_INDEX_BASE: u64 = 4096;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("loss has no valid pixels")]
    EmptyValidSet,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint incompatible: {0}")]
    Compatibility(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything needed to continue (or replay) a run.
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    pub global_step: u64,
    pub stage_index: usize,
    /// Root seed; all randomness is derived from it and the step counters.
    pub seed: u64,
}

impl TrainState {
    pub fn new(plan: &StagePlan, seed: u64) -> Result<Self, TrainError> {
        plan.validate()?;
        let model = Model::new(plan.model.clone(), derive_seed(seed, &[tag("init")]))
            .map_err(|e| TrainError::Plan(e.to_string()))?;
        let slots = model.store().slots();
        Ok(TrainState { model, optimizer: AdamW::new(slots), global_step: 0, stage_index: 0, seed })
    }
}

/// One CSV log row: `step,stage,mode,p,lr,loss,val_epe`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub stage: usize,
    pub mode: String,
    pub p: f64,
    pub lr: f64,
    pub loss: f64,
    pub val_epe: Option<f64>,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.8e},{:.6},{}",
            self.step,
            self.stage,
            self.mode,
            self.p,
            self.lr,
            self.loss,
            self.val_epe.map(|v| format!("{v:.6}")).unwrap_or_default()
        )
    }
}

pub const LOG_HEADER: &str = "step,stage,mode,p,lr,loss,val_epe";

/// In-memory log with optional CSV streaming.
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    writer: Option<BufWriter<File>>,
}

impl Default for TrainLog {
    fn default() -> Self {
        Self::new()
    }
}

impl TrainLog {
    pub fn new() -> Self {
        TrainLog { rows: Vec::new(), writer: None }
    }

    pub fn with_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let mut writer = BufWriter::new(File::create(path)?);
        writeln!(writer, "{LOG_HEADER}")?;
        Ok(TrainLog { rows: Vec::new(), writer: Some(writer) })
    }

    fn push(&mut self, row: LogRow) -> Result<(), TrainError> {
        if let Some(w) = &mut self.writer {
            writeln!(w, "{}", row.csv())?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        for r in &self.rows {
            s.push('\n');
            s.push_str(&r.csv());
        }
        s
    }
}

fn mode_label(mode: CostVolumeMode) -> (String, f64) {
    match mode {
        CostVolumeMode::Active => ("active".into(), 0.0),
        CostVolumeMode::Fading { p } => ("fading".into(), p),
        CostVolumeMode::Removed => ("removed".into(), 1.0),
    }
}

/// Generate, augment, and crop the training sample for one batch slot.
fn training_sample(
    recipe: &datasynth::SceneRecipe,
    crop: (usize, usize),
    seed: u64,
    index: u64,
) -> Sample {
    let mut s = generate(recipe, index);
    let mut rng = rng_from(seed, &[tag("augment")]);
    if rng.gen_bool(0.8) {
        s = augment(
            &s,
            AugmentPolicy::Photometric { max_brightness: 0.15, max_contrast: 0.2 },
            derive_seed(seed, &[tag("photo")]),
        );
    }
    if rng.gen_bool(0.5) {
        s = augment(&s, AugmentPolicy::FlipHorizontal, 0);
    }
    if rng.gen_bool(0.1) {
        s = augment(&s, AugmentPolicy::FlipVertical, 0);
    }
    let (h, w) = s.dims();
    let (ch, cw) = crop;
    let y0 = if h > ch { rng.gen_range(0..=h - ch) } else { 0 };
    let x0 = if w > cw { rng.gen_range(0..=w - cw) } else { 0 };
    crop_sample(&s, y0, x0, ch, cw)
}

/// Forward + backward for one sample; returns per-slot gradients and the loss.
fn sample_gradients(
    model: &Model<f32>,
    sample: &Sample,
    gamma: f64,
    fade_seed: u64,
) -> (Vec<Option<Tensor<f32>>>, f64) {
    let mut tape: Tape<f32> = Tape::new();
    let binding = model.bind(&mut tape, true);
    let fwd = model.forward_taped(
        &mut tape,
        &binding,
        &sample.frame1.data,
        &sample.frame2.data,
        model.config().iterations,
        fade_seed,
    );
    let loss_node =
        loss::sequence_loss_node(&mut tape, &fwd, &sample.gt_flow.uv, &sample.gt_flow.valid, gamma)
            .expect("synthetic samples are fully valid");
    let loss_value = tape.value(loss_node).item() as f64;
    let mut grads = tape.backward(loss_node);
    let mut out: Vec<Option<Tensor<f32>>> = vec![None; model.store().slots()];
    for (pid, node) in binding.iter() {
        out[pid] = grads.take(node);
    }
    (out, loss_value)
}

/// Mean validation EPE over the held-out prefix of a recipe's index space.
pub fn validation_epe(model: &Model<f32>, recipe: &datasynth::SceneRecipe, n_samples: usize) -> f64 {
    let reports: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .map(|idx| {
            let s = generate(recipe, idx);
            let pred = evaluator::predict_flow(model, &s, model.config().iterations);
            evaluator::epe(&pred, &s.gt_flow).expect("synthetic samples are valid")
        })
        .collect();
    reports.iter().sum::<f64>() / reports.len() as f64
}

/// Run one stage: apply its mode transition, then `steps` optimizer updates.
pub fn run_stage(
    state: &mut TrainState,
    plan: &StagePlan,
    stage_index: usize,
    log: &mut TrainLog,
) -> Result<(), TrainError> {
    let stage = &plan.stages[stage_index];
    let recipe = datasynth::recipe_by_name(&stage.recipe)
        .ok_or_else(|| TrainError::Plan(format!("unknown recipe {}", stage.recipe)))?;

    match stage.transition {
        ModeTransition::Keep => {}
        ModeTransition::BeginFade => {
            if state.model.config().mode.is_removed() {
                return Err(TrainError::Plan(
                    "cannot begin fading: the cost volume was already removed".into(),
                ));
            }
            state.model.set_fading(0.0);
        }
        ModeTransition::CutOff => {
            if state.model.config().mode.is_removed() {
                return Err(TrainError::Plan("cannot cut off twice: removal is irreversible".into()));
            }
            state.model.cut_off();
            state.optimizer.drop_dead(state.model.store());
        }
    }

    let fading_stage = stage.transition == ModeTransition::BeginFade;
    let warmup = ((stage.steps as f64 * plan.warmup_fraction) as usize).min(stage.steps - 1);
    let sched = make_schedule(stage.steps, warmup, stage.peak_lr);

    for local in 0..stage.steps {
        if fading_stage {
            let p = if stage.steps <= 1 { 1.0 } else { local as f64 / (stage.steps - 1) as f64 };
            state.model.set_fading(p);
        }
        let lr = sched.lr(local);
        let step_seed = derive_seed(state.seed, &[tag("step"), state.global_step]);

        let batch: Vec<(Vec<Option<Tensor<f32>>>, f64)> = (0..stage.batch_size as u64)
            .into_par_iter()
            .map(|k| {
                let slot_seed = derive_seed(step_seed, &[tag("slot"), k]);
                let index =
                    TRAIN_INDEX_BASE + state.global_step * stage.batch_size as u64 + k;
                let sample = training_sample(&recipe, stage.crop, slot_seed, index);
                sample_gradients(&state.model, &sample, plan.gamma, slot_seed)
            })
            .collect();

        // Deterministic reduction in slot order.
        let inv_batch = 1.0 / stage.batch_size as f32;
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; state.model.store().slots()];
        let mut loss_sum = 0.0;
        for (sample_grads, loss_value) in batch {
            loss_sum += loss_value;
            for (slot, g) in sample_grads.into_iter().enumerate() {
                let Some(g) = g else { continue };
                match &mut grads[slot] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot_acc @ None => *slot_acc = Some(g),
                }
            }
        }
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= inv_batch;
            }
        }

        state.optimizer.step(
            state.model.store_mut(),
            &mut grads,
            lr,
            stage.weight_decay,
            1.0,
        );
        state.global_step += 1;

        let is_last = local == stage.steps - 1;
        let val_epe = if state.global_step % plan.val_every as u64 == 0 || is_last {
            Some(validation_epe(&state.model, &recipe, plan.val_samples))
        } else {
            None
        };
        let (mode, p) = mode_label(state.model.config().mode);
        log.push(LogRow {
            step: state.global_step,
            stage: stage_index,
            mode,
            p,
            lr,
            loss: loss_sum / stage.batch_size as f64,
            val_epe,
        })?;
    }

    state.stage_index = stage_index + 1;
    log.flush()?;
    Ok(())
}

/// Drive all stages of a plan, writing per-stage checkpoints when `out_dir`
/// is given. Resumes from `state.stage_index`.
pub fn run_plan(
    state: &mut TrainState,
    plan: &StagePlan,
    out_dir: Option<&Path>,
    log: &mut TrainLog,
) -> Result<(), TrainError> {
    plan.validate()?;
    for idx in state.stage_index..plan.stages.len() {
        run_stage(state, plan, idx, log)?;
        if let Some(dir) = out_dir {
            save_checkpoint(state, dir.join(format!("checkpoint_stage{idx}.ckpt")))?;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(state, dir.join("checkpoint_final.ckpt"))?;
    }
    Ok(())
}

/// Ground truth as an owned flow field for loss helpers.
pub fn sample_gt(sample: &Sample) -> FlowField {
    sample.gt_flow.clone()
}
