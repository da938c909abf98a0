// Scaled-down rehearsal of the acceptance training protocol: same plans at
// roughly one quarter of the steps, one seed, to check the variant ordering
// before the full runs.
use recover::costvolume::CostVolumeMode;
use recover::datasynth::{generate, stage_recipes};
use recover::evaluator::{self, epe};
use recover::netblocks::{Backbone, Model, ModelConfig};
use recover::trainer::{run_plan, ModeTransition, StagePlan, StageSpec, TrainLog, TrainState};
use std::time::Instant;

fn plan(mode: CostVolumeMode, t1: ModeTransition, t3: ModeTransition, scale: f64) -> StagePlan {
    let stage = |recipe: &str, steps: usize, peak_lr: f64, tr: ModeTransition| StageSpec {
        recipe: recipe.into(),
        steps: ((steps as f64 * scale) as usize).max(10),
        batch_size: 2,
        peak_lr,
        weight_decay: 1e-5,
        crop: (64, 96),
        transition: tr,
    };
    StagePlan {
        model: ModelConfig { backbone: Backbone::Medium, mode, ..ModelConfig::default() },
        stages: vec![
            stage("stage1-rigid", 3500, 4e-4, t1),
            stage("stage2-affine", 4000, 4e-4, ModeTransition::Keep),
            stage("stage3-deforming", 4000, 3e-4, t3),
            stage("stage4-mixed", 3500, 3e-4, ModeTransition::Keep),
        ],
        gamma: 0.8,
        warmup_fraction: 0.05,
        val_every: 1000,
        val_samples: 8,
    }
}

fn holdout(model: &Model<f32>) -> f64 {
    let recipe = stage_recipes().into_iter().last().unwrap();
    let mut total = 0.0;
    for idx in 0..32u64 {
        let s = generate(&recipe, idx);
        let pred = evaluator::predict_flow(model, &s, 8);
        total += epe(&pred, &s.gt_flow).unwrap();
    }
    total / 32.0
}

fn main() {
    let scale: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let keep = ModeTransition::Keep;
    let variants = [
        ("no-cv", CostVolumeMode::Removed, keep, keep),
        ("cut-stage3", CostVolumeMode::Active, keep, ModeTransition::CutOff),
        ("kept", CostVolumeMode::Active, keep, keep),
        ("cut-stage1", CostVolumeMode::Active, ModeTransition::CutOff, keep),
    ];
    for (name, mode, t1, t3) in variants {
        let p = plan(mode, t1, t3, scale);
        let t = Instant::now();
        let mut state = TrainState::new(&p, 101).unwrap();
        let mut log = TrainLog::new();
        run_plan(&mut state, &p, None, &mut log).unwrap();
        let e = holdout(&state.model);
        println!(
            "{name}: holdout EPE {e:.4}  ({:.1} min, val trace: {:?})",
            t.elapsed().as_secs_f64() / 60.0,
            log.rows.iter().filter_map(|r| r.val_epe).map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
}
