use recover::costvolume::CostVolumeMode;
use recover::netblocks::ModelConfig;
use recover::trainer::{run_stage, ModeTransition, StagePlan, StageSpec, TrainLog, TrainState};
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let mode = match std::env::args().nth(2).as_deref() {
        Some("removed") => CostVolumeMode::Removed,
        _ => CostVolumeMode::Active,
    };
    let mut plan = StagePlan::default_plan();
    plan.model = ModelConfig { mode, ..ModelConfig::default() };
    plan.stages = vec![StageSpec {
        recipe: "stage1-rigid".into(),
        steps,
        batch_size: 2,
        peak_lr: 4e-4,
        weight_decay: 1e-5,
        crop: (64, 96),
        transition: ModeTransition::Keep,
    }];
    plan.val_every = 150;
    plan.val_samples = 16;

    let mut state = TrainState::new(&plan, 42).unwrap();
    println!("params: {}", state.model.param_count());
    let mut log = TrainLog::new();
    let t = Instant::now();
    run_stage(&mut state, &plan, 0, &mut log).unwrap();
    let dt = t.elapsed().as_secs_f64();
    println!("{} steps in {:.1}s = {:.3} s/step", steps, dt, dt / steps as f64);
    for row in log.rows.iter().filter(|r| r.val_epe.is_some() || r.step % 100 == 0) {
        println!("step {:5} loss {:8.4} val_epe {:?}", row.step, row.loss, row.val_epe);
    }
}
