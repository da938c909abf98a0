use recover::costvolume::CostVolumeMode;
use recover::datasynth::{generate, stage_recipes};
use recover::evaluator::{self, epe};
use recover::flowio::FlowField;
use recover::netblocks::ModelConfig;
use recover::tensor::Tensor;
use recover::trainer::{run_stage, ModeTransition, StagePlan, StageSpec, TrainLog, TrainState};

fn main() {
    // Calibrate: zero-prediction EPE and mean |gt| per stage recipe holdout.
    for r in stage_recipes() {
        let mut zero_epe = 0.0;
        let mut occl = 0.0;
        for idx in 0..16u64 {
            let s = generate(&r, idx);
            let (h, w) = s.dims();
            let zero = FlowField::all_valid(Tensor::zeros(vec![2, h, w]));
            zero_epe += epe(&zero, &s.gt_flow).unwrap();
            occl += s.occlusion.iter().filter(|&&o| o).count() as f64 / (h * w) as f64;
        }
        println!("{}: zero-pred EPE {:.2}, occluded {:.1}%", r.name, zero_epe / 16.0, 100.0 * occl / 16.0);
    }

    // Can the active model learn each hard stage in isolation?
    let which: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let recipe = stage_recipes()[which].name.clone();
    let plan = StagePlan {
        model: ModelConfig { mode: CostVolumeMode::Active, ..ModelConfig::default() },
        stages: vec![StageSpec {
            recipe: recipe.clone(),
            steps,
            batch_size: 2,
            peak_lr: 3e-4,
            weight_decay: 1e-5,
            crop: (64, 96),
            transition: ModeTransition::Keep,
        }],
        gamma: 0.8,
        warmup_fraction: 0.05,
        val_every: 300,
        val_samples: 8,
    };
    let mut state = TrainState::new(&plan, 7).unwrap();
    let mut log = TrainLog::new();
    run_stage(&mut state, &plan, 0, &mut log).unwrap();
    println!(
        "direct {recipe} {steps} steps: val trace {:?}",
        log.rows.iter().filter_map(|r| r.val_epe).map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
    // Also evaluate at train-time N=4 on the stage-4 holdout.
    let recipe4 = stage_recipes().into_iter().last().unwrap();
    let mut e4 = 0.0;
    for idx in 0..16u64 {
        let s = generate(&recipe4, idx);
        let pred = evaluator::predict_flow(&state.model, &s, 4);
        e4 += epe(&pred, &s.gt_flow).unwrap();
    }
    println!("stage4 holdout EPE at N=4: {:.3}", e4 / 16.0);
}
