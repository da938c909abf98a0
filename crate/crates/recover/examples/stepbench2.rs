#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use recover::costvolume::CostVolumeMode;
use recover::datasynth::{generate, stage_recipes};
use recover::netblocks::{Model, ModelConfig};
use std::time::Instant;

fn time_infer(model: &Model<f32>, f1: &recover::tensor::Tensor<f32>, f2: &recover::tensor::Tensor<f32>, n: usize, reps: usize) -> f64 {
    let t = Instant::now();
    for _ in 0..reps {
        let _ = model.infer(f1, f2, n);
    }
    t.elapsed().as_secs_f64() * 1000.0 / reps as f64
}

fn main() {
    let recipe = &stage_recipes()[0];
    let s = recover::datasynth::crop_sample(&generate(recipe, 0), 0, 0, 64, 96);
    let active: Model<f32> = Model::new(ModelConfig { mode: CostVolumeMode::Active, ..ModelConfig::default() }, 1).unwrap();
    let removed: Model<f32> = Model::new(ModelConfig { mode: CostVolumeMode::Removed, ..ModelConfig::default() }, 1).unwrap();
    println!("active  N=0: {:.1} ms", time_infer(&active, &s.frame1.data, &s.frame2.data, 0, 20));
    println!("active  N=4: {:.1} ms", time_infer(&active, &s.frame1.data, &s.frame2.data, 4, 20));
    println!("removed N=0: {:.1} ms", time_infer(&removed, &s.frame1.data, &s.frame2.data, 0, 20));
    println!("removed N=4: {:.1} ms", time_infer(&removed, &s.frame1.data, &s.frame2.data, 4, 20));

    // 2-thread parallel scaling of fwd+bwd
    use rayon::prelude::*;
    use recover::tape::Tape;
    use recover::trainer::loss::sequence_loss_node;
    let t = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let _: Vec<f32> = (0..2u64).into_par_iter().map(|_| {
            let mut tape: Tape<f32> = Tape::new();
            let bind = active.bind(&mut tape, true);
            let fwd = active.forward_taped(&mut tape, &bind, &s.frame1.data, &s.frame2.data, 4, 0);
            let loss = sequence_loss_node(&mut tape, &fwd, &s.gt_flow.uv, &s.gt_flow.valid, 0.8).unwrap();
            let v = tape.value(loss).item();
            let _ = tape.backward(loss);
            v
        }).collect();
    }
    println!("parallel batch-2 fwd+bwd: {:.1} ms/step", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
