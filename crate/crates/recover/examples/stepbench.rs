use recover::costvolume::CostVolumeMode;
use recover::datasynth::{generate, stage_recipes};
use recover::netblocks::{Model, ModelConfig};
use recover::tape::Tape;
use recover::trainer::loss::sequence_loss_node;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig { mode: CostVolumeMode::Active, ..ModelConfig::default() };
    let model: Model<f32> = Model::new(cfg, 1).unwrap();
    let recipe = &stage_recipes()[0];

    let t = Instant::now();
    let n_gen = 20;
    let samples: Vec<_> = (0..n_gen).map(|i| generate(recipe, i)).collect();
    println!("gen: {:.1} ms/sample", t.elapsed().as_secs_f64() * 1000.0 / n_gen as f64);

    let s = recover::datasynth::crop_sample(&samples[0], 0, 0, 64, 96);

    // inference forward only
    let t = Instant::now();
    for _ in 0..10 {
        let _ = model.infer(&s.frame1.data, &s.frame2.data, 4);
    }
    println!("infer(64x96, N=4): {:.1} ms", t.elapsed().as_secs_f64() * 100.0);

    // taped forward
    let t = Instant::now();
    for _ in 0..10 {
        let mut tape: Tape<f32> = Tape::new();
        let bind = model.bind(&mut tape, true);
        let _ = model.forward_taped(&mut tape, &bind, &s.frame1.data, &s.frame2.data, 4, 0);
    }
    println!("taped fwd: {:.1} ms", t.elapsed().as_secs_f64() * 100.0);

    // full fwd+loss+bwd
    let t = Instant::now();
    for _ in 0..10 {
        let mut tape: Tape<f32> = Tape::new();
        let bind = model.bind(&mut tape, true);
        let fwd = model.forward_taped(&mut tape, &bind, &s.frame1.data, &s.frame2.data, 4, 0);
        let loss = sequence_loss_node(&mut tape, &fwd, &s.gt_flow.uv, &s.gt_flow.valid, 0.8).unwrap();
        let _ = tape.backward(loss);
    }
    println!("fwd+bwd: {:.1} ms", t.elapsed().as_secs_f64() * 100.0);
}
