//! Network component contracts: shapes, initialization policy, gradient
//! correctness of the refinement step, mode handling, and a static-scene
//! smoke training run.

use rand::Rng;
use recover::costvolume::CostVolumeMode;
use recover::netblocks::{Backbone, Model, ModelConfig};
use recover::profiler::MeasureSession;
use recover::rng::rng_from;
use recover::tape::Tape;
use recover::tensor::Tensor;

fn small_cfg(mode: CostVolumeMode) -> ModelConfig {
    ModelConfig {
        backbone: Backbone::Medium,
        feature_dim: 16,
        context_dim: 16,
        hidden_dim: 16,
        iterations: 2,
        levels: 2,
        radius: 2,
        mode,
        ..ModelConfig::default()
    }
}

fn random_frame(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = rng_from(seed, &[]);
    Tensor::from_vec(vec![3, h, w], (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
}

#[test]
fn forward_output_shapes_and_iteration_counts() {
    for backbone in [Backbone::Small, Backbone::Medium, Backbone::Large] {
        let cfg = ModelConfig { backbone, ..small_cfg(CostVolumeMode::Active) };
        let model: Model<f32> = Model::new(cfg, 1).unwrap();
        let f1 = random_frame(64, 96, 2);
        let f2 = random_frame(64, 96, 3);
        let pred = model.infer(&f1, &f2, 2);
        assert_eq!(pred.flows.len(), 3, "N+1 flows including the initial one");
        assert_eq!(pred.mixes.len(), 3);
        for f in &pred.flows {
            assert_eq!(f.shape(), &[2, 64, 96]);
            assert!(f.all_finite());
        }
        for m in &pred.mixes {
            assert_eq!(m.shape(), &[3, 64, 96]);
        }
    }
}

#[test]
fn zero_iterations_yield_only_the_upsampled_initial_flow() {
    let model: Model<f32> = Model::new(small_cfg(CostVolumeMode::Active), 4).unwrap();
    let f1 = random_frame(32, 48, 5);
    let f2 = random_frame(32, 48, 6);
    let pred = model.infer(&f1, &f2, 0);
    assert_eq!(pred.flows.len(), 1);
    // The same initial flow appears as entry 0 of a longer rollout.
    let pred2 = model.infer(&f1, &f2, 2);
    assert_eq!(pred.flows[0], pred2.flows[0]);
}

#[test]
fn parameter_counts_are_ordered_small_medium_large() {
    let mut counts = Vec::new();
    for backbone in [Backbone::Small, Backbone::Medium, Backbone::Large] {
        let cfg = ModelConfig { backbone, ..ModelConfig::default() };
        let model: Model<f32> = Model::new(cfg, 0).unwrap();
        // Isolate the context network: total minus shared parts.
        counts.push(model.store().count_prefix("cnet."));
    }
    assert!(
        counts[0] < counts[1] && counts[1] < counts[2],
        "context parameter counts not ordered: {counts:?}"
    );
}

#[test]
fn feature_encoder_contracts() {
    // Construction is refused in removed mode.
    let removed = small_cfg(CostVolumeMode::Removed);
    let model: Model<f32> = Model::new(removed, 7).unwrap();
    assert!(!model.has_feature_encoder());
    assert_eq!(model.feature_param_count(), 0);

    use recover::netblocks::{bind_store, FeatureEncoder, ParamStore};
    let mut store: ParamStore<f32> = ParamStore::new();
    let mut rng = rng_from(8, &[]);
    let err = FeatureEncoder::build(&mut store, &mut rng, &small_cfg(CostVolumeMode::Removed));
    assert!(err.is_err(), "encoder must refuse removed mode");

    // Shared weights: the same frame maps to the identical feature map.
    let cfg = small_cfg(CostVolumeMode::Active);
    let mut store: ParamStore<f32> = ParamStore::new();
    let enc = FeatureEncoder::build(&mut store, &mut rng, &cfg).unwrap();
    let mut tape: Tape<f32> = Tape::new();
    let bind = bind_store(&store, &mut tape, false);
    let frame = random_frame(64, 96, 9).map(|v| v * 2.0 - 1.0);
    let a = tape.constant(frame.clone());
    let b = tape.constant(frame);
    let fa = enc.forward(&mut tape, &bind, a);
    let fb = enc.forward(&mut tape, &bind, b);
    assert_eq!(tape.value(fa).shape(), &[16, 8, 12]);
    assert_eq!(tape.value(fa), tape.value(fb));
}

#[test]
fn refinement_step_zero_init_keeps_flow() {
    let cfg = small_cfg(CostVolumeMode::Active);
    let model: Model<f32> = Model::new(cfg.clone(), 10).unwrap();
    let mut tape: Tape<f32> = Tape::new();
    let bind = model.bind(&mut tape, false);
    let (h, w) = (4, 6);
    let mut rng = rng_from(11, &[]);
    let hidden = tape.constant(Tensor::from_vec(
        vec![cfg.hidden_dim, h, w],
        (0..cfg.hidden_dim * h * w).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    ));
    let flow_t = Tensor::from_vec(
        vec![2, h, w],
        (0..2 * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    );
    let flow = tape.constant(flow_t.clone());
    let context = tape.constant(Tensor::zeros(vec![cfg.context_dim, h, w]));
    let motion_zeros = tape.constant(Tensor::zeros(vec![cfg.motion_input_channels(), h, w]));

    let motion = model.refinement().encode_motion(&mut tape, &bind, motion_zeros, &flow_t);
    let state = recover::netblocks::RefinementUnit::initial_state(hidden, flow);
    let out = model.refinement().step(&mut tape, &bind, state, context, motion);
    // Freshly zero-initialized flow head: the step is an exact no-op on flow.
    assert_eq!(tape.value(out.state.flow), &flow_t);
    assert_eq!(out.state.iteration, 1);
    assert!(tape.value(out.state.hidden).all_finite());
    assert!(tape.value(out.mix).all_finite());
}

/// Criterion-style finite-difference check of the refinement step at f64.
#[test]
fn refinement_step_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        backbone: Backbone::Medium,
        feature_dim: 8,
        context_dim: 8,
        hidden_dim: 8,
        iterations: 1,
        levels: 2,
        radius: 1,
        mode: CostVolumeMode::Active,
        ..ModelConfig::default()
    };
    let mut model: Model<f64> = Model::new(cfg.clone(), 12).unwrap();
    let (h, w) = (3, 4);
    let mut rng = rng_from(13, &[]);
    let hidden_t = Tensor::from_vec(
        vec![cfg.hidden_dim, h, w],
        (0..cfg.hidden_dim * h * w).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    );
    let flow_t: Tensor<f64> =
        Tensor::from_vec(vec![2, h, w], (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let context_t = Tensor::from_vec(
        vec![cfg.context_dim, h, w],
        (0..cfg.context_dim * h * w).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    );
    let cost_t = Tensor::from_vec(
        vec![cfg.motion_input_channels(), h, w],
        (0..cfg.motion_input_channels() * h * w).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    );
    let probe: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();

    // Give the zero-initialized head nonzero weights so its inputs get
    // gradient too.
    let head_ids: Vec<usize> = model
        .store()
        .iter_live()
        .filter(|(_, n, _)| n.starts_with("refine.head2"))
        .map(|(id, _, _)| id)
        .collect();
    for id in head_ids {
        let t = model.store_mut().get_mut(id);
        for v in t.data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    }

    let run = |model: &Model<f64>, want_grads: bool| -> (f64, Option<Vec<Option<Tensor<f64>>>>) {
        let mut tape: Tape<f64> = Tape::new();
        let bind = model.bind(&mut tape, true);
        let hidden = tape.constant(hidden_t.clone());
        let flow = tape.constant(flow_t.clone());
        let context = tape.constant(context_t.clone());
        let cost = tape.constant(cost_t.clone());
        let motion = model.refinement().encode_motion(&mut tape, &bind, cost, &flow_t);
        let state = recover::netblocks::RefinementUnit::initial_state(hidden, flow);
        let out = model.refinement().step(&mut tape, &bind, state, context, motion);
        let loss = tape.masked_mean(
            out.state.flow,
            Tensor::from_vec(vec![2 * h * w], probe.clone()),
            2.0 * (h * w) as f64,
        );
        let value = tape.value(loss).item();
        if want_grads {
            let mut g = tape.backward(loss);
            let out: Vec<Option<Tensor<f64>>> =
                bind.iter().map(|(_pid, node)| g.take(node)).collect();
            (value, Some(out))
        } else {
            (value, None)
        }
    };

    let (_, grads) = run(&model, true);
    let grads = grads.unwrap();
    let live: Vec<(usize, String)> = model
        .store()
        .iter_live()
        .filter(|(_, n, _)| n.starts_with("refine."))
        .map(|(id, n, _)| (id, n.to_string()))
        .collect();
    // Map store ids to bind order (bind order == live order).
    let id_to_pos: std::collections::HashMap<usize, usize> =
        model.store().iter_live().enumerate().map(|(pos, (id, _, _))| (id, pos)).collect();

    let mut rng = rng_from(14, &[]);
    let mut checked = 0;
    while checked < 20 {
        let (id, name) = &live[rng.gen_range(0..live.len())];
        let len = model.store().get(*id).len();
        let coord = rng.gen_range(0..len);
        let analytic = match &grads[id_to_pos[id]] {
            Some(g) => g.data()[coord],
            None => continue,
        };
        let eps = 1e-6;
        let orig = model.store().get(*id).data()[coord];
        model.store_mut().get_mut(*id).data_mut()[coord] = orig + eps;
        let (fp, _) = run(&model, false);
        model.store_mut().get_mut(*id).data_mut()[coord] = orig - eps;
        let (fm, _) = run(&model, false);
        model.store_mut().get_mut(*id).data_mut()[coord] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        if numeric.abs() < 1e-10 && analytic.abs() < 1e-10 {
            continue;
        }
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
        assert!(
            rel < 1e-3,
            "{name}[{coord}]: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {rel:.2e})"
        );
        checked += 1;
    }
}

#[test]
fn convex_upsample_value_semantics() {
    // Constant flow upsamples to the constant times 8 under any weights.
    let mut tape: Tape<f32> = Tape::new();
    let mut rng = rng_from(15, &[]);
    let flow = tape.constant(Tensor::from_vec(
        vec![2, 3, 4],
        (0..24).map(|i| if i < 12 { 1.25 } else { -0.5 }).collect(),
    ));
    let mask = tape.constant(Tensor::from_vec(
        vec![576, 3, 4],
        (0..576 * 12).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    ));
    let up = tape.convex_upsample(flow, mask, 8.0);
    let v = tape.value(up);
    assert_eq!(v.shape(), &[2, 24, 32]);
    for p in 0..24 * 32 {
        assert!((v.data()[p] - 10.0).abs() < 1e-5);
        assert!((v.data()[24 * 32 + p] + 4.0).abs() < 1e-5);
    }

    // Weights concentrated on the center tap reproduce the parent cell.
    let mut tape: Tape<f32> = Tape::new();
    let flow_t =
        Tensor::from_vec(vec![2, 2, 2], (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
    let flow = tape.constant(flow_t.clone());
    let mut mask_t = Tensor::zeros(vec![576, 2, 2]);
    // Center tap is index 4 of the 3x3 neighborhood.
    for sub in 0..64 {
        for p in 0..4 {
            mask_t.data_mut()[(4 * 64 + sub) * 4 + p] = 60.0;
        }
    }
    let mask = tape.constant(mask_t);
    let up = tape.convex_upsample(flow, mask, 8.0);
    let v = tape.value(up);
    for c in 0..2 {
        for y in 0..16 {
            for x in 0..16 {
                let parent = flow_t.at3(c, y / 8, x / 8);
                assert!((v.at3(c, y, x) - 8.0 * parent).abs() < 1e-4);
            }
        }
    }
}

/// Per-pixel loop oracle for the convex combination.
#[test]
fn convex_upsample_matches_loop_oracle() {
    let (h, w) = (3, 3);
    let mut rng = rng_from(16, &[]);
    let flow_t: Tensor<f64> =
        Tensor::from_vec(vec![2, h, w], (0..2 * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let mask_t: Tensor<f64> = Tensor::from_vec(
        vec![576, h, w],
        (0..576 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let mut tape: Tape<f64> = Tape::new();
    let flow = tape.constant(flow_t.clone());
    let mask = tape.constant(mask_t.clone());
    let up = tape.convex_upsample(flow, mask, 8.0);
    let got = tape.value(up);

    for c in 0..2 {
        for oy in 0..8 * h {
            for ox in 0..8 * w {
                let (i, j) = (oy / 8, ox / 8);
                let sub = (oy % 8) * 8 + (ox % 8);
                // Softmax over the 9 taps for this subcell.
                let logits: Vec<f64> = (0..9)
                    .map(|t| mask_t.data()[(t * 64 + sub) * h * w + i * w + j])
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut acc = 0.0;
                for (t, e) in exps.iter().enumerate() {
                    let ny = (i as isize + t as isize / 3 - 1).clamp(0, h as isize - 1) as usize;
                    let nx = (j as isize + t as isize % 3 - 1).clamp(0, w as isize - 1) as usize;
                    acc += e / z * flow_t.at3(c, ny, nx);
                }
                let want = 8.0 * acc;
                let gotv = got.at3(c, oy, ox);
                assert!(
                    (gotv - want).abs() < 1e-5,
                    "({c},{oy},{ox}): {gotv} vs {want}"
                );
            }
        }
    }
}

#[test]
fn removed_mode_never_invokes_correlate() {
    let model: Model<f32> = Model::new(small_cfg(CostVolumeMode::Removed), 17).unwrap();
    let f1 = random_frame(32, 48, 18);
    let f2 = random_frame(32, 48, 19);
    let session = MeasureSession::begin();
    let pred = model.infer(&f1, &f2, 3);
    let counters = session.finish();
    assert_eq!(counters.correlate_calls, 0);
    assert_eq!(counters.correlate_flops, 0);
    assert_eq!(counters.lookup_samples, 0);
    assert!(pred.final_flow().all_finite());
}

#[test]
fn all_zero_frames_give_finite_outputs() {
    let model: Model<f32> = Model::new(small_cfg(CostVolumeMode::Active), 20).unwrap();
    let z = Tensor::zeros(vec![3, 32, 48]);
    let pred = model.infer(&z, &z, 4);
    for f in &pred.flows {
        assert!(f.all_finite());
    }
    for m in &pred.mixes {
        assert!(m.all_finite());
    }
}

#[test]
fn fading_one_equals_removed_export() {
    // Train-free statement of the pruning equivalence: an active model in
    // fading(1.0) equals its own cut-off export, bitwise inputs aside.
    let mut model: Model<f32> = Model::new(small_cfg(CostVolumeMode::Active), 21).unwrap();
    let f1 = random_frame(32, 48, 22);
    let f2 = random_frame(32, 48, 23);
    model.set_fading(1.0);
    let faded = model.infer(&f1, &f2, 3);
    let before = model.param_count();
    let dropped = model.cut_off();
    assert!(dropped > 0);
    assert_eq!(model.param_count() + dropped, before);
    let removed = model.infer(&f1, &f2, 3);
    for (a, b) in faded.flows.iter().zip(&removed.flows) {
        assert!(a.max_abs_diff(b) < 1e-5);
    }
}

#[test]
fn gradient_coverage_by_mode() {
    use recover::trainer::loss::sequence_loss_node;
    let cfg = small_cfg(CostVolumeMode::Active);
    let mut model: Model<f32> = Model::new(cfg, 24).unwrap();
    // Coverage is a statement about connectivity, not about the exact init
    // point (the zero-initialized flow head and zero biases park some units
    // on ReLU kinks where the subgradient vanishes). Evaluate at a generic
    // nearby parameter point instead.
    let ids: Vec<usize> = model.store().iter_live().map(|(id, _, _)| id).collect();
    let mut jitter_rng = rng_from(240, &[]);
    for id in ids {
        for v in model.store_mut().get_mut(id).data_mut() {
            *v += jitter_rng.gen_range(-0.02..0.02);
        }
    }
    let f1 = random_frame(32, 48, 25);
    let f2 = random_frame(32, 48, 26);
    let mut rng = rng_from(27, &[]);
    let gt: Tensor<f32> = Tensor::from_vec(
        vec![2, 32, 48],
        (0..2 * 32 * 48).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    );
    let valid = vec![true; 32 * 48];

    let grad_norms = |model: &Model<f32>| -> Vec<(String, f64)> {
        let mut tape: Tape<f32> = Tape::new();
        let bind = model.bind(&mut tape, true);
        let fwd = model.forward_taped(&mut tape, &bind, &f1, &f2, 2, 99);
        let loss = sequence_loss_node(&mut tape, &fwd, &gt, &valid, 0.8).unwrap();
        let mut grads = tape.backward(loss);
        bind.iter()
            .zip(model.store().iter_live())
            .map(|((_, node), (_, name, _))| {
                let norm = grads
                    .take(node)
                    .map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
                    .unwrap_or(0.0);
                (name.to_string(), norm)
            })
            .collect()
    };

    // Active mode: every parameter receives gradient.
    for (name, norm) in grad_norms(&model) {
        assert!(norm > 0.0, "parameter {name} received no gradient in active mode");
    }

    // fading(1.0): the feature-encoder parameters receive none. The first
    // refinement conv that consumes the cost features also sees a zero input,
    // so its weight (not bias) gradient vanishes too.
    let mut faded = model.clone();
    faded.set_fading(1.0);
    for (name, norm) in grad_norms(&faded) {
        if name.starts_with("fnet.") {
            assert_eq!(norm, 0.0, "feature parameter {name} still gets gradient at p=1");
        } else if name == "refine.corr1.w" {
            assert_eq!(norm, 0.0, "zero input must zero the first cost-layer weight grad");
        } else {
            assert!(norm > 0.0, "parameter {name} starved at p=1");
        }
    }
}

#[test]
fn taped_forward_matches_inference_path() {
    let model: Model<f32> = Model::new(small_cfg(CostVolumeMode::Active), 28).unwrap();
    let f1 = random_frame(32, 48, 29);
    let f2 = random_frame(32, 48, 30);
    let mut tape: Tape<f32> = Tape::new();
    let bind = model.bind(&mut tape, true);
    let fwd = model.forward_taped(&mut tape, &bind, &f1, &f2, 2, 0);
    let pred = model.infer(&f1, &f2, 2);
    for (&node, flow) in fwd.flows.iter().zip(&pred.flows) {
        assert!(tape.value(node).max_abs_diff(flow) < 1e-6);
    }
}

/// Static-scene smoke training: the initial flow must shrink toward zero.
#[test]
fn flow0_trains_toward_zero_on_static_scenes() {
    use recover::datasynth::{generate, MotionModel, SceneRecipe, TextureSpectrum};
    use recover::netblocks::Model;
    use recover::trainer::AdamW;

    let cfg = ModelConfig {
        backbone: Backbone::Medium,
        feature_dim: 16,
        context_dim: 16,
        hidden_dim: 16,
        iterations: 1,
        levels: 2,
        radius: 2,
        mode: CostVolumeMode::Active,
        ..ModelConfig::default()
    };
    let mut model: Model<f32> = Model::new(cfg, 31).unwrap();
    let mut opt: AdamW<f32> = AdamW::new(model.store().slots());
    let recipe = SceneRecipe {
        name: "static".into(),
        resolution: (32, 48),
        n_layers: 2,
        motion_model: MotionModel::GlobalRigid,
        max_displacement: 0.0,
        texture_spectrum: TextureSpectrum::Mid,
        occlusion_allowed: false,
        seed_base: 99,
    };

    let mut first_loss = None;
    let mut last_loss = 0.0;
    for step in 0..500 {
        let sample = generate(&recipe, step % 8);
        let mut tape: Tape<f32> = Tape::new();
        let bind = model.bind(&mut tape, true);
        let fwd = model.forward_taped(
            &mut tape,
            &bind,
            &sample.frame1.data,
            &sample.frame2.data,
            1,
            step,
        );
        let loss = recover::trainer::loss::sequence_loss_node(
            &mut tape,
            &fwd,
            &sample.gt_flow.uv,
            &sample.gt_flow.valid,
            0.8,
        )
        .unwrap();
        last_loss = tape.value(loss).item() as f64;
        first_loss.get_or_insert(last_loss);
        let mut grads = tape.backward(loss);
        let mut g: Vec<Option<Tensor<f32>>> = vec![None; model.store().slots()];
        for (pid, node) in bind.iter() {
            g[pid] = grads.take(node);
        }
        opt.step(model.store_mut(), &mut g, 2e-4, 1e-5, 1.0);
    }
    assert!(
        last_loss < first_loss.unwrap(),
        "loss did not decrease: {first_loss:?} -> {last_loss}"
    );

    // Mean |flow0| below 0.5 grid units (the stored flow is upsampled x8).
    let sample = generate(&recipe, 100);
    let pred = model.infer(&sample.frame1.data, &sample.frame2.data, 1);
    let mean_grid_units = pred.flows[0]
        .data()
        .iter()
        .map(|&v| (v as f64 / 8.0).abs())
        .sum::<f64>()
        / pred.flows[0].len() as f64;
    assert!(mean_grid_units < 0.5, "mean |flow0| = {mean_grid_units:.3} grid units");
}
