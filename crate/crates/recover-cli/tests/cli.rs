//! End-to-end checks of the command-line surface: exit codes, emitted files,
//! and determinism, using tiny smoke-scale trainings.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_recover")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn recover")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "exit code mismatch\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMOKE_PLAN: &str = r#"
gamma = 0.8
warmup_fraction = 0.05
val_every = 100000
val_samples = 2

[model]
backbone = "medium"
feature_dim = 16
context_dim = 16
hidden_dim = 16
iterations = 1
levels = 2
radius = 1

[model.mode]
kind = "active"

[[stage]]
recipe = "stage1-rigid"
steps = 50
batch_size = 1
peak_lr = 1e-4
weight_decay = 1e-5
crop = [32, 48]
transition = "keep"
"#;

struct Fixture {
    #[allow(dead_code)]
    root: PathBuf,
    active_ckpt: PathBuf,
    removed_ckpt: PathBuf,
    frame1: PathBuf,
    frame2: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let plan_path = root.join("plan.toml");
        std::fs::write(&plan_path, SMOKE_PLAN).unwrap();

        let out_a = root.join("run_active");
        let out = run(&[
            "train",
            "--plan",
            plan_path.to_str().unwrap(),
            "--out",
            out_a.to_str().unwrap(),
            "--seed",
            "5",
        ]);
        assert_code(&out, 0);

        let out_r = root.join("run_removed");
        let out = run(&[
            "train",
            "--plan",
            plan_path.to_str().unwrap(),
            "--out",
            out_r.to_str().unwrap(),
            "--seed",
            "5",
            "--set",
            "model.mode.kind=removed",
        ]);
        assert_code(&out, 0);

        // Frames for predict: exported synthetic sample.
        let data_dir = root.join("data");
        let out = run(&[
            "export-data",
            "--recipe",
            "stage2-affine",
            "--count",
            "1",
            "--out",
            data_dir.to_str().unwrap(),
        ]);
        assert_code(&out, 0);

        Fixture {
            active_ckpt: out_a.join("checkpoint_final.ckpt"),
            removed_ckpt: out_r.join("checkpoint_final.ckpt"),
            frame1: data_dir.join("sample00000/frame1.png"),
            frame2: data_dir.join("sample00000/frame2.png"),
            root,
        }
    })
}

#[test]
fn train_smoke_writes_log_and_checkpoints() {
    let f = fixture();
    assert!(f.active_ckpt.exists());
    let log_path = f.active_ckpt.parent().unwrap().join("train_log.csv");
    let log = std::fs::read_to_string(&log_path).unwrap();
    assert_eq!(log.lines().count(), 51, "header plus 50 step rows");
    assert!(log.lines().next().unwrap().starts_with("step,stage,mode"));
    assert!(f.active_ckpt.parent().unwrap().join("run_config.toml").exists());
}

#[test]
fn train_is_deterministic_across_invocations() {
    let f = fixture();
    let root = tempfile::tempdir().unwrap();
    let plan_path = root.path().join("plan.toml");
    std::fs::write(&plan_path, SMOKE_PLAN).unwrap();
    let rerun = root.path().join("rerun");
    let out = run(&[
        "train",
        "--plan",
        plan_path.to_str().unwrap(),
        "--out",
        rerun.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert_code(&out, 0);
    let a = std::fs::read_to_string(f.active_ckpt.parent().unwrap().join("train_log.csv")).unwrap();
    let b = std::fs::read_to_string(rerun.join("train_log.csv")).unwrap();
    assert_eq!(a, b, "identical seed and plan must give identical loss logs");
}

#[test]
fn invalid_plan_exits_2_citing_the_invariant() {
    let root = tempfile::tempdir().unwrap();
    let plan_path = root.path().join("plan.toml");
    let doubled = format!(
        "{SMOKE_PLAN}\n[[stage]]\nrecipe = \"stage2-affine\"\nsteps = 10\nbatch_size = 1\npeak_lr = 1e-4\nweight_decay = 1e-5\ncrop = [32, 48]\ntransition = \"cut_off\"\n\n[[stage]]\nrecipe = \"stage3-deforming\"\nsteps = 10\nbatch_size = 1\npeak_lr = 1e-4\nweight_decay = 1e-5\ncrop = [32, 48]\ntransition = \"cut_off\"\n"
    );
    std::fs::write(&plan_path, doubled).unwrap();
    let out = run(&[
        "train",
        "--plan",
        plan_path.to_str().unwrap(),
        "--out",
        root.path().join("out").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("irreversible"), "diagnostic must cite the invariant: {err}");
}

#[test]
fn predict_writes_flo_and_visualization() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let flo = dir.path().join("flow.flo");
    let out = run(&[
        "predict",
        "--checkpoint",
        f.active_ckpt.to_str().unwrap(),
        "--frame1",
        f.frame1.to_str().unwrap(),
        "--frame2",
        f.frame2.to_str().unwrap(),
        "--out",
        flo.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(flo.exists());
    assert!(dir.path().join("flow.png").exists());
    let field = recover::flowio::read_flo(&flo).unwrap();
    assert_eq!(field.dims(), (96, 128));
}

#[test]
fn predict_iters_zero_is_the_upsampled_initial_flow() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let flo = dir.path().join("n0.flo");
    let out = run(&[
        "predict",
        "--checkpoint",
        f.active_ckpt.to_str().unwrap(),
        "--frame1",
        f.frame1.to_str().unwrap(),
        "--frame2",
        f.frame2.to_str().unwrap(),
        "--out",
        flo.to_str().unwrap(),
        "--iters",
        "0",
    ]);
    assert_code(&out, 0);
    let got = recover::flowio::read_flo(&flo).unwrap();

    // Index 0 of a longer rollout is the same upsampled initial prediction.
    let model = recover::trainer::load_model(&f.active_ckpt, None).unwrap();
    let frame1 = recover::flowio::read_png(&f.frame1).unwrap();
    let frame2 = recover::flowio::read_png(&f.frame2).unwrap();
    let pred = model.infer(&frame1.data, &frame2.data, 2);
    assert!(pred.flows[0].max_abs_diff(&got.uv) < 1e-6);
}

#[test]
fn predict_rejects_mismatched_frames() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    // A frame of a different size.
    let small = dir.path().join("small.png");
    let frame =
        recover::flowio::Frame::new(recover::tensor::Tensor::zeros(vec![3, 24, 32])).unwrap();
    recover::flowio::write_png(&frame, &small).unwrap();
    let out = run(&[
        "predict",
        "--checkpoint",
        f.active_ckpt.to_str().unwrap(),
        "--frame1",
        f.frame1.to_str().unwrap(),
        "--frame2",
        small.to_str().unwrap(),
        "--out",
        dir.path().join("x.flo").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn predict_verify_removed_and_downsample_counters() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();

    let parse_flops = |out: &Output| -> f64 {
        let text = String::from_utf8_lossy(&out.stdout).to_string();
        let line = text
            .lines()
            .find(|l| l.starts_with("instrumented flops:"))
            .unwrap_or_else(|| panic!("no flops line in: {text}"))
            .to_string();
        line.split(':').nth(1).unwrap().trim().split(' ').next().unwrap().parse().unwrap()
    };

    let base = run(&[
        "predict",
        "--checkpoint",
        f.removed_ckpt.to_str().unwrap(),
        "--frame1",
        f.frame1.to_str().unwrap(),
        "--frame2",
        f.frame2.to_str().unwrap(),
        "--out",
        dir.path().join("a.flo").to_str().unwrap(),
        "--verify-removed",
    ]);
    assert_code(&base, 0);
    assert!(String::from_utf8_lossy(&base.stdout).contains("correlate invocations = 0"));
    let full_flops = parse_flops(&base);

    let down = run(&[
        "predict",
        "--checkpoint",
        f.removed_ckpt.to_str().unwrap(),
        "--frame1",
        f.frame1.to_str().unwrap(),
        "--frame2",
        f.frame2.to_str().unwrap(),
        "--out",
        dir.path().join("b.flo").to_str().unwrap(),
        "--downsample",
    ]);
    assert_code(&down, 0);
    let down_flops = parse_flops(&down);
    assert!(
        full_flops >= 3.0 * down_flops,
        "downsampling must cut instrumented flops by >= 3x: {full_flops} vs {down_flops}"
    );

    // An active-mode checkpoint fails the removed-mode verification.
    let bad = run(&[
        "predict",
        "--checkpoint",
        f.active_ckpt.to_str().unwrap(),
        "--frame1",
        f.frame1.to_str().unwrap(),
        "--frame2",
        f.frame2.to_str().unwrap(),
        "--out",
        dir.path().join("c.flo").to_str().unwrap(),
        "--verify-removed",
    ]);
    assert_code(&bad, 3);
}

#[test]
fn eval_oracle_scores_zero_epe() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        f.active_ckpt.to_str().unwrap(),
        "--recipe",
        "stage2-affine",
        "--samples",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
        "--oracle",
    ]);
    assert_code(&out, 0);
    let csv = std::fs::read_to_string(dir.path().join("region_report.csv")).unwrap();
    let aggregate = csv.lines().last().unwrap();
    assert!(aggregate.starts_with("aggregate,0.000000,"), "oracle EPE must be zero: {aggregate}");
    assert!(dir.path().join("aggregate.json").exists());

    let bad = run(&[
        "eval",
        "--checkpoint",
        f.active_ckpt.to_str().unwrap(),
        "--recipe",
        "no-such-recipe",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&bad, 2);
}

#[test]
fn sweep_emits_one_row_per_iteration_count() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep",
        "--checkpoint",
        f.active_ckpt.to_str().unwrap(),
        "--recipe",
        "stage1-rigid",
        "--iters",
        "0,1,2,4,8",
        "--samples",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6, "header plus 5 rows: {csv}");
    assert!(dir.path().join("sweep.svg").exists());
}

#[test]
fn profile_zeroes_cost_volume_only_when_removed() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["active", "removed"] {
        let out = run(&[
            "profile",
            "--backbone",
            "medium",
            "--mode",
            mode,
            "--resolutions",
            "256x256,512x512",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_code(&out, 0);
    }
    let active = std::fs::read_to_string(dir.path().join("profile_256x256_active.csv")).unwrap();
    let removed = std::fs::read_to_string(dir.path().join("profile_256x256_removed.csv")).unwrap();
    let cv_row = |text: &str| -> Vec<String> {
        text.lines()
            .find(|l| l.starts_with("cost-volume,"))
            .unwrap()
            .split(',')
            .map(str::to_string)
            .collect()
    };
    assert_ne!(cv_row(&active)[1], "0");
    assert_eq!(cv_row(&removed)[1], "0");
    assert!(dir.path().join("flops_active.svg").exists());
    assert!(dir.path().join("memory_removed.svg").exists());
}

#[test]
fn export_data_writes_the_sample_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "export-data",
        "--recipe",
        "stage3-deforming",
        "--count",
        "2",
        "--start-index",
        "7",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    for idx in [7, 8] {
        let d = dir.path().join(format!("sample{idx:05}"));
        for name in ["frame1.png", "frame2.png", "flow.flo", "occlusion.png", "rigid.png"] {
            assert!(d.join(name).exists(), "missing {name} in {}", d.display());
        }
    }
    let flow = recover::flowio::read_flo(dir.path().join("sample00007/flow.flo")).unwrap();
    assert_eq!(flow.dims(), (96, 128));
}

#[test]
fn resume_continues_from_the_latest_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let plan_path = root.path().join("plan.toml");
    // Two stages so an interrupted run has something left to do.
    let plan = format!(
        "{SMOKE_PLAN}\n[[stage]]\nrecipe = \"stage2-affine\"\nsteps = 10\nbatch_size = 1\npeak_lr = 1e-4\nweight_decay = 1e-5\ncrop = [32, 48]\ntransition = \"keep\"\n"
    );
    std::fs::write(&plan_path, &plan).unwrap();
    let out_dir = root.path().join("out");

    // Straight run for reference.
    let full = run(&[
        "train",
        "--plan",
        plan_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert_code(&full, 0);

    // Simulate an interruption: keep only the stage-0 checkpoint, then resume.
    let resumed_dir = root.path().join("resumed");
    std::fs::create_dir_all(&resumed_dir).unwrap();
    std::fs::copy(out_dir.join("checkpoint_stage0.ckpt"), resumed_dir.join("checkpoint_stage0.ckpt"))
        .unwrap();
    let resumed = run(&[
        "train",
        "--plan",
        plan_path.to_str().unwrap(),
        "--out",
        resumed_dir.to_str().unwrap(),
        "--seed",
        "9",
        "--resume",
    ]);
    assert_code(&resumed, 0);
    assert!(String::from_utf8_lossy(&resumed.stdout).contains("resuming from"));

    let a = recover::trainer::load_model(out_dir.join("checkpoint_final.ckpt"), None).unwrap();
    let b = recover::trainer::load_model(resumed_dir.join("checkpoint_final.ckpt"), None).unwrap();
    for ((_, na, ta), (_, _, tb)) in a.store().iter_live().zip(b.store().iter_live()) {
        assert_eq!(ta.data(), tb.data(), "resumed parameter {na} differs");
    }
}
