//! Command-line entry points: train, eval, sweep, profile, predict, and data
//! export. Exit codes: 0 success, 2 user/config error, 3 checkpoint or
//! compatibility error, 1 unexpected failure.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use recover::costvolume::CostVolumeMode;
use recover::datasynth::{self, generate};
use recover::evaluator::{self, merge_reports, region_report, RegionReport};
use recover::flowio::{
    flow_to_color, pad_to_multiple, read_png, write_flo, write_mask_png, write_png, FlowField,
};
use recover::netblocks::{Backbone, ModelConfig};
use recover::profiler::{profile, MeasureSession};
use recover::trainer::{
    self, load_checkpoint, load_model, StagePlan, TrainError, TrainLog, TrainState,
};
use recover::viz;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "recover", about = "Optical flow estimation with cost-volume removal during training", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a staged training plan.
    Train(TrainArgs),
    /// Predict flow between two frames with a trained checkpoint.
    Predict(PredictArgs),
    /// Region-partitioned EPE evaluation on a seeded synthetic test set.
    Eval(EvalArgs),
    /// Re-run evaluation at several refinement iteration counts.
    Sweep(SweepArgs),
    /// Analytic per-component FLOP/byte reports across resolutions.
    Profile(ProfileArgs),
    /// Write synthetic samples to disk for inspection.
    ExportData(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Stage-plan TOML file.
    #[arg(long)]
    plan: PathBuf,
    /// Output directory for checkpoints and the CSV log.
    #[arg(long)]
    out: PathBuf,
    /// Root seed; every random draw derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resume from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Override plan values, e.g. --set model.iterations=2 --set stage.0.steps=100
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    frame1: PathBuf,
    #[arg(long)]
    frame2: PathBuf,
    /// Output .flo path; a color visualization PNG is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Refinement iterations (default: backbone-specific).
    #[arg(long)]
    iters: Option<usize>,
    /// Downsample inputs 2x and upsample the flow (cheaper, often coarser).
    #[arg(long)]
    downsample: bool,
    /// Assert that the cost-volume path never runs (removed-mode models).
    #[arg(long)]
    verify_removed: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset recipe name (see `stage_recipes`).
    #[arg(long)]
    recipe: String,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    /// Test hook: score the ground truth against itself.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    recipe: String,
    /// Comma-separated iteration counts, e.g. 0,1,2,4,8.
    #[arg(long)]
    iters: String,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long, default_value = "medium")]
    backbone: String,
    /// Cost-volume mode: active or removed.
    #[arg(long, default_value = "active")]
    mode: String,
    /// Comma-separated resolutions, e.g. 256x256,512x512,1920x1080.
    #[arg(long, default_value = "256x256,512x512,1024x1024,2048x2048")]
    resolutions: String,
    #[arg(long, default_value_t = 4)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    recipe: String,
    #[arg(long, default_value_t = 8)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    start_index: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failures mapped to the documented exit codes.
enum CliError {
    User(String),
    Checkpoint(String),
    Other(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::User(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Plan(m) => CliError::User(m),
            TrainError::Checkpoint(m) | TrainError::Compatibility(m) => CliError::Checkpoint(m),
            other => CliError::Other(anyhow::anyhow!(other)),
        }
    }
}

fn user_err(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Profile(a) => cmd_profile(a),
        Command::ExportData(a) => cmd_export_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::User(m) => eprintln!("error: {m}"),
                CliError::Checkpoint(m) => eprintln!("checkpoint error: {m}"),
                CliError::Other(err) => eprintln!("unexpected error: {err:#}"),
            }
            ExitCode::from(e.code())
        }
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn apply_override(value: &mut toml::Value, key: &str, raw: &str) -> Result<(), CliError> {
    let parsed: toml::Value = raw
        .parse::<i64>()
        .map(toml::Value::Integer)
        .or_else(|_| raw.parse::<f64>().map(toml::Value::Float))
        .or_else(|_| raw.parse::<bool>().map(toml::Value::Boolean))
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if let Ok(idx) = part.parse::<usize>() {
            let arr = cursor
                .as_array_mut()
                .ok_or_else(|| user_err(format!("override {key}: {part} is not an array index here")))?;
            let slot = arr
                .get_mut(idx)
                .ok_or_else(|| user_err(format!("override {key}: index {idx} out of range")))?;
            if last {
                *slot = parsed;
                return Ok(());
            }
            cursor = slot;
        } else {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| user_err(format!("override {key}: {part} is not a table key here")))?;
            if last {
                table.insert(part.to_string(), parsed);
                return Ok(());
            }
            cursor = table
                .get_mut(*part)
                .ok_or_else(|| user_err(format!("override {key}: unknown key {part}")))?;
        }
    }
    Err(user_err(format!("override {key}: empty key path")))
}

fn load_plan(path: &Path, overrides: &[String]) -> Result<StagePlan, CliError> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading plan file {}", path.display()))
        .map_err(|e| user_err(format!("{e:#}")))?;
    let table: toml::Table =
        text.parse().map_err(|e| user_err(format!("plan parse error: {e}")))?;
    let mut value = toml::Value::Table(table);
    for ov in overrides {
        let (key, val) = ov
            .split_once('=')
            .ok_or_else(|| user_err(format!("override '{ov}' is not KEY=VALUE")))?;
        apply_override(&mut value, key.trim(), val.trim())?;
    }
    let plan: StagePlan = value
        .try_into()
        .map_err(|e| user_err(format!("plan structure error: {e}")))?;
    plan.validate()?;
    Ok(plan)
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let final_ckpt = dir.join("checkpoint_final.ckpt");
    if final_ckpt.exists() {
        return Some(final_ckpt);
    }
    (0..64)
        .rev()
        .map(|i| dir.join(format!("checkpoint_stage{i}.ckpt")))
        .find(|p| p.exists())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let plan = load_plan(&a.plan, &a.overrides)?;
    std::fs::create_dir_all(&a.out).context("creating output directory")?;

    let mut state = if a.resume {
        match latest_checkpoint(&a.out) {
            Some(path) => {
                let state = load_checkpoint(&path)?;
                println!(
                    "resuming from {} (stage {}, step {})",
                    path.display(),
                    state.stage_index,
                    state.global_step
                );
                state
            }
            None => TrainState::new(&plan, a.seed)?,
        }
    } else {
        TrainState::new(&plan, a.seed)?
    };

    // Record the effective run configuration beside the outputs.
    std::fs::write(
        a.out.join("run_config.toml"),
        format!("seed = {}\n\n{}", state.seed, plan.to_toml()),
    )
    .context("writing run_config.toml")?;
    println!("seed = {}", state.seed);

    let mut log = TrainLog::with_file(a.out.join("train_log.csv"))?;
    trainer::run_plan(&mut state, &plan, Some(&a.out), &mut log)?;
    println!(
        "training complete: {} steps, final mode {}",
        state.global_step,
        state.model.config().mode.describe()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

fn backbone_default_iters(b: Backbone) -> usize {
    b.default_eval_iterations()
}

fn cmd_predict(a: PredictArgs) -> Result<(), CliError> {
    let frame1 = read_png(&a.frame1).map_err(|e| user_err(e.to_string()))?;
    let frame2 = read_png(&a.frame2).map_err(|e| user_err(e.to_string()))?;
    if frame1.dims() != frame2.dims() {
        return Err(user_err(format!(
            "frame sizes differ: {:?} vs {:?}",
            frame1.dims(),
            frame2.dims()
        )));
    }
    let model = load_model(&a.checkpoint, None)?;
    let iters = a.iters.unwrap_or_else(|| backbone_default_iters(model.config().backbone));

    let multiple = if a.downsample { 16 } else { 8 };
    let (p1, pad) = pad_to_multiple(&frame1, multiple);
    let (p2, _) = pad_to_multiple(&frame2, multiple);

    let session = MeasureSession::begin();
    let flow_padded = if a.downsample {
        evaluator::infer_downsampled(&model, &p1.data, &p2.data, 2, iters)
    } else {
        model.infer(&p1.data, &p2.data, iters).final_flow().clone()
    };
    let counters = session.finish();

    if a.verify_removed {
        if counters.correlate_calls != 0 {
            return Err(CliError::Checkpoint(format!(
                "model ran correlate {} times; not a removed-mode model",
                counters.correlate_calls
            )));
        }
        println!("verify-removed: correlate invocations = 0");
    }
    println!(
        "instrumented flops: {} (conv {}, cost-volume {})",
        counters.total_flops(),
        counters.conv_flops,
        counters.costvolume_flops()
    );

    let flow = pad.crop(&FlowField::all_valid(flow_padded));
    write_flo(&flow, &a.out).map_err(|e| user_err(e.to_string()))?;
    let vis_path = a.out.with_extension("png");
    write_png(&flow_to_color(&flow, None), &vis_path).map_err(|e| user_err(e.to_string()))?;
    println!("wrote {} and {}", a.out.display(), vis_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn recipe_or_err(name: &str) -> Result<datasynth::SceneRecipe, CliError> {
    datasynth::recipe_by_name(name).ok_or_else(|| {
        user_err(format!(
            "unknown recipe {name}; available: {}",
            datasynth::stage_recipes().iter().map(|r| r.name.clone()).collect::<Vec<_>>().join(", ")
        ))
    })
}

fn aggregate_json(report: &RegionReport) -> String {
    let f = |s: &evaluator::RegionStat| {
        if s.count == 0 { "null".to_string() } else { format!("{:.6}", s.epe) }
    };
    let mut out = String::from("{\n");
    let _ = write!(
        out,
        "  \"total\": {},\n  \"matched\": {},\n  \"unmatched\": {},\n  \"rigid\": {},\n  \"nonrigid\": {},\n  \"s0_10\": {},\n  \"s10_40\": {},\n  \"s40p\": {},\n  \"pixels\": {}\n",
        f(&report.total),
        f(&report.matched),
        f(&report.unmatched),
        f(&report.rigid),
        f(&report.nonrigid),
        f(&report.s0_10),
        f(&report.s10_40),
        f(&report.s40p),
        report.total.count
    );
    out.push('}');
    out.push('\n');
    out
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let recipe = recipe_or_err(&a.recipe)?;
    let model = load_model(&a.checkpoint, None)?;
    let iters = a.iters.unwrap_or_else(|| backbone_default_iters(model.config().backbone));
    std::fs::create_dir_all(&a.out).context("creating output directory")?;

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for idx in 0..a.samples as u64 {
        let s = generate(&recipe, idx);
        let pred = if a.oracle {
            s.gt_flow.clone()
        } else {
            evaluator::predict_flow(&model, &s, iters)
        };
        let r = region_report(&pred, &s).map_err(|e| user_err(e.to_string()))?;
        rows.push(format!("{idx},{}", r.csv_row()));
        reports.push(r);
    }
    let aggregate = merge_reports(&reports);

    let mut csv = format!("sample,{}\n", RegionReport::CSV_HEADER);
    for row in &rows {
        csv.push_str(row);
        csv.push('\n');
    }
    csv.push_str(&format!("aggregate,{}\n", aggregate.csv_row()));
    std::fs::write(a.out.join("region_report.csv"), csv).context("writing region_report.csv")?;
    std::fs::write(a.out.join("aggregate.json"), aggregate_json(&aggregate))
        .context("writing aggregate.json")?;
    println!(
        "eval({}, {} samples, N={iters}): total EPE {:.4} (matched {:.4}, unmatched {:.4})",
        recipe.name,
        a.samples,
        aggregate.total.epe,
        aggregate.matched.epe,
        aggregate.unmatched.epe
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let recipe = recipe_or_err(&a.recipe)?;
    let model = load_model(&a.checkpoint, None)?;
    let iters: Vec<usize> = a
        .iters
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| user_err(format!("bad iteration count '{t}'"))))
        .collect::<Result<_, _>>()?;
    if iters.is_empty() {
        return Err(user_err("iteration list is empty"));
    }
    std::fs::create_dir_all(&a.out).context("creating output directory")?;

    let samples: Vec<_> = (0..a.samples as u64).map(|i| generate(&recipe, i)).collect();
    let rows = evaluator::iteration_sweep(&model, &samples, &iters);

    let mut csv = Vec::new();
    evaluator::write_sweep_csv(&rows, &mut csv).context("formatting sweep csv")?;
    std::fs::write(a.out.join("sweep.csv"), csv).context("writing sweep.csv")?;

    let series = vec![viz::Series {
        label: format!("{} ({} samples)", recipe.name, a.samples),
        points: rows.iter().map(|&(n, e)| (n as f64, e)).collect(),
    }];
    std::fs::write(
        a.out.join("sweep.svg"),
        viz::line_chart("EPE vs refinement iterations", "iterations", "EPE [px]", &series),
    )
    .context("writing sweep.svg")?;
    for (n, e) in &rows {
        println!("N={n}: EPE {e:.4}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// profile
// ---------------------------------------------------------------------------

fn parse_resolutions(text: &str) -> Result<Vec<(usize, usize)>, CliError> {
    text.split(',')
        .map(|t| {
            let (w, h) = t
                .trim()
                .split_once('x')
                .ok_or_else(|| user_err(format!("bad resolution '{t}', expected WxH")))?;
            let w: usize = w.parse().map_err(|_| user_err(format!("bad width in '{t}'")))?;
            let h: usize = h.parse().map_err(|_| user_err(format!("bad height in '{t}'")))?;
            if w % 8 != 0 || h % 8 != 0 {
                return Err(user_err(format!("resolution {t} must be divisible by 8")));
            }
            Ok((h, w))
        })
        .collect()
}

fn cmd_profile(a: ProfileArgs) -> Result<(), CliError> {
    let backbone: Backbone =
        a.backbone.parse().map_err(|e: recover::netblocks::ConfigError| user_err(e.to_string()))?;
    let mode = match a.mode.as_str() {
        "active" => CostVolumeMode::Active,
        "removed" => CostVolumeMode::Removed,
        other => return Err(user_err(format!("mode must be active or removed, got {other}"))),
    };
    let resolutions = parse_resolutions(&a.resolutions)?;
    let cfg = ModelConfig { backbone, mode, iterations: a.iters, ..ModelConfig::default() };
    cfg.validate().map_err(|e| user_err(e.to_string()))?;
    std::fs::create_dir_all(&a.out).context("creating output directory")?;

    let mut flop_series: Vec<viz::Series> = Vec::new();
    let mut mem_points = Vec::new();
    let mut component_labels: Vec<String> = Vec::new();

    for &(h, w) in &resolutions {
        let report = profile(&cfg, h, w);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).context("formatting profile csv")?;
        let path = a.out.join(format!("profile_{}x{}_{}.csv", w, h, mode_tag(&mode)));
        std::fs::write(&path, csv).context("writing profile csv")?;

        let mpix = (h * w) as f64 / 1e6;
        if component_labels.is_empty() {
            component_labels = report.rows.iter().map(|r| r.component.clone()).collect();
            for label in &component_labels {
                flop_series.push(viz::Series { label: label.clone(), points: Vec::new() });
            }
        }
        for (series, row) in flop_series.iter_mut().zip(&report.rows) {
            series.points.push((mpix, row.flops as f64));
        }
        mem_points.push((mpix, report.total_activation_bytes() as f64));
    }

    std::fs::write(
        a.out.join(format!("flops_{}.svg", mode_tag(&mode))),
        viz::stacked_area_chart(
            &format!("Cumulative FLOPs per component ({backbone}, {})", mode_tag(&mode)),
            "input megapixels",
            "FLOPs",
            &flop_series,
        ),
    )
    .context("writing flops svg")?;
    std::fs::write(
        a.out.join(format!("memory_{}.svg", mode_tag(&mode))),
        viz::line_chart(
            &format!("Activation bytes vs resolution ({backbone}, {})", mode_tag(&mode)),
            "input megapixels",
            "bytes",
            &[viz::Series { label: "activations".into(), points: mem_points }],
        ),
    )
    .context("writing memory svg")?;
    println!(
        "profiled {} resolutions for {backbone}/{}; reports in {}",
        resolutions.len(),
        mode_tag(&mode),
        a.out.display()
    );
    Ok(())
}

fn mode_tag(mode: &CostVolumeMode) -> &'static str {
    match mode {
        CostVolumeMode::Active => "active",
        CostVolumeMode::Fading { .. } => "fading",
        CostVolumeMode::Removed => "removed",
    }
}

// ---------------------------------------------------------------------------
// export-data
// ---------------------------------------------------------------------------

fn cmd_export_data(a: ExportArgs) -> Result<(), CliError> {
    let recipe = recipe_or_err(&a.recipe)?;
    std::fs::create_dir_all(&a.out).context("creating output directory")?;
    for idx in a.start_index..a.start_index + a.count {
        let s = generate(&recipe, idx);
        let dir = a.out.join(format!("sample{idx:05}"));
        std::fs::create_dir_all(&dir).context("creating sample directory")?;
        let io = |e: recover::flowio::FlowIoError| user_err(e.to_string());
        write_png(&s.frame1, dir.join("frame1.png")).map_err(io)?;
        write_png(&s.frame2, dir.join("frame2.png")).map_err(io)?;
        write_flo(&s.gt_flow, dir.join("flow.flo")).map_err(io)?;
        let (h, w) = s.dims();
        write_mask_png(&s.occlusion, h, w, dir.join("occlusion.png")).map_err(io)?;
        write_mask_png(&s.rigid, h, w, dir.join("rigid.png")).map_err(io)?;
        write_png(&flow_to_color(&s.gt_flow, None), dir.join("flow_vis.png")).map_err(io)?;
    }
    println!("wrote {} samples of {} to {}", a.count, recipe.name, a.out.display());
    Ok(())
}
