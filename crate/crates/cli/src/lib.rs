//! `sarnet` command-line interface.
//!
//! Exit codes: 0 on success, 1 when a check or invariant suite fails,
//! 2 on usage errors.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use sarnet_core::config::ModelConfig;
use sarnet_core::data::{generate_scene, ntf_write, save_annotations, save_detections, AnnotationRecord, DetectionRecord, SceneSpec};
use sarnet_core::error::Result;
use sarnet_core::gradsuite::{self, ModuleFilter};
use sarnet_core::head::{decode_boxes, nms};
use sarnet_core::metrics::evaluate;
use sarnet_core::model::{param_count, Detector};
use sarnet_core::tensor::{Mode, Shape, Tensor};
use sarnet_core::train::{load_checkpoint, save_checkpoint, train_loop, Dataset};

pub const NMS_IOU: f64 = 0.65;
pub const EVAL_CONF: f64 = 0.001;
pub const DISPLAY_CONF: f64 = 0.25;

#[derive(Parser)]
#[command(name = "sarnet", version, about = "Desk-scale SAR object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic SAR-like scenes (NTF images + annotations.jsonl).
    GenData(GenDataArgs),
    /// Run the f64 finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset: forward + decode + NMS + metrics.
    Eval(EvalArgs),
    /// Print parameter count and per-level output shapes for a config.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// One of: all, tensor, dam, neck, loss.
    #[arg(long, default_value = "all")]
    module: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    config: PathBuf,
    /// Reference input side length for the shape printout.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

/// Worker cap from `SARNET_THREADS` (default: available parallelism).
fn worker_cap() -> usize {
    std::env::var("SARNET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
}

fn gen_data(args: &GenDataArgs) -> Result<i32> {
    std::fs::create_dir_all(&args.out)
        .map_err(|e| sarnet_core::Error::io(args.out.display().to_string(), e))?;
    let spec = SceneSpec::for_size(args.size);
    spec.validate()?;
    let workers = worker_cap().min(args.count.max(1));
    // Each scene is generated from its own seed; workers hand back plain
    // pixel buffers (tensors are thread-confined) and results are merged in
    // seed order, so the fan-out is deterministic.
    let mut scenes: Vec<Option<(Vec<f32>, AnnotationRecord)>> = Vec::new();
    scenes.resize_with(args.count, || None);
    let spec_ref = &spec;
    let chunks: Vec<Vec<usize>> =
        (0..workers).map(|w| (w..args.count).step_by(workers).collect()).collect();
    let results: Vec<Vec<(usize, (Vec<f32>, AnnotationRecord))>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .into_iter()
                            .map(|i| {
                                let scene = generate_scene(args.seed + i as u64, spec_ref)
                                    .expect("validated spec");
                                (i, (scene.image.to_vec(), scene.annotation))
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
    for batch in results {
        for (i, scene) in batch {
            scenes[i] = Some(scene);
        }
    }
    let mut records = Vec::with_capacity(args.count);
    for (i, slot) in scenes.into_iter().enumerate() {
        let (pixels, mut annotation) = slot.expect("all scenes generated");
        let image = Tensor::from_vec(Shape([1, 1, args.size, args.size]), pixels)?;
        let name = format!("img_{i:05}.ntf");
        ntf_write(&image, &args.out.join(&name))?;
        annotation.image = name;
        records.push(annotation);
    }
    save_annotations(&records, &args.out.join("annotations.jsonl"))?;
    println!(
        "wrote {} scenes of size {} to {} (classes: {})",
        args.count,
        args.size,
        args.out.display(),
        SceneSpec::NUM_CLASSES
    );
    Ok(0)
}

fn gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let Some(filter) = ModuleFilter::parse(&args.module) else {
        eprintln!("unknown module `{}`; use all|tensor|dam|neck|loss", args.module);
        return Ok(2);
    };
    let entries = gradsuite::run(filter)?;
    let mut all_pass = true;
    for e in &entries {
        println!(
            "{:6} {:42} max_rel_err {:9.3e}  coords {:5}  {:6.2}s  {}",
            e.module,
            e.name,
            e.max_rel_err,
            e.coords,
            e.seconds,
            if e.pass { "PASS" } else { "FAIL" }
        );
        all_pass &= e.pass;
    }
    if matches!(filter, ModuleFilter::All) {
        let detected = gradsuite::negative_control()?;
        println!(
            "{:6} {:42} {}",
            "suite",
            "negative_control_scaled_analytic",
            if detected { "PASS (injected error detected)" } else { "FAIL" }
        );
        all_pass &= detected;
    }
    Ok(if all_pass { 0 } else { 1 })
}

fn train(args: &TrainArgs) -> Result<i32> {
    let cfg = ModelConfig::load(&args.config)?;
    let dataset = Dataset::<f32>::load(&args.data)?;
    if dataset.clamp_warnings > 0 {
        eprintln!("warning: clamped {} boxes to image bounds", dataset.clamp_warnings);
    }
    let (model, params) = Detector::<f32>::build(&cfg, cfg.train.seed)?;
    println!(
        "training: {} samples, {} params, {} epochs",
        dataset.samples.len(),
        params.param_count(),
        cfg.train.epochs
    );
    let result = train_loop(&model, &params, &dataset, &cfg)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| sarnet_core::Error::io(args.out.display().to_string(), e))?;
    save_checkpoint(&args.out, &cfg, &params, &result)?;
    let history_path = args.out.join("loss_history.json");
    std::fs::write(
        &history_path,
        serde_json::to_string_pretty(&result.loss_history).expect("serializable"),
    )
    .map_err(|e| sarnet_core::Error::io(history_path.display().to_string(), e))?;
    let first = result.loss_history.first().copied().unwrap_or(0.0);
    let last = result.loss_history.last().copied().unwrap_or(0.0);
    println!(
        "done: {} steps, loss {:.4} -> {:.4}, checkpoint in {}",
        result.steps,
        first,
        last,
        args.out.display()
    );
    Ok(0)
}

fn eval(args: &EvalArgs) -> Result<i32> {
    let ckpt = load_checkpoint::<f32>(&args.checkpoint)?;
    let dataset = Dataset::<f32>::load(&args.data)?;
    let records = run_inference(&ckpt.model, &dataset)?;
    let det_path = args
        .out
        .parent()
        .map(|p| p.join("detections.jsonl"))
        .unwrap_or_else(|| PathBuf::from("detections.jsonl"));
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| sarnet_core::Error::io(parent.display().to_string(), e))?;
        }
    }
    save_detections(&records, &det_path)?;
    let report = evaluate(
        &det_path,
        &args.data.join("annotations.jsonl"),
        ckpt.cfg.head.num_classes,
    )?;
    std::fs::write(
        &args.out,
        serde_json::to_string_pretty(&report).expect("serializable"),
    )
    .map_err(|e| sarnet_core::Error::io(args.out.display().to_string(), e))?;
    println!(
        "mAP50 {:.4}  best-F1 {:.4} (p {:.4}, r {:.4})  report -> {}",
        report.map50,
        report.f1,
        report.precision,
        report.recall,
        args.out.display()
    );
    Ok(0)
}

/// Forward + decode + NMS over a dataset in eval mode.
pub fn run_inference(
    model: &Detector<f32>,
    dataset: &Dataset<f32>,
) -> Result<Vec<DetectionRecord>> {
    let mut records = Vec::with_capacity(dataset.samples.len());
    for sample in &dataset.samples {
        let out = model.forward(&sample.image, Mode::Eval)?;
        let dets = decode_boxes(&out, dataset.image_hw, EVAL_CONF);
        let kept = nms(&dets[0], NMS_IOU);
        records.push(DetectionRecord { image: sample.name.clone(), boxes: kept });
    }
    Ok(records)
}

fn inspect(args: &InspectArgs) -> Result<i32> {
    let cfg = ModelConfig::load(&args.config)?;
    let count = param_count(&cfg)?;
    let (model, _params) = Detector::<f32>::build(&cfg, cfg.train.seed)?;
    if args.size == 0 || args.size % 32 != 0 {
        eprintln!("--size must be a positive multiple of 32");
        return Ok(2);
    }
    let img = Tensor::<f32>::zeros(Shape([1, 1, args.size, args.size]));
    let out = model.forward(&img, Mode::Eval)?;
    println!("parameters: {count}");
    println!("input: (1,1,{0},{0})", args.size);
    for (i, level) in out.levels.iter().enumerate() {
        println!(
            "level {i} (stride {:2}): cls {}  reg {}",
            level.stride,
            level.cls.shape(),
            level.reg.shape()
        );
    }
    Ok(0)
}

/// Parses `argv` and runs one subcommand, mapping every failure to the
/// documented exit codes.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/help text; --help and --version are
            // successful exits.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Inspect(args) => inspect(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
