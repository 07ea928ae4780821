//! Command-line harness: synthetic data, calibration, staged training,
//! evaluation, the round-to-nearest baseline and run reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use stagequant::config::RunConfig;
use stagequant::container::{size_report, write_atomic, Container};
use stagequant::data::{generate_dataset, Batch, SyntheticTask};
use stagequant::model::{Module, ToyVlm};
use stagequant::quant::QuantSpec;
use stagequant::trainer::{
    calibrate_language, gradient_monitor, pretrain, rtn_quantize, run_pipeline,
    stage1_quantize_vision, PipelineState, PlanMode, TrainReport,
};

const CONFIG_FILE: &str = "config.json";
const TEACHER_FILE: &str = "teacher.spdq";
const MODEL_FILE: &str = "model.spdq";
const RTN_FILE: &str = "rtn.spdq";
const STEPS_FILE: &str = "steps.jsonl";
const SUMMARY_FILE: &str = "summary.json";
const CALIBRATION_FILE: &str = "calibration.json";
const GRADIENTS_FILE: &str = "gradients.csv";
const DATASET_FILE: &str = "dataset.json";

#[derive(Parser)]
#[command(
    name = "stagequant",
    version,
    about = "Staged 2-bit quantization of a toy vision-language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic train/eval dataset as JSON.
    GenData(Common),
    /// Pretrains a teacher, then dumps vision and language calibration results.
    Calibrate(TeacherArgs),
    /// Runs the staged (or joint) pipeline and writes a full run directory.
    Train(TeacherArgs),
    /// Top-1 eval accuracy of a stored container.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Container to evaluate.
        #[arg(long)]
        model: PathBuf,
    },
    /// Quantizes every layer with nearest rounding, no clipping and no training.
    QuantizeRtn {
        #[command(flatten)]
        teacher: TeacherArgs,
        #[arg(long, value_enum, default_value_t = Baseline::Rtn)]
        baseline: Baseline,
    },
    /// Prints the summary of a run directory with container sizes.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Rtn,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanArg {
    Staged,
    Joint,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weight bit-width for both towers.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=8))]
    bits: Option<u8>,
    /// Weights per first-level group.
    #[arg(long)]
    group: Option<usize>,
    /// Bit-width of the quantized scales; 0 stores scales as f16.
    #[arg(long)]
    scale_bits: Option<u8>,
    /// First-level scales per second-level group.
    #[arg(long)]
    scale_group: Option<usize>,
    #[arg(long, value_enum)]
    stage_plan: Option<PlanArg>,
}

#[derive(Args, Clone)]
struct TeacherArgs {
    #[command(flatten)]
    common: Common,
    /// Full-precision teacher container; pretrained from the config when omitted.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

fn override_spec(mut spec: QuantSpec, c: &Common) -> QuantSpec {
    if let Some(b) = c.bits {
        spec.bits = b;
    }
    if let Some(g) = c.group {
        spec.group_size = g;
    }
    match c.scale_bits {
        Some(0) => {
            spec.scale_bits = None;
            spec.scale_group_size = None;
        }
        Some(b) => {
            spec.scale_bits = Some(b);
            spec.scale_group_size.get_or_insert(16);
        }
        None => {}
    }
    if let Some(g) = c.scale_group {
        if spec.scale_bits.is_some() {
            spec.scale_group_size = Some(g);
        }
    }
    spec
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(mode) = c.stage_plan {
        let mode = match mode {
            PlanArg::Staged => PlanMode::Staged,
            PlanArg::Joint => PlanMode::Joint,
        };
        if mode != cfg.plan.mode {
            cfg = cfg.with_mode(mode);
        }
    }
    cfg.plan.vision_spec = override_spec(cfg.plan.vision_spec, c);
    cfg.plan.language_spec = override_spec(cfg.plan.language_spec, c);
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write_text(&cfg.out_dir.join(CONFIG_FILE), &cfg.to_json())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(v)?)
}

fn load_model(path: &Path) -> Result<ToyVlm> {
    let c = Container::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(c.to_model()?)
}

fn teacher(cfg: &RunConfig, task: &SyntheticTask, from: Option<&Path>) -> Result<ToyVlm> {
    match from {
        Some(p) => {
            let m = load_model(p)?;
            if m.config != cfg.model {
                bail!(
                    "teacher {} does not match the configured model dimensions",
                    p.display()
                );
            }
            Ok(m)
        }
        None => {
            let m = pretrain(&cfg.model, &task.train, &cfg.pretrain, cfg.seed)?;
            Container::from_model(&m).save(&cfg.out_dir.join(TEACHER_FILE))?;
            Ok(m)
        }
    }
}

fn batch_json(b: &Batch) -> Value {
    let d = b.image_dim();
    let images: Vec<&[f32]> = b.images.data().chunks(d.max(1)).collect();
    json!({ "images": images, "tokens": b.tokens, "labels": b.labels, "patterns": b.patterns })
}

fn gradients_csv(report: &TrainReport) -> String {
    let series = gradient_monitor(report);
    let mut out = String::from("step");
    for m in Module::ALL {
        out.push(',');
        out.push_str(m.name());
    }
    out.push('\n');
    for (i, s) in report.steps.iter().enumerate() {
        out.push_str(&s.step.to_string());
        for m in Module::ALL {
            out.push_str(&format!(",{:e}", series[&m][i]));
        }
        out.push('\n');
    }
    out
}

fn cmd_gen_data(c: &Common) -> Result<()> {
    let cfg = resolve_config(c)?;
    prepare_out(&cfg)?;
    let task = generate_dataset(&cfg.task, cfg.seed)?;
    let path = cfg.out_dir.join(DATASET_FILE);
    write_json(
        &path,
        &json!({
            "seed": cfg.seed,
            "task": task.config,
            "label_table": task.label_table,
            "prototypes": task.prototypes,
            "train": batch_json(&task.train),
            "eval": batch_json(&task.eval),
        }),
    )?;
    println!(
        "{}",
        json!({ "dataset": path, "train": task.train.len(), "eval": task.eval.len() })
    );
    Ok(())
}

fn cmd_calibrate(a: &TeacherArgs) -> Result<()> {
    let cfg = resolve_config(&a.common)?;
    prepare_out(&cfg)?;
    let task = generate_dataset(&cfg.task, cfg.seed)?;
    let fp = teacher(&cfg, &task, a.teacher.as_deref())?;
    let calib = task.train.head(cfg.plan.calibration_samples);
    let mut state = PipelineState::new(&fp);
    let plan = &cfg.plan;
    let vision = stage1_quantize_vision(
        &mut state,
        &calib,
        &plan.vision_spec,
        plan.clip_grid_steps,
        &plan.adaround,
    )?;
    let language = calibrate_language(
        &mut state,
        &calib,
        &plan.language_spec,
        plan.clip_grid_steps,
    )?;
    let dump = json!({ "vision": vision, "language": language });
    write_json(&cfg.out_dir.join(CALIBRATION_FILE), &dump)?;
    println!("{}", serde_json::to_string_pretty(&dump)?);
    Ok(())
}

fn cmd_train(a: &TeacherArgs) -> Result<()> {
    let cfg = resolve_config(&a.common)?;
    prepare_out(&cfg)?;
    let task = generate_dataset(&cfg.task, cfg.seed)?;
    let fp = teacher(&cfg, &task, a.teacher.as_deref())?;
    let out = run_pipeline(&cfg.plan, &task, &fp, cfg.seed)?;
    let model_path = cfg.out_dir.join(MODEL_FILE);
    out.container.save(&model_path)?;
    let mut report = out.report;
    report.container_path = Some(model_path.display().to_string());
    report.container_bytes = Some(std::fs::metadata(&model_path)?.len());
    report.steps.retain(|s| s.step % cfg.log_every == 0);

    let mut steps = Vec::new();
    report.write_steps_jsonl(&mut steps)?;
    write_atomic(&cfg.out_dir.join(STEPS_FILE), &steps)?;
    write_text(&cfg.out_dir.join(GRADIENTS_FILE), &gradients_csv(&report))?;
    let calibration: Vec<_> = report
        .stages
        .iter()
        .flat_map(|s| s.calibration.iter())
        .collect();
    write_json(&cfg.out_dir.join(CALIBRATION_FILE), &json!(calibration))?;
    let summary = report.summary();
    write_json(&cfg.out_dir.join(SUMMARY_FILE), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_eval(c: &Common, model: &Path) -> Result<()> {
    let cfg = resolve_config(c)?;
    let task = generate_dataset(&cfg.task, cfg.seed)?;
    let m = load_model(model)?;
    let accuracy = m.accuracy(&task.eval)?;
    println!(
        "{}",
        json!({ "model": model, "eval_samples": task.eval.len(), "accuracy": accuracy })
    );
    Ok(())
}

fn cmd_quantize_rtn(a: &TeacherArgs) -> Result<()> {
    let cfg = resolve_config(&a.common)?;
    prepare_out(&cfg)?;
    let task = generate_dataset(&cfg.task, cfg.seed)?;
    let fp = teacher(&cfg, &task, a.teacher.as_deref())?;
    let spec = cfg.plan.language_spec;
    let rtn = rtn_quantize(&fp, &spec)?;
    let path = cfg.out_dir.join(RTN_FILE);
    Container::from_model(&rtn).save(&path)?;
    let summary = json!({
        "baseline": "rtn",
        "spec": spec,
        "teacher_accuracy": fp.accuracy(&task.eval)?,
        "final_accuracy": rtn.accuracy(&task.eval)?,
        "average_bitwidth": spec.average_bitwidth(),
        "container_path": path,
        "container_bytes": std::fs::metadata(&path)?.len(),
    });
    write_json(&cfg.out_dir.join("rtn_summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_report(run: &Path) -> Result<()> {
    let mut containers = serde_json::Map::new();
    for name in [MODEL_FILE, RTN_FILE, TEACHER_FILE] {
        let path = run.join(name);
        if path.exists() {
            containers.insert(name.to_string(), serde_json::to_value(size_report(&path)?)?);
        }
    }
    let mut summary = serde_json::Map::new();
    for name in [SUMMARY_FILE, "rtn_summary.json"] {
        let path = run.join(name);
        if path.exists() {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            summary.insert(name.to_string(), serde_json::from_str(&text)?);
        }
    }
    if summary.is_empty() && containers.is_empty() {
        bail!("{} holds no run summary or container", run.display());
    }
    let out = json!({ "run": run, "summaries": summary, "containers": containers });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => cmd_gen_data(c),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval { common, model } => cmd_eval(common, model),
        Command::QuantizeRtn {
            teacher,
            baseline: Baseline::Rtn,
        } => cmd_quantize_rtn(teacher),
        Command::Report { run } => cmd_report(run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
