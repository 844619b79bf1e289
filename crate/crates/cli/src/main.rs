use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use contracon::adapter::count_task_params;
use contracon::checkpoint::{load_backbone, save_adapter, save_backbone, scan_adapters};
use contracon::inference::{classify, classify_known_task, TaskClassifier};
use contracon::train::{evaluate, task_models, train_base_logged, train_task_logged, EpochStats, EvalMode, TaskData};
use contracon::{Backbone, Error, RunConfig, TaskAdapter, Tensor};

#[derive(Parser)]
#[command(name = "contracon", version, about = "Continual learning with convolution-adapted compact transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and freeze the backbone on task 1.
    TrainBase {
        #[arg(long)]
        config: PathBuf,
        /// Data directory; not needed for synthetic data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the adapter for one later task.
    TrainTask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        task_id: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy matrix after every stage, in TIL or CIL mode.
    Eval {
        #[arg(long)]
        mode: EvalMode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Tasks to evaluate; defaults to every task in the config.
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Classify one PNG image.
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "cil")]
        mode: EvalMode,
        /// Required in TIL mode.
        #[arg(long)]
        task_id: Option<usize>,
    },
    /// Per-task adapter parameter count.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Io { .. } => 2,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> contracon::Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn log_epoch(label: String) -> impl FnMut(&EpochStats) {
    move |e| {
        eprintln!(
            "{label} epoch {} loss {:.4} acc {:.3} lr {:.2e}",
            e.epoch, e.loss, e.accuracy, e.lr
        )
    }
}

fn run(command: Command) -> contracon::Result<()> {
    match command {
        Command::TrainBase { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let (train, _, split) = cfg.load_split(data.as_deref())?;
            let classes = split.task_classes(1)?.to_vec();
            let mut backbone = Backbone::new(cfg.model_config(classes.len())?, classes, cfg.seed)?;
            let td = TaskData {
                dataset: &train,
                indices: &split.train[0],
                classes: &split.classes[0],
            };
            train_base_logged(&mut backbone, td, &cfg.train_config(), &mut log_epoch("task 1".into()))?;
            save_backbone(&backbone, &out)?;
            println!("saved base model to {}", out.display());
        }
        Command::TrainTask {
            config,
            base,
            task_id,
            data,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            if task_id < 2 {
                return Err(Error::Usage(format!("--task-id must be at least 2, got {task_id}; task 1 is train-base")));
            }
            let backbone = load_backbone(&base)?;
            let (train, _, split) = cfg.load_split(data.as_deref())?;
            let classes = split.task_classes(task_id)?.to_vec();
            let seed = cfg.seed.wrapping_add(task_id as u64);
            let mut adapter = TaskAdapter::init(&backbone, task_id, classes, cfg.kernel_size, cfg.gate_mode, seed)?;
            let td = TaskData {
                dataset: &train,
                indices: &split.train[task_id - 1],
                classes: &split.classes[task_id - 1],
            };
            train_task_logged(&backbone, &mut adapter, td, &cfg.train_config(), &mut log_epoch(format!("task {task_id}")))?;
            save_adapter(&adapter, &out)?;
            println!("saved task {task_id} adapter to {}", out.display());
        }
        Command::Eval {
            mode,
            config,
            base,
            adapters,
            data,
            tasks,
            report,
        } => {
            let cfg = load_config(config.as_deref())?;
            let tasks = tasks.unwrap_or(cfg.num_tasks);
            let backbone = load_backbone(&base)?;
            let adapters = match (adapters, tasks) {
                (_, 0) => return Err(Error::Usage("--tasks must be at least 1".into())),
                (None, 1) => Vec::new(),
                (None, t) => return Err(Error::Usage(format!("evaluating {t} tasks needs --adapters"))),
                (Some(dir), t) => {
                    let mut all = scan_adapters(&dir, &backbone)?;
                    all.retain(|a| a.task_id <= t);
                    if all.len() + 1 < t {
                        return Err(Error::Usage(format!(
                            "{} holds {} adapters, {t} tasks need {}",
                            dir.display(),
                            all.len(),
                            t - 1
                        )));
                    }
                    all
                }
            };
            let (_, test, split) = cfg.load_split(data.as_deref())?;
            let models = task_models(&backbone, &adapters)?;
            let result = evaluate(&models, &split, &test, mode, &cfg.inference_config())?;
            result.write(&report)?;
            print!("{}", result.to_text());
        }
        Command::Predict {
            config,
            base,
            adapters,
            image,
            mode,
            task_id,
        } => {
            let cfg = load_config(config.as_deref())?;
            let backbone = load_backbone(&base)?;
            let adapters = match adapters {
                Some(dir) => scan_adapters(&dir, &backbone)?,
                None => Vec::new(),
            };
            let models = task_models(&backbone, &adapters)?;
            let img = read_png(&image, &backbone)?;
            let (task, class) = match mode {
                EvalMode::Cil => {
                    let dyn_models: Vec<&dyn TaskClassifier> = models.iter().map(|m| m as &dyn TaskClassifier).collect();
                    classify(&img, &dyn_models, &cfg.inference_config())?
                }
                EvalMode::Til => {
                    let t = task_id.ok_or_else(|| Error::Usage("--mode til needs --task-id".into()))?;
                    let model = models
                        .get(t.wrapping_sub(1))
                        .ok_or_else(|| Error::Usage(format!("no model for task {t}")))?;
                    (t, classify_known_task(&img, model)?)
                }
            };
            println!("task={task} class={class}");
        }
        Command::Params { config } => {
            let cfg = RunConfig::load(&config)?;
            let classes = cfg.classes_per_task()?;
            let ledger = count_task_params(&cfg.model_config(classes)?, cfg.kernel_size, classes);
            println!("classes per task {classes}");
            println!("{ledger}");
        }
    }
    Ok(())
}

/// Load a PNG as a `C × H × W` tensor in `[0, 1]` matching the backbone input.
fn read_png(path: &Path, backbone: &Backbone<f32>) -> contracon::Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Data(format!("{}: {other}", path.display())),
    })?;
    let shape = backbone.config.image;
    if (img.height() as usize, img.width() as usize) != (shape.height, shape.width) {
        return Err(Error::ConfigMismatch(format!(
            "image is {}x{}, model expects {}x{}",
            img.height(),
            img.width(),
            shape.height,
            shape.width
        )));
    }
    let (c, plane) = (shape.channels, shape.height * shape.width);
    let pixels: Vec<u8> = match c {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        n => return Err(Error::ConfigMismatch(format!("cannot read a {n}-channel model input from PNG"))),
    };
    // interleaved HWC to planar CHW
    Ok(Tensor::from_fn([c, shape.height, shape.width], |i| {
        let (ch, p) = (i / plane, i % plane);
        pixels[p * c + ch] as f32 / 255.0
    }))
}
