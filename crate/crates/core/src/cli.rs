//! The `tiss-kit` command line.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{emit_plots, export_feature_maps, similarity_profile, DEFAULT_SAMPLE_SIZE};
use crate::metrics::{evaluate, report};
use crate::model::{load_checkpoint, Checkpoint, Model, ModelConfig};
use crate::protocol::{
    generate_toy_dataset, load_dataset_dir, parse_schedule, remap_mask_seen, Dataset, Mode, TaskManifest,
    TaskSequence, ToySpec,
};
use crate::trainer::{
    checkpoint_path, resize_image, resize_mask, run_incremental, Method, RunContext, TrainConfig, TRAIN_LOG,
};
use crate::{io, Error, LabelGrid, Result, RgbImage};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TASK_MANIFEST: &str = "manifest.json";
pub const CACHE_ENV: &str = "TISS_KIT_CACHE";

#[derive(Debug, Parser)]
#[command(name = "tiss-kit", version, about = "Incremental semantic segmentation with transformer patch losses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic toy dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_images: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split a dataset into incremental steps and write a task manifest.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        /// `A-B`: A classes first, then B at a time.
        #[arg(long)]
        schedule: String,
        #[arg(long, default_value = "overlapped")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every step of a task manifest.
    Train {
        /// TOML or JSON run config (a previous run manifest also works).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite checkpoints and logs of an earlier run in `--out`.
        #[arg(long)]
        force: bool,
    },
    /// Compute per-class IoU and grouped mIoU of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Patch similarity profile across the steps of a run.
    Analyze {
        /// Directory holding `step{t}.ckpt` files.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_SIZE)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Channel-mean feature maps of one layer, one PNG per checkpoint.
    Featmaps {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Record id of the image; the first record by default.
        #[arg(long)]
        image: Option<String>,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Split { .. } => "split",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Analyze { .. } => "analyze",
            Command::Featmaps { .. } => "featmaps",
        }
    }
}

/// Training run settings as read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// TOML by default, JSON for `.json`. A JSON run manifest is accepted and
    /// its `resolved_config` is used.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let mut value: serde_json::Value = serde_json::from_str(&text)?;
            if let Some(inner) = value.get_mut("resolved_config") {
                value = inner.take();
            }
            Ok(serde_json::from_value(value)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_ref: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub resolved_config: serde_json::Value,
}

impl RunManifest {
    fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join(RUN_MANIFEST);
        let body = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 2,
        _ => 1,
    }
}

/// Uses `path` when it exists, otherwise looks it up under `$TISS_KIT_CACHE`.
pub fn resolve_dataset(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        return Ok(path.to_path_buf());
    }
    if let Some(cache) = std::env::var_os(CACHE_ENV) {
        let cached = Path::new(&cache).join(path);
        if cached.exists() {
            return Ok(cached);
        }
    }
    Err(Error::Data(format!(
        "dataset {} not found (also looked under ${CACHE_ENV})",
        path.display()
    )))
}

pub fn execute(cli: Cli) -> Result<()> {
    let command = cli.command.name();
    match cli.command {
        Command::Generate {
            out,
            n_images,
            image_size,
            classes,
            seed,
        } => {
            let spec = ToySpec {
                n_images,
                image_size,
                n_classes: classes,
                seed,
            };
            RunManifest {
                command: command.into(),
                config_ref: None,
                output_dir: out.clone(),
                seed,
                resolved_config: serde_json::to_value(spec)?,
            }
            .write()?;
            let records = generate_toy_dataset(&out, &spec)?;
            println!("wrote {} images with {classes} classes to {}", records.len(), out.display());
            Ok(())
        }
        Command::Split {
            dataset,
            schedule,
            mode,
            seed,
            out,
        } => {
            let root = resolve_dataset(&dataset)?;
            let data = load_dataset_dir(&root)?;
            let sizes = parse_schedule(&schedule, data.class_names.len())?;
            RunManifest {
                command: command.into(),
                config_ref: None,
                output_dir: out.clone(),
                seed,
                resolved_config: serde_json::json!({
                    "dataset": root,
                    "schedule": schedule,
                    "step_sizes": sizes,
                    "mode": mode,
                }),
            }
            .write()?;
            let manifest = TaskManifest::build(&data, sizes, mode, seed)?;
            let path = out.join(TASK_MANIFEST);
            manifest.save(&path)?;
            for s in &manifest.steps {
                println!("step {}: classes {:?}, {} images", s.step, s.new_classes, s.records.len());
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Train {
            config,
            manifest,
            method,
            seed,
            out,
            force,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            if out.is_some() {
                cfg.out = out;
            }
            if let Some(m) = method {
                cfg.train.method = m;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            train(cfg, config, force)
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => {
            let root = resolve_dataset(&dataset)?;
            RunManifest {
                command: command.into(),
                config_ref: None,
                output_dir: out.clone(),
                seed: 0,
                resolved_config: serde_json::json!({ "checkpoint": checkpoint, "dataset": root }),
            }
            .write()?;
            let ck = load_checkpoint(&checkpoint, None)?;
            let data = load_dataset_dir(&root)?;
            let seq = &ck.header.sequence;
            check_label_space(&data, seq)?;
            let step = ck.header.step_index;
            let samples = load_eval_samples(&data, seq, step, ck.header.model.image_size)?;
            let cm = evaluate(&ck.model, &samples)?;
            let rep = report(&cm, seq, step)?;
            let csv_path = out.join("metrics.csv");
            fs::write(&csv_path, rep.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
            let text = rep.to_text();
            let txt_path = out.join("metrics.txt");
            fs::write(&txt_path, &text).map_err(|e| Error::io(&txt_path, e))?;
            print!("{text}");
            Ok(())
        }
        Command::Analyze {
            run,
            dataset,
            sample,
            seed,
            out,
        } => {
            let root = resolve_dataset(&dataset)?;
            RunManifest {
                command: command.into(),
                config_ref: None,
                output_dir: out.clone(),
                seed,
                resolved_config: serde_json::json!({ "run": run, "dataset": root, "sample": sample }),
            }
            .write()?;
            let checkpoints = run_checkpoints(&run)?;
            let size = checkpoints[0].header.model.image_size;
            let data = load_dataset_dir(&root)?;
            let images = data
                .records
                .iter()
                .map(|r| Ok(resize_image(&io::read_rgb(&r.image_ref)?, (size, size))))
                .collect::<Result<Vec<_>>>()?;
            let models: Vec<Model<f32>> = checkpoints.into_iter().map(|c| c.model).collect();
            let profile = similarity_profile(&models, &images, sample, seed)?;
            for path in emit_plots(&profile, &out)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Featmaps {
            run,
            dataset,
            image,
            layer,
            out,
        } => {
            let root = resolve_dataset(&dataset)?;
            RunManifest {
                command: command.into(),
                config_ref: None,
                output_dir: out.clone(),
                seed: 0,
                resolved_config: serde_json::json!({ "run": run, "dataset": root, "image": image, "layer": layer }),
            }
            .write()?;
            let checkpoints = run_checkpoints(&run)?;
            let n_layers = checkpoints[0].header.model.n_layers;
            if layer == 0 || layer > n_layers {
                return Err(Error::Usage(format!("--layer {layer} outside 1..={n_layers}")));
            }
            let data = load_dataset_dir(&root)?;
            let record = match &image {
                Some(id) => data.records.iter().find(|r| &r.id == id),
                None => data.records.first(),
            }
            .ok_or_else(|| Error::Data(format!("no image {} in {}", image.as_deref().unwrap_or("at all"), root.display())))?;
            let size = checkpoints[0].header.model.image_size;
            let img = resize_image(&io::read_rgb(&record.image_ref)?, (size, size));
            for ck in &checkpoints {
                let path = export_feature_maps(&ck.model, &img, layer, ck.header.step_index, &out)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn train(cfg: RunConfig, config_ref: Option<PathBuf>, force: bool) -> Result<()> {
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Usage("train needs a task manifest (--manifest or `manifest` in --config)".into()))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Usage("train needs an output directory (--out or `out` in --config)".into()))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let manifest = TaskManifest::load(&manifest_path)?;
    let seq = manifest.sequence()?;
    let datasets = manifest.step_datasets()?;

    let existing: Vec<PathBuf> = (0..seq.n_steps())
        .map(|t| checkpoint_path(&out, t))
        .chain([out.join(TRAIN_LOG), out.join("results.json")])
        .filter(|p| p.exists())
        .collect();
    if !existing.is_empty() {
        if !force {
            return Err(Error::Usage(format!(
                "{} already holds a run ({}); pass --force to overwrite",
                out.display(),
                existing[0].display()
            )));
        }
        for p in existing {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }

    RunManifest {
        command: "train".into(),
        config_ref,
        output_dir: out.clone(),
        seed: cfg.train.seed,
        resolved_config: serde_json::to_value(&cfg)?,
    }
    .write()?;
    let ctx = RunContext {
        seq: &seq,
        model: &cfg.model,
        out_dir: &out,
    };
    let results = run_incremental(&ctx, &datasets, &cfg.train)?;
    for r in &results {
        let last = r.per_epoch_losses.last().expect("at least one epoch");
        println!(
            "step {}: final epoch loss {:.4}, {:.1}s -> {}",
            r.step_index,
            last.total,
            r.wall_time,
            r.checkpoint_ref.display()
        );
    }
    let path = out.join("results.json");
    fs::write(&path, serde_json::to_string_pretty(&results)? + "\n").map_err(|e| Error::io(&path, e))
}

fn check_label_space(data: &Dataset, seq: &TaskSequence) -> Result<()> {
    if data.class_names != seq.label_space.class_names() {
        return Err(Error::Metric(format!(
            "dataset classes {:?} do not match the checkpoint's label space {:?}",
            data.class_names,
            seq.label_space.class_names()
        )));
    }
    Ok(())
}

/// Images resized to the model input, masks restricted to classes seen
/// through `step`.
pub fn load_eval_samples(data: &Dataset, seq: &TaskSequence, step: usize, size: usize) -> Result<Vec<(RgbImage, LabelGrid)>> {
    data.records
        .iter()
        .map(|r| {
            let image = io::read_rgb(&r.image_ref)?;
            let mask = remap_mask_seen(&io::read_mask(&r.mask_ref)?, seq, step)?;
            Ok((resize_image(&image, (size, size)), resize_mask(&mask, (size, size))))
        })
        .collect()
}

/// Loads `step0.ckpt`, `step1.ckpt`, ... from a run directory.
pub fn run_checkpoints(run: &Path) -> Result<Vec<Checkpoint>> {
    let mut out = Vec::new();
    while checkpoint_path(run, out.len()).exists() {
        out.push(load_checkpoint(&checkpoint_path(run, out.len()), None)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no step checkpoints in {}", run.display())));
    }
    Ok(out)
}
