//! Command-line front end: `train`, `eval`, `infer`, `bench`, and
//! `make-data`. Every tunable resolves as command-line flag over config
//! file over built-in default, and each command prints the resolved
//! values before doing any work.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{self, generate_synthetic, Sample, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{benchmark_fps, evaluate, standard_iou_thresholds, write_report_json, write_report_table};
use crate::inference::{detect, write_detections_jsonl, DetectionRecord, InferenceConfig};
use crate::loss::FocalParams;
use crate::model::{BackboneConfig, BackboneKind, DetectorModel, ModelConfig};
use crate::tensor::load_checkpoint;
use crate::train::{read_checkpoint_meta, train, TrainConfig};

pub const MANIFEST_FILE: &str = "model.manifest";

#[derive(Parser, Debug)]
#[command(name = "dfpn", about = "Single-shot aerial object detector", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a detector on a dataset directory
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset's ground truth
    Eval(EvalArgs),
    /// Run detection on images and dump JSON-lines results
    Infer(InferArgs),
    /// Measure inference throughput on synthetic frames
    Bench(BenchArgs),
    /// Generate a synthetic shape dataset
    MakeData(MakeDataArgs),
}

/// Tunables shared across subcommands. Every field is optional here;
/// [`Settings::resolve`] fills the gaps from the config file and the
/// built-in defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct CommonOpts {
    /// `key = value` config file (flags given on the command line win)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Focal loss weight α
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Focal loss exponent γ
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub score_threshold: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Candidates kept per pyramid level before NMS
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub max_detections: Option<usize>,
    #[arg(long)]
    pub reg_weight: Option<f64>,
    #[arg(long)]
    pub flip_probability: Option<f64>,
}

/// Fully resolved tunables.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub topk: usize,
    pub max_detections: usize,
    pub reg_weight: f64,
    pub flip_probability: f64,
}

impl Default for Settings {
    fn default() -> Settings {
        Settings {
            seed: 0,
            epochs: 10,
            lr: 0.01,
            alpha: 0.25,
            gamma: 2.0,
            score_threshold: 0.05,
            nms_iou: 0.5,
            topk: 1000,
            max_detections: 100,
            reg_weight: 1.0,
            flip_probability: 0.5,
        }
    }
}

fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {} is not `key = value`: {raw:?}", lineno + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.remove(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("bad value for {key}: {raw:?}"))),
    }
}

impl Settings {
    /// Merge, in priority order: explicit flags, then the config file (if
    /// any), then defaults. Unknown config-file keys are an error.
    pub fn resolve(opts: &CommonOpts) -> Result<Settings> {
        let text = match &opts.config {
            Some(path) => std::fs::read_to_string(path).map_err(Error::io(path))?,
            None => String::new(),
        };
        Settings::resolve_from_text(opts, &text)
    }

    pub fn resolve_from_text(opts: &CommonOpts, config_text: &str) -> Result<Settings> {
        let mut file = parse_config_text(config_text)?;
        let d = Settings::default();
        let s = Settings {
            seed: opts.seed.or(take(&mut file, "seed")?).unwrap_or(d.seed),
            epochs: opts.epochs.or(take(&mut file, "epochs")?).unwrap_or(d.epochs),
            lr: opts.lr.or(take(&mut file, "lr")?).unwrap_or(d.lr),
            alpha: opts.alpha.or(take(&mut file, "alpha")?).unwrap_or(d.alpha),
            gamma: opts.gamma.or(take(&mut file, "gamma")?).unwrap_or(d.gamma),
            score_threshold: opts
                .score_threshold
                .or(take(&mut file, "score_threshold")?)
                .unwrap_or(d.score_threshold),
            nms_iou: opts.nms_iou.or(take(&mut file, "nms_iou")?).unwrap_or(d.nms_iou),
            topk: opts.topk.or(take(&mut file, "topk")?).unwrap_or(d.topk),
            max_detections: opts
                .max_detections
                .or(take(&mut file, "max_detections")?)
                .unwrap_or(d.max_detections),
            reg_weight: opts.reg_weight.or(take(&mut file, "reg_weight")?).unwrap_or(d.reg_weight),
            flip_probability: opts
                .flip_probability
                .or(take(&mut file, "flip_probability")?)
                .unwrap_or(d.flip_probability),
        };
        if let Some(unknown) = file.keys().next() {
            return Err(Error::Config(format!("unknown config key: {unknown}")));
        }
        Ok(s)
    }

    pub fn banner(&self) -> String {
        format!(
            "resolved configuration:\n  seed             = {}\n  epochs           = {}\n  lr               = {}\n  alpha            = {}\n  gamma            = {}\n  score_threshold  = {}\n  nms_iou          = {}\n  topk             = {}\n  max_detections   = {}\n  reg_weight       = {}\n  flip_probability = {}",
            self.seed,
            self.epochs,
            self.lr,
            self.alpha,
            self.gamma,
            self.score_threshold,
            self.nms_iou,
            self.topk,
            self.max_detections,
            self.reg_weight,
            self.flip_probability
        )
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            score_threshold: self.score_threshold,
            per_level_topk: self.topk,
            nms_iou: self.nms_iou,
            max_detections: self.max_detections,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            seed: self.seed,
            focal: FocalParams::new(self.alpha, self.gamma)?,
            reg_weight: self.reg_weight,
            flip_probability: self.flip_probability,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    /// Dataset directory (PNG images plus annotations.jsonl)
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, manifest, and the loss log
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint (its epoch and weights are picked up)
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "tiny-plain")]
    pub backbone: String,
    #[arg(long, default_value_t = 2)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 64)]
    pub c_pyr: usize,
    #[arg(long, default_value_t = 4)]
    pub head_depth: usize,
    #[arg(long, default_value_t = 8)]
    pub min_head_stride: usize,
}

impl TrainArgs {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let kind = BackboneKind::parse(&self.backbone)?;
        let mut config = ModelConfig::tiny(kind, self.num_classes);
        config.backbone = BackboneConfig { kind, ..config.backbone };
        config.c_pyr = self.c_pyr;
        config.head_depth = self.head_depth;
        config.min_head_stride = self.min_head_stride;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    /// Checkpoint to evaluate
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest describing the model (defaults to model.manifest next to
    /// the checkpoint)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Dataset directory with ground truth
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the JSON report (the table always goes to stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Input image file (PNG or JPEG) or a directory of them; repeatable
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    /// Detections JSON-lines output path
    #[arg(long)]
    pub out: PathBuf,
    /// Also write box-overlay PNGs into this directory
    #[arg(long)]
    pub annotated_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    /// Where to write the JSON throughput report
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MakeDataArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 2)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 2)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 24)]
    pub min_size: usize,
    #[arg(long, default_value_t = 44)]
    pub max_size: usize,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
}

/// Rebuild a model from its manifest and load checkpoint weights,
/// refusing to proceed if the checkpoint was written for a different
/// architecture.
pub fn load_model(checkpoint: &Path, manifest: Option<&Path>) -> Result<DetectorModel> {
    let manifest_path = match manifest {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .map(|d| d.join(MANIFEST_FILE))
            .ok_or_else(|| Error::Config(format!("cannot locate manifest next to {}", checkpoint.display())))?,
    };
    let text = std::fs::read_to_string(&manifest_path).map_err(Error::io(&manifest_path))?;
    let config = ModelConfig::from_manifest(&text)?;
    let entries = load_checkpoint(checkpoint)?;
    let meta = read_checkpoint_meta(&entries);
    match meta.manifest_hash {
        Some(h) if h == config.manifest_hash() => {}
        Some(h) => {
            return Err(Error::ManifestMismatch(format!(
                "checkpoint {} was written for manifest hash {h:016x}, but {} hashes to {:016x}",
                checkpoint.display(),
                manifest_path.display(),
                config.manifest_hash()
            )))
        }
        None => {
            return Err(Error::ManifestMismatch(format!(
                "checkpoint {} carries no manifest hash",
                checkpoint.display()
            )))
        }
    }
    let model = DetectorModel::new(config, 0)?;
    model.load_state(&entries)?;
    Ok(model)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Infer(args) => run_infer(args),
        Command::Bench(args) => run_bench(args),
        Command::MakeData(args) => run_make_data(args),
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let settings = Settings::resolve(&args.common)?;
    println!("{}", settings.banner());
    let samples = data::load_dataset(&args.data)?;
    log::info!("loaded {} training images from {}", samples.len(), args.data.display());

    std::fs::create_dir_all(&args.out).map_err(Error::io(&args.out))?;
    let (model, start_epoch) = match &args.resume {
        None => {
            let config = args.model_config()?;
            std::fs::write(args.out.join(MANIFEST_FILE), config.manifest())
                .map_err(Error::io(args.out.join(MANIFEST_FILE)))?;
            (DetectorModel::new(config, settings.seed)?, 0)
        }
        Some(ckpt) => {
            let config = args.model_config()?;
            let entries = load_checkpoint(ckpt)?;
            let meta = read_checkpoint_meta(&entries);
            if meta.manifest_hash != Some(config.manifest_hash()) {
                return Err(Error::ManifestMismatch(format!(
                    "resume checkpoint {} does not match the requested model configuration",
                    ckpt.display()
                )));
            }
            let model = DetectorModel::new(config.clone(), settings.seed)?;
            model.load_state(&entries)?;
            std::fs::write(args.out.join(MANIFEST_FILE), config.manifest())
                .map_err(Error::io(args.out.join(MANIFEST_FILE)))?;
            let epoch = meta
                .epoch
                .ok_or_else(|| Error::Checkpoint("resume checkpoint has no epoch record".into()))?;
            log::info!("resuming after epoch {epoch} from {}", ckpt.display());
            (model, epoch)
        }
    };

    let outcome = train(&model, &samples, &settings.train_config()?, &args.out, start_epoch)?;
    println!(
        "trained {} epochs; final checkpoint {}; loss log {}",
        outcome.epochs_run,
        outcome.final_checkpoint.display(),
        outcome.log_path.display()
    );
    Ok(())
}

/// Detect over every sample, producing eval-ready records.
pub fn detect_dataset(
    model: &DetectorModel,
    samples: &[Sample],
    cfg: &InferenceConfig,
) -> Result<Vec<DetectionRecord>> {
    let mut records = Vec::new();
    for sample in samples {
        for det in detect(model, &sample.image, cfg)? {
            records.push(DetectionRecord::new(&sample.image_id, &det));
        }
    }
    Ok(records)
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let settings = Settings::resolve(&args.common)?;
    println!("{}", settings.banner());
    let model = load_model(&args.model, args.manifest.as_deref())?;
    let samples = data::load_dataset(&args.data)?;
    let records = detect_dataset(&model, &samples, &settings.inference_config())?;
    let annotations: Vec<_> = samples.iter().flat_map(|s| s.annotations.clone()).collect();
    let report = evaluate(&records, &annotations, &standard_iou_thresholds())?;
    let mut stdout = std::io::stdout();
    write_report_table(&mut stdout, &report).map_err(Error::io("stdout"))?;
    if let Some(out) = &args.out {
        let mut f = std::fs::File::create(out).map_err(Error::io(out))?;
        write_report_json(&mut f, &report)?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

/// Expand `--image` arguments: directories become their image files in
/// name order, plain paths pass through untouched.
fn expand_image_args(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for path in paths {
        if !path.is_dir() {
            files.push(path.clone());
            continue;
        }
        let mut found: Vec<_> = std::fs::read_dir(path)
            .map_err(Error::io(path))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(Error::io(path))?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        if found.is_empty() {
            return Err(Error::Dataset(format!("no images found in {}", path.display())));
        }
        found.sort();
        files.append(&mut found);
    }
    Ok(files)
}

fn run_infer(args: InferArgs) -> Result<()> {
    let settings = Settings::resolve(&args.common)?;
    println!("{}", settings.banner());
    let model = load_model(&args.model, args.manifest.as_deref())?;
    let cfg = settings.inference_config();
    if let Some(dir) = &args.annotated_dir {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(&args.out).map_err(Error::io(&args.out))?);
    for path in &expand_image_args(&args.image)? {
        let image_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("bad image file name: {}", path.display())))?
            .to_string();
        let img = data::images::load_image(path)?;
        let tensor = data::images::image_to_tensor(&img);
        let detections = detect(&model, &tensor, &cfg)?;
        write_detections_jsonl(&mut out, &image_id, &detections)?;
        println!("{image_id}: {} detections", detections.len());
        if let Some(dir) = &args.annotated_dir {
            let boxes: Vec<_> = detections.iter().map(|d| (d.bbox, d.class_id)).collect();
            data::images::annotate_and_save(&dir.join(format!("{image_id}.png")), &tensor, &boxes)?;
        }
    }
    out.flush().map_err(Error::io(&args.out))?;
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let settings = Settings::resolve(&args.common)?;
    println!("{}", settings.banner());
    let model = load_model(&args.model, args.manifest.as_deref())?;
    let cfg = settings.inference_config();
    // shrink the synthetic objects when the requested frame is smaller
    // than the default object sizes
    let defaults = SyntheticConfig::default();
    let max_object = defaults.max_object_size.min(args.image_size / 2).max(4);
    let frames = generate_synthetic(
        &SyntheticConfig {
            image_size: args.image_size,
            num_classes: model.config.num_classes.min(3).max(1),
            min_object_size: defaults.min_object_size.min(max_object),
            max_object_size: max_object,
            seed: settings.seed,
            ..defaults
        },
        args.warmup + args.frames,
    )?;
    let report = benchmark_fps(
        |i| detect(&model, &frames[i].image, &cfg).map(|_| ()),
        args.warmup,
        args.frames,
    )?;
    println!(
        "fps = {:.3} over {} frames ({} warmup, p50 {:.2} ms, p95 {:.2} ms)",
        report.fps, report.measured_frames, report.warmup_frames, report.p50_latency_ms, report.p95_latency_ms
    );
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(out, json + "\n").map_err(Error::io(out))?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn run_make_data(args: MakeDataArgs) -> Result<()> {
    let settings = Settings::resolve(&args.common)?;
    println!("{}", settings.banner());
    let cfg = SyntheticConfig {
        image_size: args.image_size,
        num_classes: args.num_classes,
        min_objects: args.min_objects,
        max_objects: args.max_objects,
        min_object_size: args.min_size,
        max_object_size: args.max_size,
        noise: args.noise,
        seed: settings.seed,
    };
    let samples = generate_synthetic(&cfg, args.count)?;
    data::save_dataset(&args.out, &samples)?;
    let total_boxes: usize = samples.iter().map(|s| s.annotations.len()).sum();
    println!(
        "wrote {} images ({} boxes) to {}",
        samples.len(),
        total_boxes,
        args.out.display()
    );
    Ok(())
}
