//! `surrogate`: curate STL models, render camera-sphere datasets, train and
//! evaluate the classifier, and answer image queries.
//!
//! Results go to stdout as one JSON line; progress goes to stderr.
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 runtime failure.

mod config;
mod fetch;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use config::Config;
use surrogate_core::dataset::{self, AugmentationPolicy, DatasetError, DatasetManifest, Part};
use surrogate_core::experiment::{self, ExperimentError, ExperimentPlan, Hyperparameters, RunResult};
use surrogate_core::image::Image;
use surrogate_core::mesh::{self, MeshError, ModelStatus};
use surrogate_core::nn::weights::{load_weights, save_weights};
use surrogate_core::nn::{build_alexnet_with, NnError, Preset};
use surrogate_core::render::{self, RenderConfig, RenderError};
use surrogate_core::retrieval::{self, ModelIndex, RetrievalError, ServeOptions};
use surrogate_core::shapes;

pub const WEIGHTS_FILE: &str = "weights.stwn";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_FILE: &str = "run.json";

#[derive(Parser)]
#[command(name = "surrogate", version, about = "Surrogate-model dataset generation, training and retrieval")]
struct Cli {
    /// Flat JSON config; keys match flag names with `_` for `-`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for splits, initialization, dropout and augmentation [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel workers for fetch and render [default: available cores].
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download the URLs listed one per line in a text file.
    Fetch {
        #[arg(long)]
        manifest: PathBuf,
        /// Download directory [default: corpus].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the built-in procedural shape catalog as binary STL files.
    Synth {
        /// Number of shapes [default: 5].
        #[arg(long)]
        count: Option<usize>,
        /// Output directory [default: corpus].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Curate a corpus of STL files and render every model from the camera sphere.
    Render {
        /// Directory searched recursively for STL files.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Camera-sphere step in degrees [default: 30].
        #[arg(long)]
        step: Option<u32>,
        /// Image side in pixels [default: 540].
        #[arg(long)]
        resolution: Option<usize>,
        /// One subdirectory per model is created here [default: renders].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a classifier on `<renders>/<class>/*.png`.
    Train {
        #[arg(long)]
        renders: Option<PathBuf>,
        /// `desk` or `full` [default: desk].
        #[arg(long)]
        preset: Option<String>,
        /// Use only the first N classes (lexicographic) [default: all].
        #[arg(long)]
        classes: Option<usize>,
        /// [default: 50 desk, 200 full]
        #[arg(long)]
        epochs: Option<usize>,
        /// [default: 1e-4 desk, 1e-6 full]
        #[arg(long)]
        learning_rate: Option<f64>,
        /// [default: 32]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Validation fraction per class [default: 0.3].
        #[arg(long)]
        val_frac: Option<f64>,
        /// Insert LRN after the first two desk convolutions.
        #[arg(long)]
        lrn: bool,
        /// Run directory for weights, manifest and reports [default: run].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one network per (step, class count) on `<renders>/<step>/<class>/`.
    Sweep {
        #[arg(long)]
        renders: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Comma-separated ascending class counts [default: 5,10,25].
        #[arg(long, value_delimiter = ',')]
        class_counts: Option<Vec<usize>>,
        /// Comma-separated degree steps [default: 30,60,90].
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<u32>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        val_frac: Option<f64>,
        /// Report directory [default: sweep].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate saved weights on the validation split of their training run.
    Eval {
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Dataset manifest [default: manifest.json next to the weights].
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Override the manifest's render root.
        #[arg(long)]
        renders: Option<PathBuf>,
    },
    /// Rank the models most likely to match an image.
    Query {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// Number of results [default: 5, capped at the class count].
        #[arg(long)]
        k: Option<usize>,
        /// Render root used for previews and source paths.
        #[arg(long)]
        renders: Option<PathBuf>,
    },
    /// Serve queries over HTTP until interrupted.
    Serve {
        #[arg(long)]
        weights: Option<PathBuf>,
        /// [default: 127.0.0.1:8080]
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        renders: Option<PathBuf>,
        /// Maximum request body in bytes [default: 16777216].
        #[arg(long)]
        body_limit: Option<usize>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Runtime(e) => e,
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

impl From<MeshError> for Failure {
    fn from(e: MeshError) -> Self {
        data(e)
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        data(e)
    }
}

impl From<RenderError> for Failure {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::BadStep(_) | RenderError::BadResolution(_) => usage(e),
            _ => runtime(e),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::BadPlan(_) => usage(e),
            ExperimentError::ClassMismatch { .. }
            | ExperimentError::InsufficientClasses { .. }
            | ExperimentError::Dataset(_) => data(e),
            _ => runtime(e),
        }
    }
}

impl From<RetrievalError> for Failure {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::BadK { .. } => usage(e),
            RetrievalError::Bind { .. } => runtime(e),
            _ => data(e),
        }
    }
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        match e {
            NnError::BadK { .. } => usage(e),
            _ => data(e),
        }
    }
}

type Outcome = Result<serde_json::Value, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

/// Settings resolved from flags, then the config file, then defaults.
struct Settings {
    config: Config,
    seed: u64,
    jobs: usize,
}

impl Settings {
    fn path(&self, flag: Option<PathBuf>, key: &Option<PathBuf>, default: &str) -> PathBuf {
        flag.or_else(|| key.clone()).unwrap_or_else(|| PathBuf::from(default))
    }

    fn preset(&self, flag: Option<String>) -> Result<Preset, Failure> {
        flag.or_else(|| self.config.preset.clone())
            .unwrap_or_else(|| "desk".into())
            .parse::<Preset>()
            .map_err(|e| usage(anyhow!(e)))
    }

    fn hyper(
        &self,
        preset: Preset,
        epochs: Option<usize>,
        learning_rate: Option<f64>,
        batch_size: Option<usize>,
    ) -> Hyperparameters {
        let base = Hyperparameters::for_preset(preset);
        let c = &self.config;
        Hyperparameters {
            batch_size: batch_size.or(c.batch_size).unwrap_or(base.batch_size),
            learning_rate: learning_rate.or(c.learning_rate).unwrap_or(base.learning_rate),
            epochs: epochs.or(c.epochs).unwrap_or(base.epochs),
            seed: self.seed,
        }
    }

    fn val_frac(&self, flag: Option<f64>) -> Result<f64, Failure> {
        let v = flag.or(self.config.val_frac).unwrap_or(dataset::DEFAULT_VAL_FRAC);
        if (0.0..1.0).contains(&v) {
            Ok(v)
        } else {
            Err(usage(anyhow!("val_frac must lie in [0, 1), got {v}")))
        }
    }

    fn weights(&self, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
        flag.or_else(|| self.config.weights.clone())
            .ok_or_else(|| usage(anyhow!("--weights is required")))
    }
}

fn run(cli: Cli) -> Outcome {
    let config = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("config {}", p.display())).map_err(usage)?,
        None => Config::default(),
    };
    let settings = Settings {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        jobs: cli
            .jobs
            .or(config.jobs)
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
            .max(1),
        config,
    };
    let s = &settings;
    match cli.command {
        Command::Fetch { manifest, out } => {
            let out = s.path(out, &s.config.corpus_dir, "corpus");
            let summary = fetch::fetch(&manifest, &out, s.jobs).map_err(data)?;
            Ok(serde_json::to_value(summary).expect("serializable"))
        }
        Command::Synth { count, out } => cmd_synth(s, count, out),
        Command::Render {
            corpus,
            step,
            resolution,
            out,
        } => cmd_render(s, corpus, step, resolution, out),
        Command::Train {
            renders,
            preset,
            classes,
            epochs,
            learning_rate,
            batch_size,
            val_frac,
            lrn,
            out,
        } => {
            let preset = s.preset(preset)?;
            let hyper = s.hyper(preset, epochs, learning_rate, batch_size);
            let opts = TrainArgs {
                renders: s.path(renders, &s.config.render_root, "renders"),
                preset,
                classes: classes.or(s.config.classes),
                hyper,
                val_frac: s.val_frac(val_frac)?,
                lrn: lrn || s.config.lrn.unwrap_or(false),
                out: s.path(out, &s.config.output_dir, "run"),
            };
            cmd_train(&opts)
        }
        Command::Sweep {
            renders,
            preset,
            class_counts,
            steps,
            epochs,
            learning_rate,
            batch_size,
            val_frac,
            out,
        } => {
            let preset = s.preset(preset)?;
            let plan = ExperimentPlan {
                class_counts: class_counts
                    .or_else(|| s.config.class_counts.clone())
                    .unwrap_or_else(|| vec![5, 10, 25]),
                degree_steps: steps
                    .or_else(|| s.config.degree_steps.clone())
                    .unwrap_or_else(|| vec![30, 60, 90]),
                preset,
                hyper: s.hyper(preset, epochs, learning_rate, batch_size),
                val_frac: s.val_frac(val_frac)?,
            };
            let renders = s.path(renders, &s.config.render_root, "renders");
            let out = s.path(out, &s.config.output_dir, "sweep");
            cmd_sweep(&plan, &renders, &out)
        }
        Command::Eval {
            weights,
            manifest,
            renders,
        } => cmd_eval(s, weights, manifest, renders),
        Command::Query {
            weights,
            image,
            k,
            renders,
        } => {
            let index = load_index(s, weights, renders)?;
            let img = Image::load(&image).map_err(data)?;
            let k = k.or(s.config.k).unwrap_or(retrieval::DEFAULT_K.min(index.models.len()));
            let result = retrieval::query(&index, &img, k)?;
            Ok(serde_json::to_value(result).expect("serializable"))
        }
        Command::Serve {
            weights,
            addr,
            renders,
            body_limit,
        } => {
            let index = Arc::new(load_index(s, weights, renders)?);
            let addr = addr
                .or_else(|| s.config.addr.clone())
                .unwrap_or_else(|| "127.0.0.1:8080".into());
            let options = ServeOptions {
                body_limit: body_limit.or(s.config.body_limit).unwrap_or(retrieval::DEFAULT_BODY_LIMIT),
                ..ServeOptions::default()
            };
            let handle = retrieval::serve(index, &addr, options)?;
            let line = json!({ "listening": format!("http://{}", handle.addr()) });
            println!("{line}");
            let _ = std::io::stdout().flush();
            handle.join();
            Ok(json!({ "stopped": true }))
        }
    }
}

fn load_index(s: &Settings, weights: Option<PathBuf>, renders: Option<PathBuf>) -> Result<ModelIndex, Failure> {
    let weights = s.weights(weights)?;
    let renders = renders.or_else(|| s.config.render_root.clone());
    Ok(ModelIndex::load(&weights, renders.as_deref())?)
}

fn cmd_synth(s: &Settings, count: Option<usize>, out: Option<PathBuf>) -> Outcome {
    let count = count.unwrap_or(5);
    let out = s.path(out, &s.config.corpus_dir, "corpus");
    std::fs::create_dir_all(&out).map_err(runtime)?;
    let mut files = Vec::new();
    for (name, m) in shapes::catalog(count) {
        let path = out.join(format!("{name}.stl"));
        std::fs::write(&path, mesh::write_binary_stl(&m)).map_err(runtime)?;
        files.push(path);
    }
    Ok(json!({ "written": files.len(), "out_dir": out, "files": files }))
}

#[derive(Serialize)]
struct ModelTiming {
    id: String,
    views: usize,
    seconds: f64,
    skipped: bool,
}

fn cmd_render(
    s: &Settings,
    corpus: Option<PathBuf>,
    step: Option<u32>,
    resolution: Option<usize>,
    out: Option<PathBuf>,
) -> Outcome {
    let corpus = corpus
        .or_else(|| s.config.corpus_dir.clone())
        .ok_or_else(|| usage(anyhow!("--corpus is required")))?;
    let out = s.path(out, &s.config.render_root, "renders");
    let config = RenderConfig {
        step: step.or(s.config.degree_step).unwrap_or(30),
        resolution: resolution.or(s.config.resolution).unwrap_or(540),
        ..RenderConfig::default()
    };
    config.validate()?;
    let started = Instant::now();
    let records = mesh::curate(&corpus)?;
    let corrupt = records.iter().filter(|r| r.status == ModelStatus::Corrupt).count();
    for r in records.iter().filter(|r| r.status == ModelStatus::Corrupt) {
        log::warn!("skipping corrupt model {}: {}", r.id, r.error.as_deref().unwrap_or("unknown error"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(s.jobs)
        .build()
        .map_err(runtime)?;
    let timings: Result<Vec<ModelTiming>, Failure> = pool.install(|| {
        records
            .par_iter()
            .filter(|r| r.status == ModelStatus::Ok)
            .map(|r| {
                let dir = out.join(&r.id);
                if render::is_rendered(&config, &dir) {
                    log::info!("{}: already rendered", r.id);
                    return Ok(ModelTiming {
                        id: r.id.clone(),
                        views: render::views_per_model(config.step)?,
                        seconds: 0.0,
                        skipped: true,
                    });
                }
                let bytes = std::fs::read(&r.source_path).map_err(data)?;
                let m = mesh::normalize(&mesh::parse_stl(&bytes)?)?;
                let manifest = render::render_model(&r.id, Some(Path::new(&r.source_path)), &m, &config, &dir)?;
                log::info!(
                    "{}: {} views in {:.3}s",
                    r.id,
                    manifest.files.len(),
                    manifest.render_seconds
                );
                Ok(ModelTiming {
                    id: r.id.clone(),
                    views: manifest.files.len(),
                    seconds: manifest.render_seconds,
                    skipped: false,
                })
            })
            .collect()
    });
    let timings = timings?;
    let rendered: Vec<&ModelTiming> = timings.iter().filter(|t| !t.skipped).collect();
    let total = started.elapsed().as_secs_f64();
    log::info!("rendered {} models in {total:.2}s", rendered.len());
    Ok(json!({
        "step": config.step,
        "resolution": config.resolution,
        "models": timings.len(),
        "rendered": rendered.len(),
        "skipped": timings.len() - rendered.len(),
        "corrupt": corrupt,
        "images": rendered.iter().map(|t| t.views).sum::<usize>(),
        "avg_seconds_per_model": if rendered.is_empty() { 0.0 } else {
            rendered.iter().map(|t| t.seconds).sum::<f64>() / rendered.len() as f64
        },
        "total_seconds": total,
        "per_model": timings,
        "out_dir": out,
    }))
}

struct TrainArgs {
    renders: PathBuf,
    preset: Preset,
    classes: Option<usize>,
    hyper: Hyperparameters,
    val_frac: f64,
    lrn: bool,
    out: PathBuf,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let bytes = serde_json::to_vec_pretty(value).map_err(runtime)?;
    std::fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn cmd_train(a: &TrainArgs) -> Outcome {
    let manifest = dataset::build_manifest(&a.renders, a.classes)?;
    if let Some(k) = a.classes {
        if manifest.classes.len() < k {
            return Err(data(anyhow!(
                "{} has {} classes, {k} requested",
                a.renders.display(),
                manifest.classes.len()
            )));
        }
    }
    let manifest = dataset::split(&manifest, a.val_frac, a.hyper.seed);
    let mut config = build_alexnet_with(manifest.classes.len(), a.preset, a.lrn)?;
    config.labels = manifest.classes.clone();
    std::fs::create_dir_all(&a.out).map_err(runtime)?;
    manifest.save(&a.out.join(MANIFEST_FILE))?;
    log::info!(
        "training {} classes, {} train / {} val images",
        manifest.classes.len(),
        manifest.entries(Part::Train).len(),
        manifest.entries(Part::Val).len()
    );
    let (net, mut result) = experiment::train_with(config, &manifest, &a.hyper, AugmentationPolicy::default(), |_| {})?;
    result.degree_step = render::read_manifest(&a.renders.join(&manifest.classes[0]))
        .map(|m| m.step)
        .unwrap_or(0);
    let weights = a.out.join(WEIGHTS_FILE);
    save_weights(&net, &weights).map_err(runtime)?;
    write_json(&a.out.join(RUN_FILE), &result)?;
    experiment::emit_report(std::slice::from_ref(&result), &a.out)?;
    if let Some(why) = &result.failed {
        return Err(runtime(anyhow!("training diverged: {why}")));
    }
    let last = result.last().expect("at least one epoch");
    Ok(json!({
        "weights": weights,
        "classes": result.class_count,
        "epochs": result.history.len(),
        "train_loss": last.train_loss,
        "val_loss": last.val_loss,
        "val_top1": last.val_top1,
        "val_top5": last.val_top5,
        "total_seconds": result.total_time,
        "avg_epoch_seconds": result.avg_epoch_time,
        "out_dir": a.out,
    }))
}

fn cmd_sweep(plan: &ExperimentPlan, renders: &Path, out: &Path) -> Outcome {
    let done: Mutex<Vec<RunResult>> = Mutex::new(Vec::new());
    let results = experiment::run_sweep(plan, renders, |r| {
        let mut done = done.lock().unwrap();
        done.push(r.clone());
        if let Err(e) = experiment::emit_report(&done, out) {
            log::warn!("cannot write partial report: {e}");
        }
    })?;
    experiment::emit_report(&results, out)?;
    write_json(&out.join("runs.json"), &results)?;
    let cells: Vec<_> = results
        .iter()
        .map(|r| {
            json!({
                "step": r.degree_step,
                "classes": r.class_count,
                "val_top1": r.last().map(|e| e.val_top1),
                "val_top5": r.last().map(|e| e.val_top5),
                "total_seconds": r.total_time,
                "failed": r.failed,
            })
        })
        .collect();
    Ok(json!({ "runs": cells, "out_dir": out }))
}

fn cmd_eval(s: &Settings, weights: Option<PathBuf>, manifest: Option<PathBuf>, renders: Option<PathBuf>) -> Outcome {
    let weights = s.weights(weights)?;
    let net = load_weights(&weights).map_err(data)?;
    let manifest_path = manifest.unwrap_or_else(|| {
        weights
            .parent()
            .map(|p| p.join(MANIFEST_FILE))
            .unwrap_or_else(|| PathBuf::from(MANIFEST_FILE))
    });
    let mut manifest = DatasetManifest::load(&manifest_path)?;
    if let Some(root) = renders.or_else(|| s.config.render_root.clone()) {
        manifest.root = root;
    }
    if net.config.labels != manifest.classes {
        return Err(data(anyhow!(
            "weights were trained on {:?} but the manifest lists {:?}",
            net.config.labels,
            manifest.classes
        )));
    }
    let eval = experiment::evaluate(&net, &manifest, Part::Val, 32)?;
    Ok(json!({
        "weights": weights,
        "samples": eval.samples,
        "val_loss": eval.loss,
        "val_top1": eval.top1,
        "val_top5": eval.top5,
    }))
}
