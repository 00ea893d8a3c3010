//! Training runs, accuracy metrics, class-count × view-step sweeps and
//! their CSV/SVG reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, AugmentationPolicy, DatasetError, DatasetManifest, Part, StreamConfig};
use crate::nn::layers::softmax_cross_entropy;
use crate::nn::{build_alexnet, rank_of, AdamState, Mode, Network, NetworkConfig, NnError, Preset, Tensor};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("network has {network} classes but the dataset has {dataset}")]
    ClassMismatch { network: usize, dataset: usize },
    #[error("{root} has {available} classes, the plan needs {required}")]
    InsufficientClasses {
        root: PathBuf,
        available: usize,
        required: usize,
    },
    #[error("invalid experiment plan: {0}")]
    BadPlan(String),
    #[error("no results to report")]
    NoResults,
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Hyperparameters {
    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self {
                batch_size: 32,
                learning_rate: 1e-6,
                epochs: 200,
                seed: 0,
            },
            Preset::Desk => Self {
                batch_size: 32,
                learning_rate: 1e-4,
                epochs: 50,
                seed: 0,
            },
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        if self.batch_size == 0 || self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(ExperimentError::BadPlan(format!(
                "batch size, epochs and learning rate must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    /// Optimizer steps taken this epoch.
    pub steps: usize,
    /// Seconds.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub class_count: usize,
    /// Camera-sphere step of the renders; 0 when not part of a sweep.
    pub degree_step: u32,
    pub history: Vec<EpochRecord>,
    pub total_time: f64,
    pub avg_epoch_time: f64,
    /// Divergence diagnostic when the run was aborted.
    pub failed: Option<String>,
}

impl RunResult {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.history.last()
    }
}

/// Fraction of rows of `N×C` logits whose label ranks within the top `k`,
/// ties going to the lower class index.
pub fn topk_accuracy(logits: &Tensor<f32>, labels: &[usize], k: usize) -> Result<f64, NnError> {
    let (n, c) = match *logits.shape() {
        [n, c] => (n, c),
        ref s => return Err(NnError::ShapeMismatch(format!("logits must be N×C, got {s:?}"))),
    };
    if k == 0 || k > c {
        return Err(NnError::BadK { k, classes: c });
    }
    if labels.len() != n {
        return Err(NnError::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(topk_hits(logits, labels, k)? as f64 / n as f64)
}

fn topk_hits(logits: &Tensor<f32>, labels: &[usize], k: usize) -> Result<usize, NnError> {
    let c = logits.shape()[1];
    let mut hits = 0;
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        if label >= c {
            return Err(NnError::BadLabel { label, classes: c });
        }
        if rank_of(row, label) < k {
            hits += 1;
        }
    }
    Ok(hits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub loss: f64,
    pub top1: f64,
    /// Top-min(5, classes).
    pub top5: f64,
}

/// Eval-mode loss and accuracy over one split, in manifest order.
pub fn evaluate(
    net: &Network<f32>,
    manifest: &DatasetManifest,
    part: Part,
    batch_size: usize,
) -> Result<Evaluation, ExperimentError> {
    let classes = net.config.num_classes;
    let mut cfg = StreamConfig::new(net.config.input.1);
    cfg.batch_size = batch_size;
    let (mut samples, mut loss, mut top1, mut top5) = (0, 0.0, 0, 0);
    for batch in dataset::batches(manifest, part, &cfg, 0)? {
        let batch = batch?;
        let logits = net.logits(&batch.tensors)?;
        let out = softmax_cross_entropy(&logits, &batch.labels)?;
        samples += batch.len();
        loss += out.loss as f64 * batch.len() as f64;
        top1 += topk_hits(&logits, &batch.labels, 1)?;
        top5 += topk_hits(&logits, &batch.labels, 5.min(classes))?;
    }
    let n = samples as f64;
    Ok(Evaluation {
        samples,
        loss: loss / n,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
    })
}

/// Loss growth beyond this multiple of the first batch loss aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Trains `config` on the train split of `manifest` with Adam, evaluating
/// the validation split after every epoch. Deterministic for a fixed seed.
/// A diverging run stops early and comes back with `failed` set.
pub fn train(
    config: NetworkConfig,
    manifest: &DatasetManifest,
    hyper: &Hyperparameters,
) -> Result<(Network<f32>, RunResult), ExperimentError> {
    train_with(config, manifest, hyper, AugmentationPolicy::default(), |_| {})
}

/// As [`train`], with an explicit augmentation policy (its seed is
/// replaced by one derived from `hyper.seed`) and a per-epoch callback.
pub fn train_with(
    config: NetworkConfig,
    manifest: &DatasetManifest,
    hyper: &Hyperparameters,
    policy: AugmentationPolicy,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Network<f32>, RunResult), ExperimentError> {
    hyper.validate()?;
    if config.num_classes != manifest.classes.len() {
        return Err(ExperimentError::ClassMismatch {
            network: config.num_classes,
            dataset: manifest.classes.len(),
        });
    }
    let start = Instant::now();
    let mut net = Network::init(config, hyper.seed)?;
    let mut adam = AdamState::new(&net.params, hyper.learning_rate);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    dropout_rng.set_stream(1);
    let stream = StreamConfig {
        batch_size: hyper.batch_size,
        side: net.config.input.1,
        shuffle: true,
        policy: AugmentationPolicy {
            seed: hyper.seed.wrapping_add(1),
            ..policy
        },
    };

    let mut result = RunResult {
        class_count: net.config.num_classes,
        degree_step: 0,
        history: Vec::new(),
        total_time: 0.0,
        avg_epoch_time: 0.0,
        failed: None,
    };
    let mut initial_loss: Option<f64> = None;
    'epochs: for epoch in 1..=hyper.epochs {
        let epoch_start = Instant::now();
        let (mut seen, mut loss_sum, mut hits, mut steps) = (0usize, 0.0, 0usize, 0usize);
        for batch in dataset::batches(manifest, Part::Train, &stream, epoch as u64)? {
            let batch = batch?;
            let (logits, trace) = net.forward(&batch.tensors, Mode::Train(&mut dropout_rng), true)?;
            let out = softmax_cross_entropy(&logits, &batch.labels)?;
            let loss = out.loss as f64;
            let reference = *initial_loss.get_or_insert(loss);
            if !loss.is_finite() || loss > DIVERGENCE_FACTOR * reference {
                result.failed = Some(format!(
                    "loss {loss} at epoch {epoch}, step {} exceeds {DIVERGENCE_FACTOR}× the initial {reference}",
                    steps + 1
                ));
                break 'epochs;
            }
            hits += topk_hits(&logits, &batch.labels, 1)?;
            let (grads, _) = net.backward(trace, &out.grad)?;
            adam.step(&mut net.params, &grads)?;
            steps += 1;
            seen += batch.len();
            loss_sum += loss * batch.len() as f64;
        }
        let val = evaluate(&net, manifest, Part::Val, hyper.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_top1: hits as f64 / seen as f64,
            val_loss: val.loss,
            val_top1: val.top1,
            val_top5: val.top5,
            steps,
            wall_time: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} top1 {:.3}, val loss {:.4} top1 {:.3} top5 {:.3}",
            record.train_loss,
            record.train_top1,
            record.val_loss,
            record.val_top1,
            record.val_top5
        );
        on_epoch(&record);
        result.history.push(record);
    }
    result.total_time = start.elapsed().as_secs_f64();
    if !result.history.is_empty() {
        result.avg_epoch_time =
            result.history.iter().map(|r| r.wall_time).sum::<f64>() / result.history.len() as f64;
    }
    Ok((net, result))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub class_counts: Vec<usize>,
    pub degree_steps: Vec<u32>,
    pub preset: Preset,
    pub hyper: Hyperparameters,
    pub val_frac: f64,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.class_counts.is_empty() || self.degree_steps.is_empty() {
            return Err(ExperimentError::BadPlan("class counts and steps must be non-empty".into()));
        }
        if self.class_counts.windows(2).any(|w| w[0] >= w[1]) || self.class_counts[0] == 0 {
            return Err(ExperimentError::BadPlan("class counts must be positive and ascending".into()));
        }
        for &step in &self.degree_steps {
            crate::render::check_step(step).map_err(|e| ExperimentError::BadPlan(e.to_string()))?;
        }
        self.hyper.validate()
    }
}

/// Directory holding the class folders for one step: `<render_root>/<step>`.
pub fn step_root(render_root: &Path, step: u32) -> PathBuf {
    render_root.join(step.to_string())
}

/// Trains one network per (step, class count) cell, on the first
/// `class_count` classes of `<render_root>/<step>/`. `on_result` sees each
/// result as it completes.
pub fn run_sweep(
    plan: &ExperimentPlan,
    render_root: &Path,
    mut on_result: impl FnMut(&RunResult),
) -> Result<Vec<RunResult>, ExperimentError> {
    plan.validate()?;
    let required = *plan.class_counts.last().unwrap();
    for &step in &plan.degree_steps {
        let root = step_root(render_root, step);
        let available = dataset::build_manifest(&root, None).map(|m| m.classes.len()).unwrap_or(0);
        if available < required {
            return Err(ExperimentError::InsufficientClasses {
                root,
                available,
                required,
            });
        }
    }
    let mut results = Vec::new();
    for &step in &plan.degree_steps {
        let root = step_root(render_root, step);
        for &k in &plan.class_counts {
            let manifest = dataset::build_manifest(&root, Some(k))?;
            let manifest = dataset::split(&manifest, plan.val_frac, plan.hyper.seed);
            let mut config = build_alexnet(k, plan.preset)?;
            config.labels = manifest.classes.clone();
            log::info!("sweep cell: step {step}, {k} classes");
            let (_, mut result) = train(config, &manifest, &plan.hyper)?;
            result.degree_step = step;
            on_result(&result);
            results.push(result);
        }
    }
    results.sort_by_key(|r| (r.degree_step, r.class_count));
    Ok(results)
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

pub fn chart_name(step: u32) -> String {
    format!("accuracy_{step}.svg")
}

fn write(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(|e| ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn metrics_csv(results: &[RunResult]) -> String {
    let mut out = String::from(
        "degree_step,class_count,epoch,train_loss,train_top1,val_loss,val_top1,val_top5,epoch_seconds\n",
    );
    for r in sorted(results) {
        for e in &r.history {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.6}",
                r.degree_step,
                r.class_count,
                e.epoch,
                e.train_loss,
                e.train_top1,
                e.val_loss,
                e.val_top1,
                e.val_top5,
                e.wall_time
            );
        }
    }
    out
}

/// One row per class count; a training-time and an average-epoch-time
/// column per step. Failed or missing cells are blank.
pub fn summary_csv(results: &[RunResult]) -> String {
    let steps: BTreeSet<u32> = results.iter().map(|r| r.degree_step).collect();
    let counts: BTreeSet<usize> = results.iter().map(|r| r.class_count).collect();
    let cells: BTreeMap<(usize, u32), &RunResult> =
        results.iter().map(|r| ((r.class_count, r.degree_step), r)).collect();
    let mut out = String::from("class_count");
    for s in &steps {
        let _ = write!(out, ",training_time_{s},avg_epoch_time_{s}");
    }
    out.push('\n');
    for &k in &counts {
        let _ = write!(out, "{k}");
        for &s in &steps {
            match cells.get(&(k, s)) {
                Some(r) if r.failed.is_none() => {
                    let _ = write!(out, ",{:.6},{:.6}", r.total_time, r.avg_epoch_time);
                }
                _ => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Final validation top-1 and top-5 against class count for one step.
pub fn accuracy_chart(results: &[RunResult], step: u32) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    let mut points: Vec<(usize, f64, f64)> = sorted(results)
        .into_iter()
        .filter(|r| r.degree_step == step && r.failed.is_none())
        .filter_map(|r| r.last().map(|e| (r.class_count, e.val_top1, e.val_top5)))
        .collect();
    points.sort_by_key(|p| p.0);
    let n = points.len();
    let x_of = |i: usize| {
        if n <= 1 {
            W / 2.0
        } else {
            M + i as f64 * (W - 2.0 * M) / (n - 1) as f64
        }
    };
    let y_of = |acc: f64| H - M - acc.clamp(0.0, 1.0) * (H - 2.0 * M);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">Validation accuracy, {step}° views</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<polyline points="{M},{M} {M},{} {},{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M,
        H - M
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = y_of(tick);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{tick}</text>"#,
            M - 6.0,
            y + 4.0
        );
    }
    for (i, p) in points.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x_of(i),
            H - M + 16.0,
            p.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">classes</text>"#,
        W / 2.0,
        H - 10.0
    );
    for (name, color, pick) in [
        ("top-1", "#1f77b4", 0usize),
        ("top-5", "#d62728", 1usize),
    ] {
        let coords: Vec<String> = points
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{:.2},{:.2}", x_of(i), y_of(if pick == 0 { p.1 } else { p.2 })))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"><title>{name}</title></polyline>"#,
            coords.join(" ")
        );
        let ly = M - 18.0 + pick as f64 * 14.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#,
            W - M - 40.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn sorted(results: &[RunResult]) -> Vec<&RunResult> {
    let mut v: Vec<&RunResult> = results.iter().collect();
    v.sort_by_key(|r| (r.degree_step, r.class_count));
    v
}

/// Writes the metrics CSV, the summary grid and one chart per step into
/// `out_dir`, returning the paths written.
pub fn emit_report(results: &[RunResult], out_dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    if results.is_empty() {
        return Err(ExperimentError::NoResults);
    }
    fs::create_dir_all(out_dir).map_err(|e| ExperimentError::Io {
        path: out_dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut written = Vec::new();
    let metrics = out_dir.join(METRICS_CSV);
    write(&metrics, &metrics_csv(results))?;
    written.push(metrics);
    let summary = out_dir.join(SUMMARY_CSV);
    write(&summary, &summary_csv(results))?;
    written.push(summary);
    let steps: BTreeSet<u32> = results.iter().map(|r| r.degree_step).collect();
    for step in steps {
        let path = out_dir.join(chart_name(step));
        write(&path, &accuracy_chart(results, step))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f32]]) -> Tensor<f32> {
        let c = rows[0].len();
        Tensor::from_vec(&[rows.len(), c], rows.concat()).unwrap()
    }

    #[test]
    fn topk_counts_ranks() {
        // Truth at ranks 1, 2 and 6 (one-based).
        let l = logits(&[
            &[9.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            &[8.0, 9.0, 2.0, 3.0, 4.0, 5.0],
            &[1.0, 9.0, 8.0, 7.0, 6.0, 5.0],
        ]);
        let labels = [0, 0, 0];
        assert!((topk_accuracy(&l, &labels, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((topk_accuracy(&l, &labels, 5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(topk_accuracy(&l, &labels, 6).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&l, &labels, 7), Err(NnError::BadK { k: 7, classes: 6 }));
        assert_eq!(topk_accuracy(&l, &labels, 0), Err(NnError::BadK { k: 0, classes: 6 }));
    }

    #[test]
    fn equal_logits_favor_class_zero() {
        let l = logits(&[&[0.5; 4], &[0.5; 4], &[0.5; 4], &[0.5; 4]]);
        assert_eq!(topk_accuracy(&l, &[0, 1, 0, 3], 1).unwrap(), 0.5);
    }

    fn result(step: u32, k: usize, epochs: usize, failed: bool) -> RunResult {
        let history: Vec<EpochRecord> = (1..=epochs)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 1.0 / e as f64,
                train_top1: 0.5,
                val_loss: 1.5 / e as f64,
                val_top1: 0.25,
                val_top5: 0.75,
                steps: 3,
                wall_time: 0.5,
            })
            .collect();
        RunResult {
            class_count: k,
            degree_step: step,
            total_time: 0.5 * epochs as f64 + 0.01,
            avg_epoch_time: 0.5,
            history,
            failed: failed.then(|| "diverged".to_string()),
        }
    }

    #[test]
    fn single_run_report() {
        let tmp = tempfile::tempdir().unwrap();
        let results = [result(60, 5, 4, false)];
        let files = emit_report(&results, tmp.path()).unwrap();
        assert_eq!(files.len(), 3);
        let metrics = fs::read_to_string(tmp.path().join(METRICS_CSV)).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 4);
        let summary = fs::read_to_string(tmp.path().join(SUMMARY_CSV)).unwrap();
        assert_eq!(
            summary,
            "class_count,training_time_60,avg_epoch_time_60\n5,2.010000,0.500000\n"
        );
        let before: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
        emit_report(&results, tmp.path()).unwrap();
        let after: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn summary_grid_has_table_shape() {
        let mut results = Vec::new();
        for step in [30, 90] {
            for k in [5, 10, 25] {
                results.push(result(step, k, 2, step == 90 && k == 25));
            }
        }
        let summary = summary_csv(&results);
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "class_count,training_time_30,avg_epoch_time_30,training_time_90,avg_epoch_time_90"
        );
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));
        assert!(lines[3].ends_with(",,"));
    }

    #[test]
    fn plan_rejects_unsorted_counts() {
        let plan = ExperimentPlan {
            class_counts: vec![10, 5],
            degree_steps: vec![60],
            preset: Preset::Desk,
            hyper: Hyperparameters::for_preset(Preset::Desk),
            val_frac: 0.3,
        };
        assert!(matches!(plan.validate(), Err(ExperimentError::BadPlan(_))));
    }
}
