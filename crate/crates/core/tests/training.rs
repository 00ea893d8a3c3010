use std::path::Path;

use surrogate_core::dataset::{build_manifest, split, DatasetManifest, Part};
use surrogate_core::experiment::{
    evaluate, metrics_csv, run_sweep, step_root, train, ExperimentPlan, Hyperparameters, RunResult,
};
use surrogate_core::mesh::normalize;
use surrogate_core::nn::weights::save_weights;
use surrogate_core::nn::{build_alexnet, Network, Preset};
use surrogate_core::render::{render_views, RenderConfig};
use surrogate_core::shapes;

fn render_catalog(root: &Path, count: usize, step: u32) {
    let cfg = RenderConfig {
        resolution: 64,
        step,
        ..RenderConfig::default()
    };
    for (name, mesh) in shapes::catalog(count) {
        render_views(&normalize(&mesh).unwrap(), &cfg, &root.join(name)).unwrap();
    }
}

fn hyper(epochs: usize, batch_size: usize, seed: u64) -> Hyperparameters {
    Hyperparameters {
        epochs,
        batch_size,
        seed,
        ..Hyperparameters::for_preset(Preset::Desk)
    }
}

fn dataset(root: &Path, classes: usize, seed: u64) -> DatasetManifest {
    split(&build_manifest(root, Some(classes)).unwrap(), 0.3, seed)
}

fn run(manifest: &DatasetManifest, h: &Hyperparameters) -> (Network<f32>, RunResult) {
    train(build_alexnet(manifest.classes.len(), Preset::Desk).unwrap(), manifest, h).unwrap()
}

fn check_records(result: &RunResult) {
    for r in &result.history {
        for acc in [r.train_top1, r.val_top1, r.val_top5] {
            assert!((0.0..=1.0).contains(&acc));
        }
        assert!(r.val_top5 >= r.val_top1);
        assert!(r.train_loss.is_finite() && r.val_loss.is_finite());
    }
    let sum: f64 = result.history.iter().map(|r| r.wall_time).sum();
    assert!(result.total_time >= sum);
    assert!((result.avg_epoch_time - sum / result.history.len() as f64).abs() < 1e-12);
}

#[test]
fn single_class_is_always_right() {
    let dir = tempfile::tempdir().unwrap();
    render_catalog(dir.path(), 1, 90);
    let manifest = dataset(dir.path(), 1, 1);
    let (_, result) = run(&manifest, &hyper(2, 32, 1));
    assert!(result.failed.is_none());
    for r in &result.history {
        assert_eq!((r.train_top1, r.val_top1, r.val_top5), (1.0, 1.0, 1.0));
    }
}

#[test]
fn steps_per_epoch_are_the_batch_ceiling() {
    let dir = tempfile::tempdir().unwrap();
    render_catalog(dir.path(), 3, 90);
    let manifest = dataset(dir.path(), 3, 2);
    let train_images = manifest.entries(Part::Train).len();
    assert_eq!(train_images, 3 * (12 - 4));
    for batch in [32, 5] {
        let (_, result) = run(&manifest, &hyper(2, batch, 2));
        check_records(&result);
        assert!(result.history.iter().all(|r| r.steps == train_images.div_ceil(batch)));
    }
}

#[test]
fn same_seed_gives_identical_weights_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    render_catalog(dir.path(), 3, 90);
    let manifest = dataset(dir.path(), 3, 7);
    let out = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    let mut histories = Vec::new();
    for i in 0..2 {
        let (net, result) = run(&manifest, &hyper(3, 32, 7));
        let path = out.path().join(format!("w{i}.stwn"));
        save_weights(&net, &path).unwrap();
        files.push(std::fs::read(&path).unwrap());
        let mut h = result.history;
        h.iter_mut().for_each(|r| r.wall_time = 0.0);
        histories.push(h);
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(histories[0], histories[1]);

    let (other, _) = run(&manifest, &hyper(3, 32, 8));
    let path = out.path().join("other.stwn");
    save_weights(&other, &path).unwrap();
    assert_ne!(std::fs::read(&path).unwrap(), files[0]);
}

#[test]
fn evaluation_matches_the_last_epoch() {
    let dir = tempfile::tempdir().unwrap();
    render_catalog(dir.path(), 3, 90);
    let manifest = dataset(dir.path(), 3, 4);
    let (net, result) = run(&manifest, &hyper(2, 32, 4));
    let last = result.last().unwrap();
    let eval = evaluate(&net, &manifest, Part::Val, 7).unwrap();
    assert_eq!(eval.samples, manifest.entries(Part::Val).len());
    assert_eq!((eval.top1, eval.top5), (last.val_top1, last.val_top5));
    assert!((eval.loss - last.val_loss).abs() < 1e-5);
}

#[test]
fn runaway_learning_rate_is_reported_as_failed() {
    let dir = tempfile::tempdir().unwrap();
    render_catalog(dir.path(), 3, 90);
    let manifest = dataset(dir.path(), 3, 5);
    let h = Hyperparameters {
        learning_rate: 10.0,
        ..hyper(5, 4, 5)
    };
    let (_, result) = run(&manifest, &h);
    assert!(result.failed.is_some());
    check_records_finite(&result);
}

fn check_records_finite(result: &RunResult) {
    assert!(result.history.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
}

#[test]
fn sweep_is_reproducible_apart_from_timing() {
    let dir = tempfile::tempdir().unwrap();
    render_catalog(&step_root(dir.path(), 90), 3, 90);
    let plan = ExperimentPlan {
        class_counts: vec![2, 3],
        degree_steps: vec![90],
        preset: Preset::Desk,
        hyper: hyper(2, 32, 3),
        val_frac: 0.3,
    };
    let strip = |csv: String| -> Vec<String> {
        csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    let mut seen = 0;
    let a = run_sweep(&plan, dir.path(), |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    let b = run_sweep(&plan, dir.path(), |_| {}).unwrap();
    assert_eq!(a.iter().map(|r| r.class_count).collect::<Vec<_>>(), [2, 3]);
    a.iter().for_each(check_records);
    assert_eq!(strip(metrics_csv(&a)), strip(metrics_csv(&b)));
}
