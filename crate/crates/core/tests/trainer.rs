use std::fs;
use std::path::Path;
use std::time::Instant;

use riunet::data::*;
use riunet::model::{ModelConfig, UNet};
use riunet::projection::ProjectionConfig;
use riunet::train::*;
use riunet::Error;

fn small_projection() -> ProjectionConfig {
    ProjectionConfig { width: 64, height: 16, ..ProjectionConfig::default() }
}

fn small_dataset(root: &Path, scenes: usize, val_fraction: f64) -> Dataset {
    let spec = SceneSpec { projection: small_projection(), range_band: [4.0, 15.0], ..SceneSpec::default() };
    let sources = write_scenes(&root.join("clouds"), &spec, 3, scenes).unwrap();
    let opts = BuildOptions { projection: small_projection(), val_fraction, ..BuildOptions::default() };
    build_dataset(&sources, &root.join("ds"), &opts).unwrap();
    Dataset::load(&root.join("ds")).unwrap()
}

fn small_model(classes: usize) -> UNet<f32> {
    let cfg = ModelConfig {
        num_classes: classes,
        depth_levels: 2,
        base_features: 4,
        input_height: 16,
        input_width: 64,
        ..ModelConfig::default()
    };
    UNet::build(cfg, 1).unwrap()
}

fn config(epochs: u64) -> TrainConfig {
    TrainConfig { epochs, batch_size: 2, deterministic: true, learning_rate: 0.01, ..TrainConfig::default() }
}

fn quiet(_: &str) {}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 4, 0.25);
    let mut m = small_model(4);
    let before = m.to_checkpoint(true).to_bytes();
    let out = dir.path().join("run");
    let r = train(&mut m, &ds, &config(0), Progress::default(), &out, &mut quiet).unwrap();
    assert_eq!(r.progress, Progress { epoch: 0, step: 0 });
    assert!(r.epoch_losses.is_empty() && r.model_path.is_none());
    let ckpts: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".riuw"))
        .collect();
    assert_eq!(ckpts, vec!["epoch_0000.riuw".to_string()]);
    assert_eq!(m.to_checkpoint(true).to_bytes(), before);
}

#[test]
fn resumed_training_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 5, 0.2);
    let full = dir.path().join("full");
    let mut a = small_model(4);
    let ra = train(&mut a, &ds, &config(4), Progress::default(), &full, &mut quiet).unwrap();
    assert_eq!(ra.progress, Progress { epoch: 4, step: 8 });

    let (mut b, progress, seed) = load_training_checkpoint(&full.join("epoch_0002.riuw")).unwrap();
    assert_eq!((progress, seed), (Progress { epoch: 2, step: 4 }, 0));
    let half = dir.path().join("half");
    let rb = train(&mut b, &ds, &config(4), progress, &half, &mut quiet).unwrap();
    assert_eq!(
        ra.epoch_losses[2..].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        rb.epoch_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    for name in ["epoch_0004.riuw", "model.riuw", "metrics_train.kv", "metrics_val.kv"] {
        assert_eq!(fs::read(full.join(name)).unwrap(), fs::read(half.join(name)).unwrap(), "{name}");
    }
    let log = fs::read_to_string(full.join("train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("step ")).count(), 8);
    assert!(log.lines().any(|l| l.starts_with("epoch epoch=4 mean_loss=") && l.contains("val_mean_iou_foreground=")));
}

#[test]
fn validation_samples_never_train() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 5, 0.4);
    let val: Vec<&str> = ds.manifest.ids(Split::Val);
    assert_eq!(val.len(), 2);
    let mut m = small_model(4);
    let out = dir.path().join("run");
    train(&mut m, &ds, &config(3), Progress::default(), &out, &mut quiet).unwrap();
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    for line in log.lines().filter(|l| l.starts_with("step ")) {
        let samples = line.split(" samples=").nth(1).unwrap().split(' ').next().unwrap();
        assert!(samples.split(',').all(|s| !val.contains(&s)), "{line}");
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 2, 0.0);
    let mut m = small_model(4);
    for p in m.parameters_mut() {
        if p.name == "head.weight" {
            p.value.data_mut()[0] = f32::NAN;
        }
    }
    let err = train(&mut m, &ds, &config(1), Progress::default(), &dir.path().join("run"), &mut quiet).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    let msg = err.to_string();
    assert!(msg.contains("epoch 1 batch 0") && msg.contains("scene_000") && msg.contains("non-finite"), "{msg}");
}

#[test]
fn groundtruth_scores_perfectly_at_pixel_and_point_level() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 3, 0.0);
    let idx = ds.split_indices(Split::Train);
    let truth: Vec<Vec<u8>> = idx.iter().map(|&i| ds.samples[i].labels.clone().unwrap()).collect();
    let r = evaluate_predictions(&ds, Split::Train, &truth, true).unwrap();
    for m in [&r.pixels, r.points.as_ref().unwrap()] {
        assert!(m.iou_per_class().iter().all(|c| c.iou == 1.0));
        assert_eq!(m.pixel_accuracy(), 1.0);
    }
    assert!(evaluate_predictions(&ds, Split::Train, &truth[..2], false).is_err());
    assert!(evaluate_predictions(&ds, Split::Val, &[], false).is_err());
}

#[test]
fn untrained_model_is_near_chance_on_balanced_two_class_data() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { projection: small_projection(), ..SceneSpec::default() };
    let src = dir.path().join("clouds");
    let mut sources = write_scenes(&src, &spec, 9, 4).unwrap();
    // relabel: left half of the field of view is class 1
    for s in &mut sources {
        let mut c = read_labeled_point_cloud(&s.path).unwrap();
        c.labels = Some(c.points.iter().map(|p| u8::from(p[1] > 0.0)).collect());
        write_labeled_point_cloud(&c, &s.path).unwrap();
    }
    let opts = BuildOptions {
        projection: small_projection(),
        val_fraction: 0.0,
        class_names: vec!["right".into(), "left".into()],
        ..BuildOptions::default()
    };
    build_dataset(&sources, &dir.path().join("ds"), &opts).unwrap();
    let ds = Dataset::load(&dir.path().join("ds")).unwrap();
    let m = small_model(2);
    let acc = evaluate(&m, &ds, Split::Train, false).unwrap().pixels.pixel_accuracy();
    assert!((0.2..=0.8).contains(&acc), "{acc}");
}

#[test]
fn sharded_evaluation_matches_single_worker() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 7, 0.0);
    let m = small_model(4);
    let single = evaluate(&m, &ds, Split::Train, false).unwrap().pixels;
    for workers in [1, 2, 3, 16] {
        assert_eq!(evaluate_sharded(&m, &ds, Split::Train, workers).unwrap(), single);
    }
}

#[test]
fn recalibrated_statistics_equal_batch_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 4, 0.0);
    let idx = ds.split_indices(Split::Train);
    let mut one = small_model(4);
    recalibrate_batchnorm(&mut one, &ds, &idx, 4, true).unwrap();
    let mut two = small_model(4);
    recalibrate_batchnorm(&mut two, &ds, &idx, 2, true).unwrap();
    assert!(one.batchnorms().iter().chain(two.batchnorms().iter()).all(|bn| bn.momentum == 0.99));
    // the first layer sees raw inputs, so equal-sized batches average to the
    // population mean
    let (a, b) = (one.batchnorms()[0], two.batchnorms()[0]);
    for (x, y) in a.running_mean.iter().zip(&b.running_mean) {
        assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn benchmark_reports_consistent_rates() {
    let m = small_model(4);
    let r = benchmark_inference(&m, 0, 0).unwrap();
    assert_eq!((r.frames, r.fps), (0, 0.0));

    let frames = 40;
    let start = Instant::now();
    let r = benchmark_inference(&m, frames, 0).unwrap();
    let external = start.elapsed().as_secs_f64();
    assert_eq!(r.frames, frames);
    assert!((r.fps * r.elapsed_secs - frames as f64).abs() < 1e-9);
    let external_fps = frames as f64 / external;
    assert!((r.fps - external_fps).abs() <= 0.05 * external_fps, "{} vs {external_fps}", r.fps);
    let again = benchmark_inference(&m, frames, 0).unwrap();
    assert!((again.fps / r.fps).log10().abs() < 1.0);
}
