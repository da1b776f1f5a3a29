//! Training loop, evaluation and inference benchmarking.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_plan, Dataset, Split};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::loss::{argmax_channels, masked_weighted_cross_entropy, SegMetrics};
use crate::model::{Checkpoint, UNet};
use crate::projection::project;
use crate::tensor::{adam_step, AdamConfig, Graph, Mode, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub bn_momentum: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (and after the last).
    pub checkpoint_interval: u64,
    pub deterministic: bool,
    /// After the last epoch, replace the batchnorm running statistics of the
    /// final model by their average over the train split.
    pub bn_recalibration: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 8,
            epochs: 10,
            bn_momentum: 0.99,
            seed: 0,
            checkpoint_interval: 1,
            deterministic: false,
            bn_recalibration: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 {
            return Err(Error::InvalidArgument(
                "batch size and checkpoint interval must be positive".into(),
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "batchnorm momentum {} must be in (0, 1)",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

/// Where a run starts: a fresh model or a checkpoint's epoch/step counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub epoch: u64,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean batch loss of every epoch run by this call, in order.
    pub epoch_losses: Vec<f64>,
    pub progress: Progress,
    /// Training state after the last epoch (resumable).
    pub final_checkpoint: PathBuf,
    /// Weights used for the final metrics; `None` when no epoch ran.
    pub model_path: Option<PathBuf>,
    pub train_metrics: SegMetrics,
    pub val_metrics: Option<SegMetrics>,
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.riuw")
}

pub fn save_training_checkpoint(
    model: &UNet<f32>,
    progress: Progress,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let mut ck = model.to_checkpoint(true);
    ck.push_u64("@train.epoch", progress.epoch);
    ck.push_u64("@train.step", progress.step);
    ck.push_u64("@train.seed", seed);
    ck.write(path)
}

/// Model, counters and seed stored by [`save_training_checkpoint`].
pub fn load_training_checkpoint(path: &Path) -> Result<(UNet<f32>, Progress, u64)> {
    let ck = Checkpoint::read(path)?;
    let model = UNet::from_checkpoint(&ck)?;
    let progress = Progress {
        epoch: ck.get_u64("@train.epoch")?,
        step: ck.get_u64("@train.step")?,
    };
    Ok((model, progress, ck.get_u64("@train.seed")?))
}

fn logit_summary(t: &Tensor<f32>) -> String {
    let d = t.data();
    let finite: Vec<f32> = d.iter().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = finite
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mean = finite.iter().map(|&v| v as f64).sum::<f64>() / finite.len().max(1) as f64;
    format!(
        "logits min {lo} max {hi} mean {mean} non-finite {}/{}",
        d.len() - finite.len(),
        d.len()
    )
}

pub const MODEL_FILE: &str = "model.riuw";

/// Replaces every batchnorm's running statistics with the mean of its batch
/// statistics over `indices` (in order, `batch_size` at a time), using the
/// current weights.
pub fn recalibrate_batchnorm(
    model: &mut UNet<f32>,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
    deterministic: bool,
) -> Result<()> {
    if indices.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument("recalibration needs samples and a positive batch size".into()));
    }
    let saved = model.batchnorms().first().map_or(0.99, |bn| bn.momentum);
    for (i, chunk) in indices.chunks(batch_size).enumerate() {
        // cumulative average: the i-th batch gets weight 1/(i+1)
        model.set_bn_momentum(i as f64 / (i + 1) as f64);
        let mut g = Graph::new().with_deterministic(deterministic);
        let x = g.constant(dataset.batch_inputs(chunk)?);
        model.forward(&mut g, x, Mode::Train)?;
    }
    model.set_bn_momentum(saved);
    Ok(())
}

/// Runs `cfg.epochs − start.epoch` epochs of Adam on the train split,
/// logging to `out_dir/train.log` (and `on_line`). Epoch checkpoints hold
/// the resumable training state; the final model ([`MODEL_FILE`], after
/// optional batchnorm recalibration) and its metrics reports are written
/// into `out_dir` as well.
pub fn train(
    model: &mut UNet<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    start: Progress,
    out_dir: &Path,
    on_line: &mut dyn FnMut(&str),
) -> Result<TrainReport> {
    cfg.validate()?;
    let train_idx = dataset.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("train split is empty".into()));
    }
    let val_idx = dataset.split_indices(Split::Val);
    let mcfg = model.config();
    let p = &dataset.manifest.projection;
    if (mcfg.input_height, mcfg.input_width) != (p.height, p.width)
        || mcfg.num_classes != dataset.manifest.num_classes()
    {
        return Err(Error::InvalidArgument(format!(
            "model expects {}x{} with {} classes, dataset has {}x{} with {}",
            mcfg.input_height,
            mcfg.input_width,
            mcfg.num_classes,
            p.height,
            p.width,
            dataset.manifest.num_classes()
        )));
    }
    model.set_bn_momentum(cfg.bn_momentum);
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train.log");
    let mut log = BufWriter::new(if start.epoch == 0 {
        File::create(&log_path)?
    } else {
        fs::OpenOptions::new().create(true).append(true).open(&log_path)?
    });
    let mut emit = |line: String| -> Result<()> {
        writeln!(log, "{line}")?;
        on_line(&line);
        Ok(())
    };

    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let clock = Instant::now();
    let mut progress = start;
    let mut final_checkpoint = out_dir.join(checkpoint_name(progress.epoch));
    if start.epoch == 0 {
        save_training_checkpoint(model, progress, cfg.seed, &final_checkpoint)?;
    }
    let mut epoch_losses = Vec::new();
    while progress.epoch < cfg.epochs {
        let epoch = progress.epoch + 1;
        let mut losses = Vec::new();
        for (b, indices) in batch_plan(&train_idx, cfg.batch_size, cfg.seed, epoch)?
            .into_iter()
            .enumerate()
        {
            let batch = dataset.batch(&indices)?;
            let mut g = Graph::new().with_deterministic(cfg.deterministic);
            let x = g.constant(batch.input);
            let pass = model.forward(&mut g, x, Mode::Train)?;
            let loss = masked_weighted_cross_entropy(&mut g, pass.logits, &batch.labels, &batch.mask, &batch.weights)?;
            let value = g.value(loss.value).item()?;
            let ids: Vec<&str> = indices
                .iter()
                .map(|&i| dataset.manifest.samples[i].id.as_str())
                .collect();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at epoch {epoch} batch {b} (samples {}); {}",
                    ids.join(","),
                    logit_summary(g.value(pass.logits))
                )));
            }
            let mut grads = g.backward(loss.value)?;
            model.collect_grads(&pass, &mut grads)?;
            drop(g);
            adam_step(model.parameters_mut(), &adam)?;
            progress.step += 1;
            losses.push(value as f64);
            emit(format!(
                "step epoch={epoch} step={} batch={b} samples={} loss={value:?} elapsed={:.3}",
                progress.step,
                ids.join(","),
                clock.elapsed().as_secs_f64()
            ))?;
        }
        progress.epoch = epoch;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        epoch_losses.push(mean);
        let mut line = format!("epoch epoch={epoch} mean_loss={mean:?}");
        if !val_idx.is_empty() {
            let m = evaluate_indices(model, dataset, &val_idx)?;
            line += &format!(
                " val_pixel_accuracy={:.6} val_mean_iou_foreground={:.6}",
                m.pixel_accuracy(),
                m.mean_iou_foreground()
            );
        }
        line += &format!(" elapsed={:.3}", clock.elapsed().as_secs_f64());
        emit(line)?;
        if epoch % cfg.checkpoint_interval == 0 || epoch == cfg.epochs {
            final_checkpoint = out_dir.join(checkpoint_name(epoch));
            save_training_checkpoint(model, progress, cfg.seed, &final_checkpoint)?;
        }
    }

    let model_path = if cfg.epochs > 0 {
        if cfg.bn_recalibration {
            recalibrate_batchnorm(model, dataset, &train_idx, cfg.batch_size, cfg.deterministic)?;
        }
        let path = out_dir.join(MODEL_FILE);
        model.save_weights(&path, false)?;
        Some(path)
    } else {
        None
    };

    let names: Vec<&str> = dataset.manifest.class_names.iter().map(String::as_str).collect();
    let train_metrics = evaluate_indices(model, dataset, &train_idx)?;
    write_metrics(&train_metrics, &names, "pixels/train", &out_dir.join("metrics_train"))?;
    let val_metrics = if val_idx.is_empty() {
        None
    } else {
        let m = evaluate_indices(model, dataset, &val_idx)?;
        write_metrics(&m, &names, "pixels/val", &out_dir.join("metrics_val"))?;
        Some(m)
    };
    emit(format!(
        "done epoch={} step={} train_pixel_accuracy={:.6} train_mean_iou_foreground={:.6}",
        progress.epoch,
        progress.step,
        train_metrics.pixel_accuracy(),
        train_metrics.mean_iou_foreground()
    ))?;
    log.flush()?;
    Ok(TrainReport {
        epoch_losses,
        progress,
        final_checkpoint,
        model_path,
        train_metrics,
        val_metrics,
    })
}

/// Writes `<stem>.txt` (table) and `<stem>.kv` (key-value report).
pub fn write_metrics(m: &SegMetrics, names: &[&str], domain: &str, stem: &Path) -> Result<()> {
    write_atomic(&stem.with_extension("txt"), m.table(names, domain).as_bytes())?;
    write_atomic(&stem.with_extension("kv"), m.key_values(names, domain).as_bytes())
}

const EVAL_BATCH: usize = 8;

/// Eval-mode argmax labels for the given samples, in order.
pub fn predict_labels(model: &UNet<f32>, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Vec<u8>>> {
    let p = dataset.manifest.projection.height * dataset.manifest.projection.width;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = dataset.batch_inputs(chunk)?;
        let pred = argmax_channels(&model.predict(&batch)?)?;
        out.extend(pred.chunks(p).map(<[u8]>::to_vec));
    }
    Ok(out)
}

fn evaluate_indices(model: &UNet<f32>, dataset: &Dataset, indices: &[usize]) -> Result<SegMetrics> {
    let preds = predict_labels(model, dataset, indices)?;
    score_pixels(dataset, indices, &preds)
}

fn score_pixels(dataset: &Dataset, indices: &[usize], preds: &[Vec<u8>]) -> Result<SegMetrics> {
    let mut m = SegMetrics::new(dataset.manifest.num_classes());
    for (&i, pred) in indices.iter().zip(preds) {
        let s = &dataset.samples[i];
        let truth = s.labels.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("sample `{}` has no labels", dataset.manifest.samples[i].id))
        })?;
        m.accumulate(pred, truth, &s.mask)?;
    }
    Ok(m)
}

/// Point-level scores: predictions are back-projected onto each sample's
/// source cloud and compared with its per-point labels. Points outside the
/// field of view are not scored.
fn score_points(dataset: &Dataset, indices: &[usize], preds: &[Vec<u8>]) -> Result<SegMetrics> {
    let mut m = SegMetrics::new(dataset.manifest.num_classes());
    for (&i, pred) in indices.iter().zip(preds) {
        let entry = &dataset.manifest.samples[i];
        let src = entry.source.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("sample `{}` has no source cloud", entry.id))
        })?;
        let cloud = crate::data::read_labeled_point_cloud(src)?;
        let truth = cloud.labels.clone().ok_or_else(|| {
            Error::InvalidArgument(format!("{} has no label sidecar", src.display()))
        })?;
        let image = project(&cloud, &dataset.manifest.projection)?;
        let point_pred = crate::projection::backproject_with(&image, &cloud, pred)?;
        let mapped: Vec<u8> = image
            .index_map
            .as_ref()
            .expect("projection fills the index map")
            .iter()
            .map(|e| u8::from(e.is_some()))
            .collect();
        m.accumulate(&point_pred, &truth, &mapped)?;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pixels: SegMetrics,
    pub points: Option<SegMetrics>,
}

/// Scores `preds` (one `H×W` label grid per split sample, in split order).
pub fn evaluate_predictions(
    dataset: &Dataset,
    split: Split,
    preds: &[Vec<u8>],
    point_level: bool,
) -> Result<EvalReport> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{split}` is empty")));
    }
    if preds.len() != indices.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} samples",
            preds.len(),
            indices.len()
        )));
    }
    Ok(EvalReport {
        pixels: score_pixels(dataset, &indices, preds)?,
        points: if point_level {
            Some(score_points(dataset, &indices, preds)?)
        } else {
            None
        },
    })
}

pub fn evaluate(model: &UNet<f32>, dataset: &Dataset, split: Split, point_level: bool) -> Result<EvalReport> {
    let indices = dataset.split_indices(split);
    let preds = predict_labels(model, dataset, &indices)?;
    evaluate_predictions(dataset, split, &preds, point_level)
}

/// Pixel metrics computed by `workers` threads over contiguous shards of
/// the split and merged.
pub fn evaluate_sharded(model: &UNet<f32>, dataset: &Dataset, split: Split, workers: usize) -> Result<SegMetrics> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{split}` is empty")));
    }
    let per = indices.len().div_ceil(workers.max(1));
    let parts: Vec<Result<SegMetrics>> = std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(per)
            .map(|shard| s.spawn(move || evaluate_indices(model, dataset, shard)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut total = SegMetrics::new(dataset.manifest.num_classes());
    for p in parts {
        total.merge(&p?)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchReport {
    pub frames: usize,
    pub elapsed_secs: f64,
    pub fps: f64,
}

/// Times `frames` single-frame eval-mode forward passes on a fixed random
/// input.
pub fn benchmark_inference(model: &UNet<f32>, frames: usize, seed: u64) -> Result<BenchReport> {
    let c = model.config();
    let input = Tensor::<f32>::uniform(
        &[1, c.in_channels, c.input_height, c.input_width],
        -1.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    let start = Instant::now();
    for _ in 0..frames {
        let out = model.predict(&input)?;
        std::hint::black_box(out);
    }
    let elapsed_secs = start.elapsed().as_secs_f64();
    let fps = if frames > 0 && elapsed_secs > 0.0 {
        frames as f64 / elapsed_secs
    } else {
        0.0
    };
    Ok(BenchReport {
        frames,
        elapsed_secs,
        fps,
    })
}
