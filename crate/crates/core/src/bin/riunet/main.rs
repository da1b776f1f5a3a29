//! `riunet` command-line interface.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use riunet::data::{
    build_dataset, read_labeled_point_cloud, write_labeled_point_cloud, write_scenes, BuildOptions, Dataset,
    RangeSample, SceneSpec, SourceCloud, Split,
};
use riunet::loss::{argmax_channels, WeightMapParams, DEFAULT_CLASS_NAMES};
use riunet::model::{ModelConfig, UNet};
use riunet::projection::{backproject_with, normalize_channels, project, PointCloud, ProjectionConfig, BACKGROUND};
use riunet::tensor::Tensor;
use riunet::train::{
    benchmark_inference, evaluate, evaluate_predictions, load_training_checkpoint, train, write_metrics, Progress,
    TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "riunet", version, about = "Range-image U-Net segmentation of LiDAR point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate labeled synthetic point clouds.
    Synth(SynthArgs),
    /// Convert a point cloud to a range-image file.
    Project(ProjectArgs),
    /// Project a directory of labeled clouds into a dataset with a manifest.
    BuildDataset(BuildArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint or a directory of predictions.
    Eval(EvalArgs),
    /// Label one point cloud with a trained model.
    Infer(InferArgs),
    /// Draw the labels of a range-image file as a P6 pixmap.
    Render(RenderArgs),
    /// Measure eval-mode inference throughput.
    Bench(BenchArgs),
}

/// Key-value file whose keys are flag names; command-line flags win.
#[derive(Args, Debug)]
struct ConfigArg {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ProjectionArgs {
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Degrees.
    #[arg(long, default_value_t = -45.0, allow_negative_numbers = true)]
    azimuth_min: f64,
    #[arg(long, default_value_t = 45.0, allow_negative_numbers = true)]
    azimuth_max: f64,
    #[arg(long, default_value_t = -24.9, allow_negative_numbers = true)]
    elevation_min: f64,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    elevation_max: f64,
}

impl ProjectionArgs {
    fn config(&self) -> Result<ProjectionConfig> {
        let cfg = ProjectionConfig {
            width: self.width,
            height: self.height,
            theta_min: self.azimuth_min.to_radians(),
            theta_max: self.azimuth_max.to_radians(),
            phi_min: self.elevation_min.to_radians(),
            phi_max: self.elevation_max.to_radians(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Objects are placed at horizontal distances in [range-min, range-max].
    #[arg(long, default_value_t = 4.0)]
    range_min: f64,
    #[arg(long, default_value_t = 40.0)]
    range_max: f64,
    /// Beams travelling further than this produce no point.
    #[arg(long, default_value_t = 80.0)]
    max_distance: f64,
    #[arg(long, default_value_t = -1.73, allow_negative_numbers = true)]
    ground_z: f64,
    #[command(flatten)]
    projection: ProjectionArgs,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Cloud file; a `.label` sidecar next to it is picked up.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    projection: ProjectionArgs,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory of `*.bin` clouds with `.label` sidecars.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Boundary weight amplitude.
    #[arg(long, default_value_t = 10.0)]
    w0: f64,
    /// Boundary weight length scale in pixels.
    #[arg(long, default_value_t = 5.0)]
    sigma: f64,
    #[arg(long)]
    no_class_balance: bool,
    #[command(flatten)]
    projection: ProjectionArgs,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 64)]
    base: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Total epoch budget, counted from the start of training.
    #[arg(long, default_value_t = 10)]
    epochs: u64,
    #[arg(long, default_value_t = 0.99)]
    bn_momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    checkpoint_interval: u64,
    #[arg(long)]
    deterministic: bool,
    /// Keep the running batchnorm statistics of the last epoch instead of
    /// recomputing them over the train split.
    #[arg(long)]
    no_bn_recalibration: bool,
    /// Continue from a training checkpoint; model flags are then taken
    /// from the checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory holding `<id>.rimg` label grids, e.g. written by `infer`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: Split,
    /// Also score back-projected labels on the source clouds.
    #[arg(long)]
    points: bool,
    /// Writes `<out>.txt` and `<out>.kv` (and `<out>_points.*`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset whose projection and normalization the model was trained with.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Writes `<out>.rimg` (pixel labels) and `<out>.bin` + `<out>.label`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Range-image file with a label plane.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Model to time; a freshly initialized one otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Writes the report as `key = value` lines.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

/// RGB per class id: background, car, pedestrian, cyclist.
const PALETTE: [[u8; 3]; 4] = [[128, 128, 128], [0, 0, 255], [0, 255, 0], [255, 0, 0]];
const INVALID: [u8; 3] = [0, 0, 0];

/// Removes the listed paths on drop unless disarmed.
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn disarm(mut self) {
        self.0.clear();
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        for p in &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

/// Splices the `--config` file's entries in front of the explicit flags.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let pos = args.iter().position(|a| a == "--config");
    let inline = args.iter().position(|a| a.to_string_lossy().starts_with("--config="));
    let path = match (pos, inline) {
        (Some(i), _) => match args.get(i + 1) {
            Some(p) => PathBuf::from(p),
            None => return Ok(args),
        },
        (None, Some(i)) => PathBuf::from(&args[i].to_string_lossy()["--config=".len()..]),
        (None, None) => return Ok(args),
    };
    if args.len() < 2 {
        return Ok(args);
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", path.display(), n + 1);
        };
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        if key == "config" {
            bail!("{}:{}: config files cannot include other config files", path.display(), n + 1);
        }
        match value {
            "true" => extra.push(OsString::from(format!("--{key}"))),
            "false" => {}
            v => {
                extra.push(OsString::from(format!("--{key}")));
                extra.push(OsString::from(v));
            }
        }
    }
    let mut out = args[..2].to_vec();
    out.extend(extra);
    out.extend(args[2..].iter().cloned());
    Ok(out)
}

fn print_resolved(matches: &clap::ArgMatches) {
    let Some((name, sub)) = matches.subcommand() else {
        return;
    };
    println!("# riunet {name}");
    for id in sub.ids() {
        let id = id.as_str();
        let Ok(Some(raw)) = sub.try_get_raw(id) else {
            continue;
        };
        let values: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
        println!("{} = {}", id.replace('_', "-"), values.join(" "));
    }
}

fn class_names(k: usize) -> Vec<String> {
    if k == DEFAULT_CLASS_NAMES.len() {
        DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|c| format!("class{c}")).collect()
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SceneSpec {
        range_band: [a.range_min, a.range_max],
        max_range: a.max_distance,
        ground_z: a.ground_z,
        projection: a.projection.config()?,
        ..SceneSpec::default()
    };
    spec.validate()?;
    let written = write_scenes(&a.out, &spec, a.seed, a.count)?;
    println!("wrote {} scenes to {}", written.len(), a.out.display());
    Ok(())
}

fn project_cmd(a: &ProjectArgs) -> Result<()> {
    let cloud = read_labeled_point_cloud(&a.input)?;
    let img = project(&cloud, &a.projection.config()?)?;
    RangeSample::from_range_image(&img, None)?.write(&a.out)?;
    println!(
        "projected {} points onto {} of {} pixels -> {}",
        cloud.len(),
        img.valid_count(),
        img.height * img.width,
        a.out.display()
    );
    Ok(())
}

fn build_cmd(a: &BuildArgs) -> Result<()> {
    let sources = SourceCloud::scan_dir(&a.input)?;
    let opts = BuildOptions {
        seed: a.seed,
        val_fraction: a.val_fraction,
        projection: a.projection.config()?,
        class_names: class_names(a.classes),
        weight_params: WeightMapParams {
            w0: a.w0,
            sigma: a.sigma,
        },
        class_balance: !a.no_class_balance,
    };
    let m = build_dataset(&sources, &a.out, &opts)?;
    println!(
        "{} train / {} val samples -> {}",
        m.ids(Split::Train).len(),
        m.ids(Split::Val).len(),
        a.out.join("manifest.txt").display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let dataset = Dataset::load(&a.dataset)?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        bn_momentum: a.bn_momentum,
        seed: a.seed,
        checkpoint_interval: a.checkpoint_interval,
        deterministic: a.deterministic,
        bn_recalibration: !a.no_bn_recalibration,
    };
    let (mut model, start) = match &a.resume {
        Some(path) => {
            let (model, progress, seed) = load_training_checkpoint(path)?;
            if seed != a.seed {
                bail!("checkpoint {} was trained with seed {seed}, not {}", path.display(), a.seed);
            }
            (model, progress)
        }
        None => {
            let p = &dataset.manifest.projection;
            let mcfg = ModelConfig {
                num_classes: a.model.classes,
                depth_levels: a.model.depth,
                base_features: a.model.base,
                input_height: p.height,
                input_width: p.width,
                ..ModelConfig::default()
            };
            (UNet::build(mcfg, a.seed)?, Progress::default())
        }
    };
    let report = train(&mut model, &dataset, &cfg, start, &a.out, &mut |line| println!("{line}"))?;
    let names = name_refs(&dataset);
    print!("{}", report.train_metrics.table(&names, "pixels/train"));
    if let Some(m) = &report.val_metrics {
        print!("{}", m.table(&names, "pixels/val"));
    }
    println!("final checkpoint {}", report.final_checkpoint.display());
    if let Some(p) = &report.model_path {
        println!("final model {}", p.display());
    }
    Ok(())
}

fn name_refs(dataset: &Dataset) -> Vec<&str> {
    dataset.manifest.class_names.iter().map(String::as_str).collect()
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let dataset = Dataset::load(&a.dataset)?;
    let report = match (&a.checkpoint, &a.predictions) {
        (Some(ck), _) => {
            let model = UNet::load_weights(ck)?;
            evaluate(&model, &dataset, a.split, a.points)?
        }
        (None, Some(dir)) => {
            let mut preds = Vec::new();
            for id in dataset.manifest.ids(a.split) {
                let path = dir.join(format!("{id}.rimg"));
                let s = RangeSample::read(&path)?;
                let p = &dataset.manifest.projection;
                if (s.height, s.width) != (p.height, p.width) {
                    bail!("{} is {}x{}, dataset images are {}x{}", path.display(), s.height, s.width, p.height, p.width);
                }
                preds.push(s.labels.with_context(|| format!("{} has no label plane", path.display()))?);
            }
            evaluate_predictions(&dataset, a.split, &preds, a.points)?
        }
        (None, None) => bail!("one of --checkpoint or --predictions is required"),
    };
    let names = name_refs(&dataset);
    let pixels = format!("pixels/{}", a.split);
    let points = format!("points/{}", a.split);
    print!("{}", report.pixels.table(&names, &pixels));
    if let Some(m) = &report.points {
        print!("{}", m.table(&names, &points));
    }
    if let Some(out) = &a.out {
        write_metrics(&report.pixels, &names, &pixels, out)?;
        if let Some(m) = &report.points {
            let stem = out.with_file_name(format!(
                "{}_points",
                out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            ));
            write_metrics(m, &names, &points, &stem)?;
        }
    }
    Ok(())
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let dataset_manifest = Dataset::load(&a.dataset)?.manifest;
    let model = UNet::load_weights(&a.checkpoint)?;
    let cloud = read_labeled_point_cloud(&a.input)?;
    let image = project(&cloud, &dataset_manifest.projection)?;
    let c = model.config();
    if (c.input_height, c.input_width) != (image.height, image.width) {
        bail!(
            "model expects {}x{} images, dataset projection gives {}x{}",
            c.input_height,
            c.input_width,
            image.height,
            image.width
        );
    }
    let input = Tensor::from_vec(
        &[1, 2, image.height, image.width],
        normalize_channels::<f32>(&image, &dataset_manifest.stats)?.into_data(),
    )?;
    let mut labels = argmax_channels(&model.predict(&input)?)?;
    for (l, &m) in labels.iter_mut().zip(&image.mask) {
        if m == 0 {
            *l = BACKGROUND;
        }
    }
    let point_labels = backproject_with(&image, &cloud, &labels)?;

    let rimg = with_suffix(&a.out, ".rimg");
    let bin = with_suffix(&a.out, ".bin");
    let guard = Outputs(vec![rimg.clone(), bin.clone(), with_suffix(&a.out, ".label")]);
    let mut sample = RangeSample::from_range_image(&image, None)?;
    sample.labels = Some(labels);
    sample.write(&rimg)?;
    let labeled = PointCloud {
        labels: Some(point_labels),
        ..cloud
    };
    write_labeled_point_cloud(&labeled, &bin)?;
    guard.disarm();
    let names = class_names(c.num_classes);
    let mut counts = vec![0usize; c.num_classes];
    for &l in labeled.labels.as_ref().expect("set above") {
        counts[l as usize] += 1;
    }
    let summary: Vec<String> = names.iter().zip(&counts).map(|(n, k)| format!("{n}={k}")).collect();
    println!("labeled {} points ({}) -> {}, {}", labeled.len(), summary.join(" "), rimg.display(), bin.display());
    Ok(())
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    let s = RangeSample::read(&a.input)?;
    let labels = s
        .labels
        .as_ref()
        .with_context(|| format!("{} has no label plane", a.input.display()))?;
    let mut out = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
    for (&l, &m) in labels.iter().zip(&s.mask) {
        let rgb = if m == 0 {
            INVALID
        } else {
            *PALETTE
                .get(l as usize)
                .with_context(|| format!("label {l} has no color"))?
        };
        out.extend_from_slice(&rgb);
    }
    let tmp = with_suffix(&a.out, ".partial");
    let guard = Outputs(vec![tmp.clone()]);
    fs::write(&tmp, &out)?;
    fs::rename(&tmp, &a.out)?;
    guard.disarm();
    println!("rendered {}x{} -> {}", s.width, s.height, a.out.display());
    Ok(())
}

fn bench_cmd(a: &BenchArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => UNet::load_weights(p)?,
        None => UNet::build(
            ModelConfig {
                num_classes: a.model.classes,
                depth_levels: a.model.depth,
                base_features: a.model.base,
                input_height: a.height,
                input_width: a.width,
                ..ModelConfig::default()
            },
            a.seed,
        )?,
    };
    let r = benchmark_inference(&model, a.frames, a.seed)?;
    let c = model.config();
    let text = format!(
        "height = {}\nwidth = {}\nframes = {}\nelapsed_secs = {}\nfps = {}\n",
        c.input_height, c.input_width, r.frames, r.elapsed_secs, r.fps
    );
    print!("{text}");
    if let Some(out) = &a.out {
        let tmp = with_suffix(out, ".partial");
        let guard = Outputs(vec![tmp.clone()]);
        fs::write(&tmp, text)?;
        fs::rename(&tmp, out)?;
        guard.disarm();
    }
    Ok(())
}

fn run() -> Result<()> {
    let args = expand_config(std::env::args_os().collect())?;
    let command = Cli::command().mut_subcommands(|c| c.args_override_self(true));
    let matches = match command.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => e.exit(),
    };
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    print_resolved(&matches);
    std::io::stdout().flush()?;
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Project(a) => project_cmd(a),
        Command::BuildDataset(a) => build_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
