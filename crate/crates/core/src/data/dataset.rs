//! Dataset manifests, dataset construction and batching.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::cloud::read_labeled_point_cloud;
use super::range_file::RangeSample;
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::loss::{boundary_weight_map, ClassBalance, WeightMapParams, DEFAULT_CLASS_NAMES};
use crate::projection::{project, ChannelStats, ProjectionConfig};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "# riunet-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
const KIND: &str = "manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestSample {
    pub id: String,
    pub split: Split,
    /// Point cloud the sample was projected from.
    pub source: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    /// Sample directory, relative to the manifest file.
    pub root: String,
    pub projection: ProjectionConfig,
    pub class_names: Vec<String>,
    /// Valid-pixel counts per class over the train split.
    pub class_counts: Vec<u64>,
    pub class_balance: bool,
    pub class_weights: Vec<f64>,
    pub weight_params: WeightMapParams,
    /// Depth/elevation statistics over the train split.
    pub stats: ChannelStats,
    pub samples: Vec<ManifestSample>,
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if !ok {
        return Err(Error::InvalidArgument(format!(
            "sample id `{id}` must be non-empty ASCII letters, digits, `_`, `-` or `.`"
        )));
    }
    Ok(())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.id.as_str())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::format(KIND, d));
        self.projection.validate()?;
        self.stats.validate()?;
        let k = self.class_names.len();
        if !(2..=256).contains(&k) {
            return bad(format!("{k} classes, expected 2..=256"));
        }
        if self.class_counts.len() != k || self.class_weights.len() != k {
            return bad(format!("class counts/weights do not list {k} classes"));
        }
        if self.class_names.iter().any(|n| n.is_empty() || n.contains(char::is_whitespace)) {
            return bad("class names must be non-empty words".into());
        }
        check_id(&self.root).or_else(|_| bad(format!("root `{}` is not a plain directory name", self.root)))?;
        let mut seen = HashSet::new();
        for s in &self.samples {
            check_id(&s.id)?;
            if !seen.insert(&s.id) {
                return bad(format!("duplicate sample id `{}`", s.id));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let p = &self.projection;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("root", self.root.clone());
        kv("projection.width", p.width.to_string());
        kv("projection.height", p.height.to_string());
        kv("projection.theta_min", format!("{:?}", p.theta_min));
        kv("projection.theta_max", format!("{:?}", p.theta_max));
        kv("projection.phi_min", format!("{:?}", p.phi_min));
        kv("projection.phi_max", format!("{:?}", p.phi_max));
        kv("classes", self.class_names.join(" "));
        kv("class_counts", join(&self.class_counts));
        kv("class_balance", self.class_balance.to_string());
        kv(
            "class_weights",
            join(&self.class_weights.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>()),
        );
        kv("weight_map.w0", format!("{:?}", self.weight_params.w0));
        kv("weight_map.sigma", format!("{:?}", self.weight_params.sigma));
        kv("stats.mean", format!("{:?} {:?}", self.stats.mean[0], self.stats.mean[1]));
        kv("stats.std", format!("{:?} {:?}", self.stats.std[0], self.stats.std[1]));
        for s in &self.samples {
            let src = s
                .source
                .as_ref()
                .map(|p| format!(" {}", p.display()))
                .unwrap_or_default();
            kv("sample", format!("{} {}{src}", s.id, s.split));
        }
        format!("{MANIFEST_HEADER}\n{out}")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, d: String| Error::format(KIND, format!("line {line}: {d}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            _ => return Err(Error::format(KIND, format!("missing header `{MANIFEST_HEADER}`"))),
        }
        let mut fields: Vec<(String, String, usize)> = Vec::new();
        let mut samples = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(n, format!("expected `key = value`, got `{line}`")))?;
            if k == "sample" {
                let mut parts = v.splitn(3, ' ');
                let id = parts.next().unwrap_or_default().to_string();
                let split = parts
                    .next()
                    .ok_or_else(|| bad(n, "sample line lacks a split".into()))?
                    .parse()
                    .map_err(|e: Error| bad(n, e.to_string()))?;
                let source = parts.next().map(PathBuf::from);
                samples.push(ManifestSample { id, split, source });
            } else if fields.iter().any(|(f, _, _)| f == k) {
                return Err(bad(n, format!("duplicate key `{k}`")));
            } else {
                fields.push((k.to_string(), v.to_string(), n));
            }
        }
        let mut take = |key: &str| -> Result<(String, usize)> {
            let pos = fields
                .iter()
                .position(|(k, _, _)| k == key)
                .ok_or_else(|| Error::format(KIND, format!("missing key `{key}`")))?;
            let (_, v, n) = fields.remove(pos);
            Ok((v, n))
        };
        fn parse<T: FromStr>(key: &str, (v, n): (String, usize)) -> Result<T> {
            v.parse()
                .map_err(|_| Error::format(KIND, format!("line {n}: bad value `{v}` for `{key}`")))
        }
        fn parse_list<T: FromStr>(key: &str, (v, n): (String, usize)) -> Result<Vec<T>> {
            v.split(' ')
                .map(|x| {
                    x.parse()
                        .map_err(|_| Error::format(KIND, format!("line {n}: bad value `{x}` for `{key}`")))
                })
                .collect()
        }
        let pair = |key: &str, v: (String, usize)| -> Result<[f64; 2]> {
            let n = v.1;
            let l: Vec<f64> = parse_list(key, v)?;
            l.try_into()
                .map_err(|_| Error::format(KIND, format!("line {n}: `{key}` needs two values")))
        };
        let m = Manifest {
            seed: parse("seed", take("seed")?)?,
            root: take("root")?.0,
            projection: ProjectionConfig {
                width: parse("projection.width", take("projection.width")?)?,
                height: parse("projection.height", take("projection.height")?)?,
                theta_min: parse("projection.theta_min", take("projection.theta_min")?)?,
                theta_max: parse("projection.theta_max", take("projection.theta_max")?)?,
                phi_min: parse("projection.phi_min", take("projection.phi_min")?)?,
                phi_max: parse("projection.phi_max", take("projection.phi_max")?)?,
            },
            class_names: parse_list("classes", take("classes")?)?,
            class_counts: parse_list("class_counts", take("class_counts")?)?,
            class_balance: parse("class_balance", take("class_balance")?)?,
            class_weights: parse_list("class_weights", take("class_weights")?)?,
            weight_params: WeightMapParams {
                w0: parse("weight_map.w0", take("weight_map.w0")?)?,
                sigma: parse("weight_map.sigma", take("weight_map.sigma")?)?,
            },
            stats: ChannelStats {
                mean: pair("stats.mean", take("stats.mean")?)?,
                std: pair("stats.std", take("stats.std")?)?,
            },
            samples,
        };
        if let Some((k, _, n)) = fields.first() {
            return Err(Error::format(KIND, format!("line {n}: unknown key `{k}`")));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?).map_err(|e| e.in_file(path))
    }
}

/// A point-cloud file to include in a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceCloud {
    pub id: String,
    pub path: PathBuf,
}

impl SourceCloud {
    /// Every `*.bin` file in `dir`, sorted, with the file stem as id.
    pub fn scan_dir(dir: &Path) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "bin") {
                let id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::InvalidArgument(format!("bad file name {}", path.display())))?
                    .to_string();
                out.push(SourceCloud { id, path });
            }
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOptions {
    pub seed: u64,
    pub val_fraction: f64,
    pub projection: ProjectionConfig,
    pub class_names: Vec<String>,
    pub weight_params: WeightMapParams,
    pub class_balance: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            val_fraction: 0.2,
            projection: ProjectionConfig::default(),
            class_names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            weight_params: WeightMapParams::default(),
            class_balance: true,
        }
    }
}

/// Deletes the listed files unless disarmed.
struct Cleanup(Vec<PathBuf>);

impl Drop for Cleanup {
    fn drop(&mut self) {
        for p in &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

/// Projects every source cloud, assigns a seeded train/val split, computes
/// class weights and channel statistics over the train split, and writes
/// `manifest.txt` plus one `RIMG` file per sample under `out_dir`.
pub fn build_dataset(sources: &[SourceCloud], out_dir: &Path, opts: &BuildOptions) -> Result<Manifest> {
    opts.projection.validate()?;
    if sources.is_empty() {
        return Err(Error::InvalidArgument("no input clouds".into()));
    }
    if !(0.0..1.0).contains(&opts.val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "val fraction {} must be in [0, 1)",
            opts.val_fraction
        )));
    }
    let k = opts.class_names.len();
    let mut seen = HashSet::new();
    for s in sources {
        check_id(&s.id)?;
        if !seen.insert(&s.id) {
            return Err(Error::InvalidArgument(format!("duplicate sample id `{}`", s.id)));
        }
    }

    let n = sources.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_val = ((n as f64 * opts.val_fraction).round() as usize).min(n - 1);
    let mut splits = vec![Split::Train; n];
    for &i in &order[..n_val] {
        splits[i] = Split::Val;
    }

    let images = sources
        .par_iter()
        .map(|s| -> Result<_> {
            let cloud = read_labeled_point_cloud(&s.path)?;
            let labels = cloud.labels.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("{} has no label sidecar", s.path.display()))
            })?;
            if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
                return Err(Error::InvalidArgument(format!(
                    "{} has label {bad} but only {k} classes are configured",
                    s.path.display()
                )));
            }
            project(&cloud, &opts.projection)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut counts = vec![0u64; k];
    for (img, _) in images.iter().zip(&splits).filter(|(_, &s)| s == Split::Train) {
        let labels = img.labels.as_ref().expect("labeled clouds");
        for (&l, &m) in labels.iter().zip(&img.mask) {
            if m != 0 {
                counts[l as usize] += 1;
            }
        }
    }
    let balance = if opts.class_balance {
        ClassBalance::from_counts(&counts)?
    } else {
        ClassBalance::uniform(k)
    };
    let stats = ChannelStats::from_images(
        images
            .iter()
            .zip(&splits)
            .filter(|(_, &s)| s == Split::Train)
            .map(|(img, _)| (&img.depth[..], &img.elevation[..], &img.mask[..])),
    )?;

    let (h, w) = (opts.projection.height, opts.projection.width);
    let samples = images
        .par_iter()
        .map(|img| {
            let labels = img.labels.as_ref().expect("labeled clouds");
            let wm = boundary_weight_map(labels, &img.mask, h, w, &opts.weight_params, &balance)?;
            RangeSample::from_range_image(img, Some(wm.w))
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        seed: opts.seed,
        root: "samples".into(),
        projection: opts.projection,
        class_names: opts.class_names.clone(),
        class_counts: counts,
        class_balance: opts.class_balance,
        class_weights: balance.weights,
        weight_params: opts.weight_params,
        stats,
        samples: sources
            .iter()
            .zip(&splits)
            .map(|(s, &split)| ManifestSample {
                id: s.id.clone(),
                split,
                source: Some(s.path.clone()),
            })
            .collect(),
    };
    manifest.validate()?;

    let sample_dir = out_dir.join(&manifest.root);
    fs::create_dir_all(&sample_dir)?;
    let mut cleanup = Cleanup(Vec::new());
    for (s, sample) in sources.iter().zip(&samples) {
        let path = sample_dir.join(format!("{}.rimg", s.id));
        cleanup.0.push(path.clone());
        sample.write(&path)?;
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;
    cleanup.0.clear();
    Ok(manifest)
}

/// A manifest with its samples loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub dir: PathBuf,
    pub samples: Vec<RangeSample>,
}

/// `N` stacked samples: normalized input `N×2×H×W` and `N×H×W` targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub input: Tensor<f32>,
    pub labels: Vec<u8>,
    pub mask: Vec<u8>,
    pub weights: Vec<f32>,
}

impl Dataset {
    /// Loads `manifest.txt` (or the given manifest file) and its samples.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let manifest = Manifest::read(&manifest_path)?;
        let dir = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let k = manifest.num_classes();
        let (h, w) = (manifest.projection.height, manifest.projection.width);
        let samples = manifest
            .samples
            .par_iter()
            .map(|s| {
                let path = dir.join(&manifest.root).join(format!("{}.rimg", s.id));
                let sample = RangeSample::read(&path)?;
                if (sample.height, sample.width) != (h, w) {
                    return Err(Error::format(
                        "range image",
                        format!(
                            "{}: extent {}x{} differs from the manifest's {h}x{w}",
                            path.display(),
                            sample.height,
                            sample.width
                        ),
                    ));
                }
                if let Some(l) = sample.labels.as_ref().and_then(|l| l.iter().find(|&&l| l as usize >= k)) {
                    return Err(Error::format(
                        "range image",
                        format!("{}: label {l} exceeds {k} classes", path.display()),
                    ));
                }
                Ok(sample)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            dir,
            samples,
        })
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.manifest.samples[i].split == split)
            .collect()
    }

    /// Normalized `N×2×H×W` input of the given samples.
    pub fn batch_inputs(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let (h, w) = (self.manifest.projection.height, self.manifest.projection.width);
        let p = h * w;
        let mut input = vec![0f32; indices.len() * 2 * p];
        for (b, &i) in indices.iter().enumerate() {
            self.samples[i].normalize_into(&self.manifest.stats, &mut input[b * 2 * p..(b + 1) * 2 * p])?;
        }
        Tensor::from_vec(&[indices.len(), 2, h, w], input)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let (h, w) = (self.manifest.projection.height, self.manifest.projection.width);
        let p = h * w;
        let n = indices.len();
        let mut input = vec![0f32; n * 2 * p];
        let mut labels = Vec::with_capacity(n * p);
        let mut mask = Vec::with_capacity(n * p);
        let mut weights = Vec::with_capacity(n * p);
        for (b, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            s.normalize_into(&self.manifest.stats, &mut input[b * 2 * p..(b + 1) * 2 * p])?;
            let id = &self.manifest.samples[i].id;
            let l = s
                .labels
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("sample `{id}` has no labels")))?;
            labels.extend_from_slice(l);
            mask.extend_from_slice(&s.mask);
            match &s.weights {
                Some(wt) => weights.extend_from_slice(wt),
                None => weights.extend(s.mask.iter().map(|&m| f32::from(m))),
            }
        }
        Ok(Batch {
            indices: indices.to_vec(),
            input: Tensor::from_vec(&[n, 2, h, w], input)?,
            labels,
            mask,
            weights,
        })
    }
}

/// Per-epoch order of `indices`: a shuffle driven by `seed` on stream `epoch`.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order = indices.to_vec();
    order.shuffle(&mut rng);
    order
}

/// Batches of one epoch; the last batch may be short.
pub fn batch_plan(indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    Ok(epoch_order(indices, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Lazily assembled batches of one epoch.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    plan: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.plan.next().map(|idx| self.dataset.batch(&idx))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.plan.size_hint()
    }
}

pub fn batch_iterator(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter<'_>> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{split}` is empty")));
    }
    Ok(BatchIter {
        dataset,
        plan: batch_plan(&indices, batch_size, seed, epoch)?.into_iter(),
    })
}
