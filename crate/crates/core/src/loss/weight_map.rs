use crate::error::{Error, Result};

/// Boundary term parameters: `w0·exp(−(d1 + d2)² / (2σ²))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightMapParams {
    pub w0: f64,
    /// Pixels.
    pub sigma: f64,
}

impl Default for WeightMapParams {
    fn default() -> Self {
        Self { w0: 10.0, sigma: 5.0 }
    }
}

/// Per-class weights `w_c` compensating for class frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBalance {
    pub weights: Vec<f64>,
}

impl ClassBalance {
    pub const MIN_WEIGHT: f64 = 0.1;
    pub const MAX_WEIGHT: f64 = 10.0;

    /// All classes weighted 1 (balancing disabled).
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: vec![1.0; num_classes],
        }
    }

    /// Inverse-frequency weights from per-class valid-pixel counts.
    ///
    /// The raw weight `1 / (K·f_c)` is clamped to `[0.1, 10]` (absent classes
    /// get the upper bound) and the result is scaled so the pixel-weighted
    /// mean over the counted pixels is 1.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if counts.is_empty() || total == 0 {
            return Err(Error::InvalidArgument(
                "class balancing needs at least one counted pixel".into(),
            ));
        }
        let k = counts.len() as f64;
        let raw: Vec<f64> = counts
            .iter()
            .map(|&c| {
                let f = c as f64 / total as f64;
                if f == 0.0 {
                    Self::MAX_WEIGHT
                } else {
                    (1.0 / (k * f)).clamp(Self::MIN_WEIGHT, Self::MAX_WEIGHT)
                }
            })
            .collect();
        let mean: f64 = raw
            .iter()
            .zip(counts)
            .map(|(&w, &c)| w * c as f64 / total as f64)
            .sum();
        Ok(Self {
            weights: raw.iter().map(|w| w / mean).collect(),
        })
    }
}

/// Per-pixel loss weights, 0 on invalid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub height: usize,
    pub width: usize,
    pub w: Vec<f32>,
}

const FAR: f64 = f64::INFINITY;

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn distance_transform_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq == FAR {
            continue;
        }
        let mut s = f64::NEG_INFINITY;
        while let Some(&p) = v.last() {
            let qf = q as f64;
            let pf = p as f64;
            s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
                s = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        v.push(q);
        z.push(s);
    }
    if v.is_empty() {
        out.fill(FAR);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` site.
fn squared_distance_to(sites: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut column = vec![0.0; height];
    let mut result = vec![0.0; height];
    for c in 0..width {
        for r in 0..height {
            column[r] = grid[r * width + c];
        }
        distance_transform_1d(&column, &mut result, &mut v, &mut z);
        for r in 0..height {
            grid[r * width + c] = result[r];
        }
    }
    let mut row_out = vec![0.0; width];
    for r in 0..height {
        let row = &grid[r * width..(r + 1) * width];
        distance_transform_1d(row, &mut row_out, &mut v, &mut z);
        grid[r * width..(r + 1) * width].copy_from_slice(&row_out);
    }
    grid
}

/// Distances `(d1, d2)` from each pixel to the nearest and second-nearest
/// label regions, where the region of label `c` is the set of valid pixels
/// labelled `c`. A pixel lies inside its own region, so for valid pixels
/// `d1 = 0` and `d2` is the distance to the closest differently labelled
/// valid pixel. Missing regions give infinite distances.
pub fn boundary_distances(
    labels: &[u8],
    mask: &[u8],
    height: usize,
    width: usize,
) -> Result<Vec<(f64, f64)>> {
    let n = height * width;
    if labels.len() != n || mask.len() != n {
        return Err(Error::shape(
            "boundary_weight_map",
            format!("label/mask planes of {}/{} for {height}x{width}", labels.len(), mask.len()),
        ));
    }
    let mut present: Vec<u8> = labels
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m != 0)
        .map(|(&l, _)| l)
        .collect();
    present.sort_unstable();
    present.dedup();

    let mut best = vec![(FAR, FAR); n];
    for &class in &present {
        let sites: Vec<bool> = labels
            .iter()
            .zip(mask)
            .map(|(&l, &m)| m != 0 && l == class)
            .collect();
        let dist = squared_distance_to(&sites, height, width);
        for (b, &d2) in best.iter_mut().zip(&dist) {
            let d = d2.sqrt();
            if d < b.0 {
                *b = (d, b.0);
            } else if d < b.1 {
                b.1 = d;
            }
        }
    }
    Ok(best)
}

/// `w(x) = w_c(l(x)) + w0·exp(−(d1 + d2)²/(2σ²))` on valid pixels, 0
/// elsewhere.
pub fn boundary_weight_map(
    labels: &[u8],
    mask: &[u8],
    height: usize,
    width: usize,
    params: &WeightMapParams,
    balance: &ClassBalance,
) -> Result<WeightMap> {
    if !(params.sigma > 0.0) || !(params.w0 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weight map needs sigma > 0 and w0 >= 0, got {params:?}"
        )));
    }
    let distances = boundary_distances(labels, mask, height, width)?;
    let two_sigma_sq = 2.0 * params.sigma * params.sigma;
    let mut w = vec![0.0f32; height * width];
    for (i, out) in w.iter_mut().enumerate() {
        if mask[i] == 0 {
            continue;
        }
        let class = labels[i] as usize;
        let wc = *balance.weights.get(class).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "label {class} has no class weight ({} classes)",
                balance.weights.len()
            ))
        })?;
        let (d1, d2) = distances[i];
        let sum = d1 + d2;
        let boundary = if sum.is_finite() {
            params.w0 * (-(sum * sum) / two_sigma_sq).exp()
        } else {
            0.0
        };
        *out = (wc + boundary) as f32;
    }
    Ok(WeightMap { height, width, w })
}
