//! Spherical projection of point clouds onto a 2-channel range image.
//!
//! Each point is converted to azimuth `θ = atan2(y, x)`, elevation angle
//! `φ = asin(z / d)` and range `d`, then binned into
//! `col = ⌊(θ − θ_min)/Δθ⌋`, `row = ⌊(φ_max − φ)/Δφ⌋`, so row 0 holds the
//! highest elevation. When several points share a pixel the nearest one
//! provides the depth, elevation (its `z`) and label. Empty pixels hold 0 and
//! are marked invalid in the mask.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label id reserved for background and empty pixels.
pub const BACKGROUND: u8 = 0;

/// Ordered list of points in the sensor frame (meters).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub intensity: Option<Vec<f32>>,
    pub labels: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Self {
        Self {
            points,
            intensity: None,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks finiteness and the lengths of the per-point arrays.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::NonFinite(format!("point {i} has a non-finite coordinate")));
        }
        for (name, len) in [
            ("intensity", self.intensity.as_ref().map(Vec::len)),
            ("labels", self.labels.as_ref().map(Vec::len)),
        ] {
            if let Some(len) = len {
                if len != self.points.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{name} has {len} entries for {} points",
                        self.points.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalCoords {
    /// Azimuth in `[−π, π]`.
    pub theta: f64,
    /// Elevation angle in `[−π/2, π/2]`.
    pub phi: f64,
    /// Range in meters.
    pub d: f64,
}

pub fn cartesian_to_spherical(p: [f64; 3]) -> Result<SphericalCoords> {
    let [x, y, z] = p;
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err(Error::NonFinite(format!("point {p:?}")));
    }
    let d = (x * x + y * y + z * z).sqrt();
    if d == 0.0 {
        return Err(Error::InvalidArgument(
            "angles are undefined for a point at the origin".into(),
        ));
    }
    Ok(SphericalCoords {
        theta: y.atan2(x),
        phi: (z / d).clamp(-1.0, 1.0).asin(),
        d,
    })
}

/// Image size and angular field of view (radians).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub width: usize,
    pub height: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub phi_min: f64,
    pub phi_max: f64,
}

impl Default for ProjectionConfig {
    /// 512×64, azimuth ±45°, elevation −24.9°…+2°.
    fn default() -> Self {
        Self {
            width: 512,
            height: 64,
            theta_min: (-45.0f64).to_radians(),
            theta_max: 45.0f64.to_radians(),
            phi_min: (-24.9f64).to_radians(),
            phi_max: 2.0f64.to_radians(),
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.theta_min, self.theta_max, self.phi_min, self.phi_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.theta_max <= self.theta_min || self.phi_max <= self.phi_min {
            return Err(Error::InvalidArgument(format!(
                "field of view must be finite and non-empty: {self:?}"
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image extents must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn delta_theta(&self) -> f64 {
        (self.theta_max - self.theta_min) / self.width as f64
    }

    pub fn delta_phi(&self) -> f64 {
        (self.phi_max - self.phi_min) / self.height as f64
    }

    /// Pixel `(row, col)` of a direction, `None` outside the field of view.
    pub fn pixel_of(&self, s: &SphericalCoords) -> Option<(usize, usize)> {
        let col = ((s.theta - self.theta_min) / self.delta_theta()).floor();
        let row = ((self.phi_max - s.phi) / self.delta_phi()).floor();
        let in_range = |v: f64, n: usize| v >= 0.0 && v < n as f64;
        (in_range(row, self.height) && in_range(col, self.width))
            .then_some((row as usize, col as usize))
    }

    /// Direction `(θ, φ)` through the centre of a pixel.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.theta_min + (col as f64 + 0.5) * self.delta_theta(),
            self.phi_max - (row as f64 + 0.5) * self.delta_phi(),
        )
    }
}

/// `H×W` depth/elevation image with validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f32>,
    pub elevation: Vec<f32>,
    pub mask: Vec<u8>,
    pub labels: Option<Vec<u8>>,
    /// Pixel `(row, col)` of every input point, `None` for dropped points.
    pub index_map: Option<Vec<Option<(u32, u32)>>>,
}

impl RangeImage {
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            depth: vec![0.0; n],
            elevation: vec![0.0; n],
            mask: vec![0; n],
            labels: None,
            index_map: None,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

/// Bins `cloud` into a range image; see the module docs for the mapping.
pub fn project(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<RangeImage> {
    cfg.validate()?;
    cloud.validate()?;
    let mut img = RangeImage::empty(cfg.height, cfg.width);
    let mut nearest = vec![f64::INFINITY; cfg.height * cfg.width];
    let mut winner = vec![usize::MAX; cfg.height * cfg.width];
    let mut index_map = Vec::with_capacity(cloud.len());

    for (i, p) in cloud.points.iter().enumerate() {
        let Ok(s) = cartesian_to_spherical([p[0] as f64, p[1] as f64, p[2] as f64]) else {
            index_map.push(None);
            continue;
        };
        let Some((row, col)) = cfg.pixel_of(&s) else {
            index_map.push(None);
            continue;
        };
        let px = row * cfg.width + col;
        if s.d < nearest[px] {
            nearest[px] = s.d;
            winner[px] = i;
        }
        index_map.push(Some((row as u32, col as u32)));
    }

    let mut labels = cloud
        .labels
        .as_ref()
        .map(|_| vec![BACKGROUND; cfg.height * cfg.width]);
    for (px, &i) in winner.iter().enumerate() {
        if i == usize::MAX {
            continue;
        }
        img.depth[px] = nearest[px] as f32;
        img.elevation[px] = cloud.points[i][2];
        img.mask[px] = 1;
        if let (Some(out), Some(src)) = (labels.as_mut(), cloud.labels.as_ref()) {
            out[px] = src[i];
        }
    }
    img.labels = labels;
    img.index_map = Some(index_map);
    Ok(img)
}

/// Per-point labels read back from the image; points that were dropped
/// during projection receive [`BACKGROUND`].
pub fn backproject_labels(image: &RangeImage, cloud: &PointCloud) -> Result<Vec<u8>> {
    let labels = image
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("range image carries no labels".into()))?;
    backproject_with(image, cloud, labels)
}

/// Like [`backproject_labels`] with an explicit `H×W` label grid, e.g. a
/// network prediction.
pub fn backproject_with(image: &RangeImage, cloud: &PointCloud, labels: &[u8]) -> Result<Vec<u8>> {
    let index_map = image
        .index_map
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("range image has no index map".into()))?;
    if index_map.len() != cloud.len() {
        return Err(Error::InvalidArgument(format!(
            "index map covers {} points but the cloud has {}",
            index_map.len(),
            cloud.len()
        )));
    }
    if labels.len() != image.height * image.width {
        return Err(Error::InvalidArgument(format!(
            "label grid has {} entries for a {}x{} image",
            labels.len(),
            image.height,
            image.width
        )));
    }
    Ok(index_map
        .iter()
        .map(|entry| match *entry {
            Some((r, c)) => labels[r as usize * image.width + c as usize],
            None => BACKGROUND,
        })
        .collect())
}

/// Per-channel mean and standard deviation (depth, elevation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl ChannelStats {
    pub const IDENTITY: Self = Self {
        mean: [0.0, 0.0],
        std: [1.0, 1.0],
    };

    /// Statistics over the valid pixels of `images`, accumulated in order.
    pub fn from_images<'a, I>(images: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f32], &'a [f32], &'a [u8])>,
    {
        let mut count = 0u64;
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        for (depth, elevation, mask) in images {
            for ((&d, &z), &m) in depth.iter().zip(elevation).zip(mask) {
                if m == 0 {
                    continue;
                }
                count += 1;
                for (c, v) in [d as f64, z as f64].into_iter().enumerate() {
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
        }
        if count == 0 {
            return Err(Error::InvalidArgument(
                "channel statistics need at least one valid pixel".into(),
            ));
        }
        let n = count as f64;
        let mean = [sum[0] / n, sum[1] / n];
        let std = [0, 1].map(|c| (sum_sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt());
        Ok(Self { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite())
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "channel statistics need finite means and positive deviations: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Writes the standardized `2×H×W` planes of `image` into `out`; invalid
/// pixels are 0.
pub fn normalize_into<T: Scalar>(
    depth: &[f32],
    elevation: &[f32],
    mask: &[u8],
    stats: &ChannelStats,
    out: &mut [T],
) -> Result<()> {
    stats.validate()?;
    let n = mask.len();
    if depth.len() != n || elevation.len() != n || out.len() != 2 * n {
        return Err(Error::shape(
            "normalize_channels",
            format!("planes of {} / {} / {} for output {}", depth.len(), elevation.len(), n, out.len()),
        ));
    }
    for (c, plane) in [depth, elevation].into_iter().enumerate() {
        let (mean, std) = (stats.mean[c], stats.std[c]);
        for ((o, &v), &m) in out[c * n..(c + 1) * n].iter_mut().zip(plane).zip(mask) {
            *o = if m == 0 {
                T::zero()
            } else {
                T::of((v as f64 - mean) / std)
            };
        }
    }
    Ok(())
}

/// Standardized `[2, H, W]` network input for one image.
pub fn normalize_channels<T: Scalar>(image: &RangeImage, stats: &ChannelStats) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); 2 * image.height * image.width];
    normalize_into(&image.depth, &image.elevation, &image.mask, stats, &mut out)?;
    Tensor::from_vec(&[2, image.height, image.width], out)
}
