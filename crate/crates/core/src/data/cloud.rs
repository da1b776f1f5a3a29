//! KITTI-style point-cloud files.
//!
//! A cloud file is a sequence of 16-byte records `x, y, z, intensity`, each a
//! little-endian `f32`. Labels live in an optional sidecar holding one
//! little-endian `u32` class id per point.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::projection::PointCloud;

const RECORD: usize = 16;
const KIND: &str = "point cloud";
const LABEL_KIND: &str = "label file";

pub fn decode_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::format(
            KIND,
            format!(
                "size {} is not a multiple of {RECORD}; {} trailing bytes at offset {}",
                bytes.len(),
                bytes.len() % RECORD,
                bytes.len() - bytes.len() % RECORD
            ),
        ));
    }
    let n = bytes.len() / RECORD;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let mut v = [0f32; 4];
        for (j, c) in rec.chunks_exact(4).enumerate() {
            v[j] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v[j].is_finite() {
                return Err(Error::format(
                    KIND,
                    format!("non-finite value at byte offset {} (point {i})", i * RECORD + 4 * j),
                ));
            }
        }
        points.push([v[0], v[1], v[2]]);
        intensity.push(v[3]);
    }
    Ok(PointCloud {
        points,
        intensity: Some(intensity),
        labels: None,
    })
}

/// Missing intensities are written as 0.
pub fn encode_point_cloud(cloud: &PointCloud) -> Result<Vec<u8>> {
    cloud.validate()?;
    let mut out = Vec::with_capacity(cloud.len() * RECORD);
    for (i, p) in cloud.points.iter().enumerate() {
        let it = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p[0], p[1], p[2], it] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8], num_points: usize) -> Result<Vec<u8>> {
    if bytes.len() != 4 * num_points {
        return Err(Error::format(
            LABEL_KIND,
            format!("{} bytes for {num_points} points, expected {}", bytes.len(), 4 * num_points),
        ));
    }
    bytes
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let v = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            u8::try_from(v).map_err(|_| {
                Error::format(LABEL_KIND, format!("label {v} at byte offset {} is out of range", 4 * i))
            })
        })
        .collect()
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect()
}

/// Sidecar path for labels: `scan.bin` → `scan.label`.
pub fn label_path(cloud_path: &Path) -> PathBuf {
    cloud_path.with_extension("label")
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    decode_point_cloud(&fs::read(path)?).map_err(|e| e.in_file(path))
}

/// Reads a cloud and, when present, its label sidecar.
pub fn read_labeled_point_cloud(path: &Path) -> Result<PointCloud> {
    let mut cloud = read_point_cloud(path)?;
    let lp = label_path(path);
    if lp.exists() {
        cloud.labels = Some(decode_labels(&fs::read(&lp)?, cloud.len()).map_err(|e| e.in_file(&lp))?);
    }
    Ok(cloud)
}

pub fn write_point_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    write_atomic(path, &encode_point_cloud(cloud)?)
}

/// Writes the cloud and, if it carries labels, the sidecar.
pub fn write_labeled_point_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    write_point_cloud(cloud, path)?;
    if let Some(labels) = &cloud.labels {
        if let Err(e) = write_atomic(&label_path(path), &encode_labels(labels)) {
            let _ = fs::remove_file(path);
            return Err(e);
        }
    }
    Ok(())
}
