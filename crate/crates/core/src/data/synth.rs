//! Procedural labeled scenes ray-cast with one beam per range-image pixel.
//!
//! Cars are yawed boxes, pedestrians vertical cylinders, cyclists a narrow
//! yawed box with a cylinder rider on top. The ground is the plane
//! `z = ground_z`. Every pixel centre of the projection grid is a beam from
//! the origin; its nearest analytic intersection within `max_range` becomes
//! a point, and beams that hit nothing produce no point.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::projection::{PointCloud, ProjectionConfig, BACKGROUND};

pub const CAR: u8 = 1;
pub const PEDESTRIAN: u8 = 2;
pub const CYCLIST: u8 = 3;

const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Box rotated by `yaw` about the vertical axis through `center`.
    Box {
        center: [f64; 3],
        half: [f64; 3],
        yaw: f64,
    },
    /// Vertical cylinder with axis through `(center[0], center[1])`.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub label: u8,
}

impl Shape {
    /// Smallest positive ray parameter where the ray `t·dir` from the origin
    /// meets the surface.
    pub fn intersect(&self, dir: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Box { center, half, yaw } => {
                let (s, c) = yaw.sin_cos();
                // origin and direction in box coordinates
                let o = [
                    -(c * center[0] + s * center[1]),
                    -(-s * center[0] + c * center[1]),
                    -center[2],
                ];
                let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    if d[i].abs() < 1e-15 {
                        if o[i].abs() > half[i] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[i] - o[i]) / d[i];
                    let b = (half[i] - o[i]) / d[i];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t1 < t0 || t1 <= EPS {
                    return None;
                }
                Some(if t0 > EPS { t0 } else { t1 })
            }
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let mut best: Option<f64> = None;
                let mut offer = |t: f64| {
                    if t > EPS && best.map_or(true, |b| t < b) {
                        best = Some(t);
                    }
                };
                let a = dir[0] * dir[0] + dir[1] * dir[1];
                if a > 1e-15 {
                    let b = -2.0 * (dir[0] * center[0] + dir[1] * center[1]);
                    let cc = center[0] * center[0] + center[1] * center[1] - radius * radius;
                    let disc = b * b - 4.0 * a * cc;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                            let z = t * dir[2];
                            if z >= z_min && z <= z_max {
                                offer(t);
                            }
                        }
                    }
                }
                if dir[2].abs() > 1e-15 {
                    for z in [z_min, z_max] {
                        let t = z / dir[2];
                        let (x, y) = (t * dir[0] - center[0], t * dir[1] - center[1]);
                        if x * x + y * y <= radius * radius {
                            offer(t);
                        }
                    }
                }
                best
            }
        }
    }

    /// Radius of a vertical cylinder enclosing the shape's footprint.
    fn footprint(&self) -> ([f64; 2], f64) {
        match *self {
            Shape::Box { center, half, .. } => ([center[0], center[1]], half[0].hypot(half[1])),
            Shape::Cylinder { center, radius, .. } => (center, radius),
        }
    }
}

/// Parameters of a random scene. Size ranges are `[min, max]` in meters,
/// counts are inclusive `[min, max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub cars: [usize; 2],
    pub pedestrians: [usize; 2],
    pub cyclists: [usize; 2],
    pub car_length: [f64; 2],
    pub car_width: [f64; 2],
    pub car_height: [f64; 2],
    pub pedestrian_radius: [f64; 2],
    pub pedestrian_height: [f64; 2],
    pub bike_length: [f64; 2],
    pub bike_width: [f64; 2],
    pub bike_height: [f64; 2],
    pub rider_radius: [f64; 2],
    pub rider_height: [f64; 2],
    pub ground_z: f64,
    /// Objects lie entirely within this horizontal distance band.
    pub range_band: [f64; 2],
    /// Returns beyond this range are dropped.
    pub max_range: f64,
    pub projection: ProjectionConfig,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            cars: [2, 5],
            pedestrians: [1, 4],
            cyclists: [1, 3],
            car_length: [3.6, 4.8],
            car_width: [1.6, 1.9],
            car_height: [1.4, 1.7],
            pedestrian_radius: [0.25, 0.35],
            pedestrian_height: [1.6, 1.9],
            bike_length: [1.6, 1.9],
            bike_width: [0.4, 0.6],
            bike_height: [0.9, 1.1],
            rider_radius: [0.25, 0.32],
            rider_height: [0.7, 0.9],
            ground_z: -1.73,
            range_band: [4.0, 40.0],
            max_range: 80.0,
            projection: ProjectionConfig::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        let ranges = [
            ("car_length", self.car_length),
            ("car_width", self.car_width),
            ("car_height", self.car_height),
            ("pedestrian_radius", self.pedestrian_radius),
            ("pedestrian_height", self.pedestrian_height),
            ("bike_length", self.bike_length),
            ("bike_width", self.bike_width),
            ("bike_height", self.bike_height),
            ("rider_radius", self.rider_radius),
            ("rider_height", self.rider_height),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} range [{lo}, {hi}] is not positive")));
            }
        }
        for (name, [lo, hi]) in [("cars", self.cars), ("pedestrians", self.pedestrians), ("cyclists", self.cyclists)] {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("{name} count range [{lo}, {hi}] is empty")));
            }
        }
        let [near, far] = self.range_band;
        if !(near >= 2.0 && far <= 70.0 && far > near) {
            return Err(Error::InvalidArgument(format!(
                "range band [{near}, {far}] must lie within [2, 70] m"
            )));
        }
        if !(self.ground_z < 0.0 && self.ground_z.is_finite()) {
            return Err(Error::InvalidArgument(format!("ground_z {} must be below the sensor", self.ground_z)));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(Error::InvalidArgument(format!("max_range {} must be positive", self.max_range)));
        }
        Ok(())
    }
}

/// Ray-cast result with the primitives it was built from.
#[derive(Clone, Debug)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub cloud: PointCloud,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draws object primitives for `spec`; objects never overlap in plan view.
pub fn place_objects(spec: &SceneSpec) -> Result<Vec<Primitive>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cfg = &spec.projection;
    let g = spec.ground_z;
    let mut placed: Vec<([f64; 2], f64)> = Vec::new();
    let mut out = Vec::new();
    let kinds = [
        (CAR, spec.cars),
        (PEDESTRIAN, spec.pedestrians),
        (CYCLIST, spec.cyclists),
    ];
    for (label, [lo, hi]) in kinds {
        let count = rng.gen_range(lo..=hi);
        for _ in 0..count {
            let yaw = rng.gen_range(0.0..PI);
            let parts: Vec<Shape> = match label {
                CAR => {
                    let (l, w, h) = (
                        uniform(&mut rng, spec.car_length),
                        uniform(&mut rng, spec.car_width),
                        uniform(&mut rng, spec.car_height),
                    );
                    vec![Shape::Box {
                        center: [0.0, 0.0, g + h / 2.0],
                        half: [l / 2.0, w / 2.0, h / 2.0],
                        yaw,
                    }]
                }
                PEDESTRIAN => {
                    let (r, h) = (
                        uniform(&mut rng, spec.pedestrian_radius),
                        uniform(&mut rng, spec.pedestrian_height),
                    );
                    vec![Shape::Cylinder {
                        center: [0.0, 0.0],
                        radius: r,
                        z_min: g,
                        z_max: g + h,
                    }]
                }
                _ => {
                    let (l, w, h) = (
                        uniform(&mut rng, spec.bike_length),
                        uniform(&mut rng, spec.bike_width),
                        uniform(&mut rng, spec.bike_height),
                    );
                    let (r, rh) = (
                        uniform(&mut rng, spec.rider_radius),
                        uniform(&mut rng, spec.rider_height),
                    );
                    vec![
                        Shape::Box {
                            center: [0.0, 0.0, g + h / 2.0],
                            half: [l / 2.0, w / 2.0, h / 2.0],
                            yaw,
                        },
                        Shape::Cylinder {
                            center: [0.0, 0.0],
                            radius: r,
                            z_min: g + h,
                            z_max: g + h + rh,
                        },
                    ]
                }
            };
            let radius = parts.iter().map(|p| p.footprint().1).fold(0.0, f64::max);
            let [near, far] = spec.range_band;
            if far - near <= 2.0 * radius {
                continue;
            }
            for _attempt in 0..64 {
                let dist = rng.gen_range(near + radius..far - radius);
                let theta = rng.gen_range(cfg.theta_min..cfg.theta_max);
                let at = [dist * theta.cos(), dist * theta.sin()];
                let clear = placed
                    .iter()
                    .all(|(c, r)| (c[0] - at[0]).hypot(c[1] - at[1]) > r + radius + 0.5);
                if !clear {
                    continue;
                }
                placed.push((at, radius));
                for part in &parts {
                    let shape = match *part {
                        Shape::Box { center, half, yaw } => Shape::Box {
                            center: [at[0], at[1], center[2]],
                            half,
                            yaw,
                        },
                        Shape::Cylinder {
                            radius,
                            z_min,
                            z_max,
                            ..
                        } => Shape::Cylinder {
                            center: at,
                            radius,
                            z_min,
                            z_max,
                        },
                    };
                    out.push(Primitive { shape, label });
                }
                break;
            }
        }
    }
    Ok(out)
}

/// Unit beam direction through the centre of pixel `(row, col)`.
pub fn beam_direction(cfg: &ProjectionConfig, row: usize, col: usize) -> [f64; 3] {
    let (theta, phi) = cfg.pixel_center(row, col);
    [phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()]
}

/// Casts one beam per pixel of `cfg` against the ground and `primitives`.
/// Points are emitted in row-major pixel order.
pub fn cast_scene(
    primitives: &[Primitive],
    ground_z: f64,
    max_range: f64,
    cfg: &ProjectionConfig,
) -> Result<PointCloud> {
    cfg.validate()?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let dir = beam_direction(cfg, row, col);
            let mut best: Option<(f64, u8)> = None;
            if dir[2] < 0.0 {
                best = Some((ground_z / dir[2], BACKGROUND));
            }
            for p in primitives {
                if let Some(t) = p.shape.intersect(dir) {
                    if best.map_or(true, |(b, _)| t < b) {
                        best = Some((t, p.label));
                    }
                }
            }
            if let Some((t, label)) = best.filter(|&(t, _)| t <= max_range) {
                points.push([(t * dir[0]) as f32, (t * dir[1]) as f32, (t * dir[2]) as f32]);
                labels.push(label);
            }
        }
    }
    Ok(PointCloud {
        points,
        intensity: None,
        labels: Some(labels),
    })
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let primitives = place_objects(spec)?;
    let cloud = cast_scene(&primitives, spec.ground_z, spec.max_range, &spec.projection)?;
    Ok(Scene { primitives, cloud })
}

/// Seed of scene `index` in a set generated from `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.gen()
}

/// Generates `count` scenes from `template` with per-scene seeds derived
/// from `seed`, writing `scene_NNNN.bin` and its label sidecar into `dir`.
pub fn write_scenes(
    dir: &std::path::Path,
    template: &SceneSpec,
    seed: u64,
    count: usize,
) -> Result<Vec<super::SourceCloud>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let spec = SceneSpec {
            seed: scene_seed(seed, i as u64),
            ..template.clone()
        };
        let scene = generate_scene(&spec)?;
        let id = format!("scene_{i:04}");
        let path = dir.join(format!("{id}.bin"));
        super::write_labeled_point_cloud(&scene.cloud, &path)?;
        written.push(super::SourceCloud { id, path });
    }
    Ok(written)
}
