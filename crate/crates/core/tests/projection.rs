mod common;

use std::collections::{HashMap, HashSet};

use common::{bin_by_scan, rng};
use rand::Rng;
use riunet::data::synth::{beam_direction, cast_scene, generate_scene, place_objects, Primitive, Shape, SceneSpec};
use riunet::projection::*;

fn random_cloud(n: usize, r: &mut rand_chacha::ChaCha8Rng) -> PointCloud {
    let points = (0..n)
        .map(|_| {
            let d: f64 = r.gen_range(1.0..60.0);
            let theta: f64 = r.gen_range(-1.2..1.2);
            let phi: f64 = r.gen_range(-0.5..0.1);
            [
                (d * phi.cos() * theta.cos()) as f32,
                (d * phi.cos() * theta.sin()) as f32,
                (d * phi.sin()) as f32,
            ]
        })
        .collect();
    PointCloud {
        points,
        intensity: None,
        labels: Some((0..n).map(|_| r.gen_range(0..4)).collect()),
    }
}

#[test]
fn binning_matches_edge_scan() {
    let mut r = rng(11);
    for case in 0..25 {
        let cfg = ProjectionConfig {
            width: [512, 64, 37][case % 3],
            height: [64, 16, 9][case % 3],
            ..ProjectionConfig::default()
        };
        let cloud = random_cloud(r.gen_range(0..3000), &mut r);
        let img = project(&cloud, &cfg).unwrap();
        let idx = img.index_map.as_ref().unwrap();

        let mut nearest: HashMap<usize, (f64, usize)> = HashMap::new();
        for (i, p) in cloud.points.iter().enumerate() {
            let bin = bin_by_scan(&cfg, *p);
            assert_eq!(idx[i].map(|(a, b)| (a as usize, b as usize)), bin, "point {i}");
            if let Some((row, col)) = bin {
                let d = p.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
                let e = nearest.entry(row * cfg.width + col).or_insert((d, i));
                if d < e.0 {
                    *e = (d, i);
                }
            }
        }
        assert_eq!(img.valid_count(), nearest.len());
        let labels = img.labels.as_ref().unwrap();
        for px in 0..cfg.width * cfg.height {
            match nearest.get(&px) {
                Some(&(d, i)) => {
                    assert_eq!(img.mask[px], 1);
                    assert_eq!(img.depth[px], d as f32);
                    assert_eq!(img.elevation[px], cloud.points[i][2]);
                    assert_eq!(labels[px], cloud.labels.as_ref().unwrap()[i]);
                }
                None => {
                    assert_eq!((img.mask[px], img.depth[px], img.elevation[px], labels[px]), (0, 0.0, 0.0, 0));
                }
            }
        }
    }
}

#[test]
fn synthetic_clouds_round_trip_labels() {
    let cfg = ProjectionConfig::default();
    for seed in 0..100 {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        let cloud = generate_scene(&spec).unwrap().cloud;
        let img = project(&cloud, &cfg).unwrap();
        let back = backproject_labels(&img, &cloud).unwrap();
        let idx = img.index_map.as_ref().unwrap();
        let truth = cloud.labels.as_ref().unwrap();
        let mut bins = HashSet::new();
        for i in 0..cloud.len() {
            if let Some(b) = idx[i] {
                assert_eq!(back[i], truth[i], "seed {seed} point {i}");
                bins.insert(b);
            }
        }
        assert_eq!(img.valid_count(), bins.len(), "seed {seed}");
        assert_eq!(bins.len(), cloud.len(), "seed {seed}: synthetic clouds are collision-free");
    }
}

#[test]
fn empty_scene_is_ground_only() {
    let cfg = ProjectionConfig::default();
    let cloud = cast_scene(&[], -1.73, 80.0, &cfg).unwrap();
    assert!(cloud.labels.as_ref().unwrap().iter().all(|&l| l == BACKGROUND));
    for p in &cloud.points {
        assert!((p[2] as f64 + 1.73).abs() < 1e-5);
        let d = p.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
        assert!(d <= 80.0 + 1e-4);
    }
    assert!(!cloud.is_empty());
}

#[test]
fn unit_box_ahead_is_hit_by_its_beams() {
    let cfg = ProjectionConfig::default();
    let cube = Primitive {
        shape: Shape::Box { center: [10.0, 0.0, 0.0], half: [0.5, 0.5, 0.5], yaw: 0.0 },
        label: 1,
    };
    let cloud = cast_scene(&[cube], -1.73, 80.0, &cfg).unwrap();
    let labels = cloud.labels.as_ref().unwrap();
    let mut hits = 0;
    for (p, &l) in cloud.points.iter().zip(labels) {
        if l == 1 {
            hits += 1;
            assert!((p[0] - 9.5).abs() < 1e-4, "front face at x = 9.5, got {p:?}");
            assert!(p[1].abs() <= 0.5 + 1e-4 && p[2].abs() <= 0.5 + 1e-4);
        }
    }
    // the face spans about 2·atan(0.05) in both angles
    let expect_cols = (2.0 * 0.05f64.atan() / cfg.delta_theta()) as i64;
    let expect_rows = (2.0 * 0.05f64.atan() / cfg.delta_phi()) as i64;
    assert!((hits as i64 - expect_cols * expect_rows).abs() <= expect_cols + expect_rows + 4, "{hits}");
}

fn inside(shape: &Shape, p: [f64; 3]) -> bool {
    match *shape {
        Shape::Box { center, half, yaw } => {
            let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
            let (s, c) = yaw.sin_cos();
            let local = [c * dx + s * dy, -s * dx + c * dy, p[2] - center[2]];
            (0..3).all(|i| local[i].abs() <= half[i])
        }
        Shape::Cylinder { center, radius, z_min, z_max } => {
            let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
            dx * dx + dy * dy <= radius * radius && p[2] >= z_min && p[2] <= z_max
        }
    }
}

/// First entry into any primitive or below the ground, by marching in steps
/// of `step` and bisecting the first occupied interval.
fn march(prims: &[Primitive], ground_z: f64, dir: [f64; 3], max_t: f64, step: f64) -> Option<(f64, u8)> {
    let hit = |t: f64| -> Option<u8> {
        let p = [t * dir[0], t * dir[1], t * dir[2]];
        prims
            .iter()
            .find(|q| inside(&q.shape, p))
            .map(|q| q.label)
            .or((p[2] <= ground_z).then_some(BACKGROUND))
    };
    let mut t = 0.0;
    while t <= max_t + step {
        if let Some(label) = hit(t) {
            let (mut lo, mut hi) = ((t - step).max(0.0), t);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if hit(mid).is_some() {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some((hi, hit(hi).unwrap_or(label)));
        }
        t += step;
    }
    None
}

#[test]
fn cast_scenes_agree_with_marching_oracle() {
    let cfg = ProjectionConfig::default();
    let mut r = rng(12);
    let (mut compared, mut grazing) = (0usize, 0usize);
    for seed in 0..3 {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        let prims = place_objects(&spec).unwrap();
        let cloud = cast_scene(&prims, spec.ground_z, spec.max_range, &cfg).unwrap();
        let img = project(&cloud, &cfg).unwrap();
        let labels = img.labels.as_ref().unwrap();
        // beams that hit primitives are over-sampled
        let mut pixels: Vec<usize> = (0..cfg.width * cfg.height)
            .filter(|&px| labels[px] != BACKGROUND)
            .step_by(3)
            .collect();
        pixels.extend((0..600).map(|_| r.gen_range(0..cfg.width * cfg.height)));
        for px in pixels {
            let dir = beam_direction(&cfg, px / cfg.width, px % cfg.width);
            let oracle = march(&prims, spec.ground_z, dir, spec.max_range, 0.01)
                .filter(|&(t, _)| t <= spec.max_range);
            compared += 1;
            match oracle {
                None => assert_eq!(img.mask[px], 0, "pixel {px}: oracle saw no surface"),
                Some((t, label)) => {
                    assert_eq!(img.mask[px], 1, "pixel {px}: oracle hit at {t}");
                    let got = img.depth[px] as f64;
                    if (got - t).abs() < 1e-4 {
                        assert_eq!(labels[px], label, "pixel {px}");
                    } else {
                        // a sliver thinner than the marching step was skipped
                        assert!(got < t, "pixel {px}: cast {got} behind oracle {t}");
                        grazing += 1;
                    }
                }
            }
        }
    }
    assert!(grazing * 200 < compared, "{grazing} grazing of {compared}");
}
