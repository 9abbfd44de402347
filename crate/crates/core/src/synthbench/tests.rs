use super::*;
use crate::distill::PretrainConfig;
use crate::pcdata::{validate, COLOR_BIT, NORMAL_BIT};
use crate::rng::rng_for;

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn generators_are_deterministic() {
    for d in Domain::ALL {
        assert_eq!(gen_cloud(d, 9), gen_cloud(d, 9), "{d}");
        assert_ne!(gen_cloud(d, 9).coords, gen_cloud(d, 10).coords, "{d}");
    }
    assert_eq!(gen_indoor(4), gen_indoor(4));
}

#[test]
fn generated_clouds_validate() {
    for seed in 0..4 {
        for d in Domain::ALL {
            let pc = gen_cloud(d, seed);
            assert!(validate(&pc).is_empty(), "{d} {seed}: {:?}", validate(&pc).first());
            assert_eq!(pc.native_grid, d.default_native_grid());
        }
        for f in &gen_indoor(seed).frames.clouds {
            assert!(validate(f).is_empty());
        }
    }
}

#[test]
fn object_shape_contract() {
    for seed in 0..8 {
        let pc = gen_object(seed);
        assert!((1000..=4000).contains(&pc.len()));
        let r = pc.coords.iter().map(|&p| dist(p, [0.0; 3])).fold(0.0, f64::max);
        assert!(r <= 1.0 + 1e-6, "{r}");
        let labels = pc.labels.as_ref().unwrap();
        assert!(labels.iter().all(|l| (0..3).contains(l)));
        assert!(pc.mask.iter().all(|&m| m & NORMAL_BIT != 0));
        let colored = pc.mask.iter().filter(|&&m| m & COLOR_BIT != 0).count();
        assert!(colored == 0 || colored == pc.len());
    }
}

#[test]
fn single_sphere_labels_and_radial_normals() {
    let c = [0.1, -0.2, 0.3];
    let parts = [Primitive::Sphere { center: c, radius: 0.4 }];
    let pc = sample_parts(&parts, 500, false, &mut rng_for(&[3]));
    let labels = pc.labels.as_ref().unwrap();
    assert!(labels.iter().all(|&l| l == labels[0]));
    for (p, n) in pc.coords.iter().zip(&pc.normals) {
        let radial = [0, 1, 2].map(|i| (p[i] - c[i]) / 0.4);
        assert!(dist(radial, *n) < 1e-3);
    }
}

#[test]
fn box_points_lie_on_the_face_of_their_normal() {
    let center = [0.2, 0.0, -0.1];
    let half = [0.3, 0.1, 0.2];
    let parts = [Primitive::Box { center, half }];
    let pc = sample_parts(&parts, 600, true, &mut rng_for(&[5]));
    let mut seen = std::collections::HashSet::new();
    for (p, n) in pc.coords.iter().zip(&pc.normals) {
        let axis = (0..3).find(|&a| n[a] != 0.0).unwrap();
        assert_eq!(n[axis].abs(), 1.0);
        assert!((0..3).all(|a| a == axis || n[a] == 0.0));
        assert!(((p[axis] - center[axis]) * n[axis] - half[axis]).abs() < 1e-12);
        for a in 0..3 {
            assert!((p[a] - center[a]).abs() <= half[a] + 1e-12);
        }
        seen.insert((axis, n[axis] > 0.0));
    }
    assert_eq!(seen.len(), 6);
}

#[test]
fn prepose_box_normals_are_axis_aligned() {
    for seed in 0..20 {
        let obj = gen_object_prepose(seed);
        let labels = obj.cloud.labels.as_ref().unwrap();
        for (n, &l) in obj.cloud.normals.iter().zip(labels) {
            if l == 0 {
                assert_eq!(n.iter().filter(|v| v.abs() == 1.0).count(), 1);
                assert_eq!(n.iter().filter(|&&v| v == 0.0).count(), 2);
            }
        }
        let posed = gen_object(seed);
        let expect = obj.rotation * nalgebra::Vector3::from(obj.cloud.normals[0]);
        let got = posed.normals[0];
        assert!((0..3).all(|i| (expect[i] - got[i]).abs() < 1e-6));
    }
}

#[test]
fn indoor_contract() {
    for seed in 0..6 {
        let scene = gen_indoor(seed);
        let pc = &scene.cloud;
        assert!((5000..=8000).contains(&pc.len()));
        let labels = pc.labels.as_ref().unwrap();
        for class in [FLOOR, WALL, FURNITURE] {
            assert!(labels.contains(&class), "seed {seed} class {class}");
        }
        for (p, &l) in pc.coords.iter().zip(labels) {
            if l == FLOOR {
                assert!(p[2].abs() <= 1e-6);
            }
        }
        assert!(pc.any_color() && pc.any_normal());
        let ext = |a: usize| {
            let v = pc.coords.iter().map(|p| p[a]);
            v.clone().fold(f64::MIN, f64::max) - v.fold(f64::MAX, f64::min)
        };
        assert!((5.0 - 1e-3..=10.0 + 1e-3).contains(&ext(0)));
        assert!((5.0 - 1e-3..=10.0 + 1e-3).contains(&ext(1)));
        assert!((2..=4).contains(&scene.frames.clouds.len()));
    }
}

/// Symmetric Hausdorff distance by exhaustive search.
fn hausdorff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let one = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter()
            .map(|&p| y.iter().map(|&q| dist(p, q)).fold(f64::MAX, f64::min))
            .fold(0.0, f64::max)
    };
    one(a, b).max(one(b, a))
}

#[test]
fn frame_union_covers_the_room() {
    for seed in 0..2 {
        let scene = gen_indoor(seed);
        let agg = crate::harmonize::frame_aggregate(&scene.frames.clouds, &scene.frames.poses).unwrap();
        assert!(agg.len() >= scene.cloud.len());
        let h = hausdorff(&agg.coords, &scene.cloud.coords);
        assert!(h < 0.1, "seed {seed}: {h}");
    }
}

#[test]
fn outdoor_contract() {
    for seed in 0..3 {
        let pc = gen_outdoor(seed);
        assert!(pc.mask.iter().all(|&m| m & COLOR_BIT == 0));
        assert!(!pc.any_color());
        let labels = pc.labels.as_ref().unwrap();
        assert!(labels.contains(&GROUND) && labels.contains(&VEHICLE));
        let r_max = pc.coords.iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max);
        assert!((49.0..=100.0).contains(&r_max), "{r_max}");
        assert!(pc.mask.iter().filter(|&&m| m & NORMAL_BIT != 0).count() > pc.len() * 9 / 10);
    }
}

#[test]
fn ring_radii_increase() {
    for extent in [50.0, 73.0, 100.0] {
        let r = ring_radii(extent);
        assert_eq!(r.len(), RING_COUNT);
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        assert!((r[RING_COUNT - 1] - extent).abs() < 1e-9);
    }
}

#[test]
fn near_density_dominates_far_density() {
    use std::f64::consts::PI;
    for seed in 0..3 {
        let pc = gen_outdoor(seed);
        let rs: Vec<f64> = pc.coords.iter().map(|p| p[0].hypot(p[1])).collect();
        let extent = rs.iter().cloned().fold(0.0, f64::max);
        let near = rs.iter().filter(|&&r| r <= 10.0).count() as f64 / (PI * 100.0);
        let far = rs.iter().filter(|&&r| r > 40.0).count() as f64 / (PI * (extent * extent - 1600.0));
        assert!(near >= 4.0 * far, "seed {seed}: {near} vs {far}");
    }
}

#[test]
fn ground_normals_point_up() {
    let pc = gen_outdoor(1);
    let labels = pc.labels.as_ref().unwrap();
    let mut up = 0;
    let mut total = 0;
    for i in 0..pc.len() {
        if labels[i] == GROUND && pc.has_normal(i) {
            total += 1;
            up += (pc.normals[i][2] > 0.99) as usize;
        }
    }
    assert!(up as f64 > 0.9 * total as f64, "{up}/{total}");
}

#[test]
fn datasets_are_domain_major_and_split() {
    let train = train_set(2, 5);
    let eval = eval_set(2, 5);
    let domains: Vec<Domain> = train.iter().map(|s| s.cloud.domain).collect();
    assert_eq!(domains, [Domain::Object, Domain::Object, Domain::Indoor, Domain::Indoor, Domain::Outdoor, Domain::Outdoor]);
    for (s, e) in train.iter().zip(&eval) {
        assert_ne!(s.cloud.coords, e.coords);
    }
    assert!(train[2].frames.is_some());
}

#[test]
fn featurize_caps_and_tracks_sources() {
    let cfg = PretrainConfig::default();
    let enc = Encoder::new(cfg.encoder.clone()).unwrap();
    let params = enc.init_params(&mut rng_for(&[1]));
    let pc = gen_indoor(2).cloud;
    let f = featurize(&enc, &params, &pc, &cfg.grid, 300, 7, Condition::FULL).unwrap();
    assert_eq!(f.view.len(), 300);
    assert_eq!(f.features.nrows(), 300);
    assert_eq!(f.source.len(), 300);
    for (i, &s) in f.source.iter().enumerate() {
        assert_eq!(f.view.labels.as_ref().unwrap()[i], pc.labels.as_ref().unwrap()[s]);
    }
    let again = featurize(&enc, &params, &pc, &cfg.grid, 300, 7, Condition::FULL).unwrap();
    assert_eq!(again.features, f.features);
}

#[test]
fn dropping_absent_color_changes_nothing() {
    let cfg = PretrainConfig::default();
    let enc = Encoder::new(cfg.encoder.clone()).unwrap();
    let params = enc.init_params(&mut rng_for(&[1]));
    let pc = gen_outdoor(0);
    let drop = Condition {
        drop_color: true,
        drop_normal: false,
    };
    let a = featurize(&enc, &params, &pc, &cfg.grid, 400, 3, Condition::FULL).unwrap();
    let b = featurize(&enc, &params, &pc, &cfg.grid, 400, 3, drop).unwrap();
    assert_eq!(a.features, b.features);
}
