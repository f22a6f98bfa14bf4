use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::diffengine::{ParamSet, Shape, Tensor};
use crate::encoders::GridSpec;
use crate::geom::{self, Aabb};
use crate::neuralfield::{init_field_params, FrozenField};
use crate::synthscene::{
    default_bounds, simulate_camera, simulate_lidar, CameraPose, Intrinsics, LidarSpec, Pose,
    PrimitiveKind, Scene, ScenePrimitive, SemanticLabel,
};

fn sphere(centre: Vec3, radius: f64) -> ScenePrimitive {
    ScenePrimitive::new(
        PrimitiveKind::Sphere { radius },
        Pose::translation(centre),
        [0.9, 0.3, 0.2],
        SemanticLabel::Foreground,
    )
    .unwrap()
}

fn scene(prims: Vec<ScenePrimitive>) -> Scene {
    Scene::new(prims, default_bounds())
}

fn sphere_on_plane() -> Scene {
    scene(vec![ScenePrimitive::ground([0.45; 3]), sphere([5.0, 1.0, 1.0], 1.0)])
}

#[test]
fn analytic_normals() {
    let s = scene(vec![sphere([0.0; 3], 1.0)]);
    let n = estimate_normals(&s, &[[2.0, 0.0, 0.0]]).unwrap()[0].unwrap();
    assert!(geom::norm(geom::sub(n, [1.0, 0.0, 0.0])) < 1e-12);
    let g = scene(vec![ScenePrimitive::ground([0.5; 3])]);
    for n in estimate_normals(&g, &[[1.0, 2.0, 0.0], [-3.0, 0.5, 2.0]]).unwrap() {
        assert_eq!(n.unwrap(), [0.0, 0.0, 1.0]);
    }
}

#[test]
fn analytic_curvature_matches_closed_form() {
    for r in [0.5, 1.0, 2.0] {
        let s = scene(vec![sphere([1.0, -2.0, 0.5], r)]);
        let pts = [[1.0 + r, -2.0, 0.5], [1.0, -2.0 + r, 0.5], geom::add([1.0, -2.0, 0.5], geom::scale(geom::normalize([1.0, 1.0, 1.0]), r))];
        for w in estimate_curvature(&s, &pts, DerivMode::JacobianFrobenius).unwrap() {
            assert!((w - 2f64.sqrt() / r).abs() < 1e-6, "r={r}: {w}");
        }
    }
    let g = scene(vec![ScenePrimitive::ground([0.5; 3])]);
    for w in estimate_curvature(&g, &[[0.3, 0.1, 0.0], [4.0, -2.0, 0.0]], DerivMode::JacobianFrobenius).unwrap() {
        assert!(w.abs() < 1e-9);
    }
    // vjp-ones on the unit sphere at (1,0,0): Jᵀ·1 = (0, 1, 1)
    let s = scene(vec![sphere([0.0; 3], 1.0)]);
    let w = estimate_curvature(&s, &[[1.0, 0.0, 0.0]], DerivMode::VjpOnes).unwrap()[0];
    assert!((w - 2f64.sqrt()).abs() < 1e-9);
}

#[test]
fn box_edges_bend_more_than_faces() {
    let b = ScenePrimitive::new(
        PrimitiveKind::Box {
            half_extents: [1.0, 1.0, 1.0],
        },
        Pose::translation([4.0, 0.0, 1.0]),
        [0.5; 3],
        SemanticLabel::Foreground,
    )
    .unwrap();
    let s = scene(vec![b]);
    let face = [3.0, 0.2, 1.3];
    let edge = [3.0 - 0.01, -1.0 - 0.01, 1.3];
    let w = estimate_curvature(&s, &[face, edge], DerivMode::JacobianFrobenius).unwrap();
    assert!(w[0].abs() < 1e-12);
    assert!(w[1] > w[0] + 1.0);
}

#[test]
fn degenerate_gradients_are_flagged() {
    let mut p = ParamSet::new();
    let spec = GridSpec::new([2, 2, 2], Aabb::new([-1.0; 3], [1.0; 3])).unwrap();
    init_field_params(&mut ChaCha8Rng::seed_from_u64(0), &mut p, 2).unwrap();
    p.data_mut("sdf.l3.w").unwrap().fill(0.0);
    let field = FrozenField::new(&p, Tensor::zeros(Shape::new(8, 2)), spec).unwrap();
    let pts = [[0.1, 0.2, 0.3]];
    assert_eq!(estimate_normals(&field, &pts).unwrap(), vec![None]);
    assert_eq!(estimate_curvature(&field, &pts, DerivMode::JacobianFrobenius).unwrap(), vec![0.0]);
}

fn mlp_field(seed: u64) -> FrozenField {
    let spec = GridSpec::new([4, 4, 4], Aabb::new([-2.0; 3], [2.0; 3])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    init_field_params(&mut rng, &mut p, 3).unwrap();
    let g: Vec<f64> = (0..spec.cells() * 3).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    FrozenField::new(&p, Tensor::new(Shape::new(spec.cells(), 3), g).unwrap(), spec).unwrap()
}

fn interior() -> Vec<Vec3> {
    vec![[0.3, -0.2, 0.4], [-0.6, 0.7, -0.3], [1.2, 0.4, 0.6], [-1.3, -0.6, 1.4]]
}

#[test]
fn learned_normals_match_finite_difference_direction() {
    let field = mlp_field(1);
    let pts = interior();
    let normals = estimate_normals(&field, &pts).unwrap();
    let h = 1e-6;
    for (p, n) in pts.iter().zip(normals) {
        let n = n.unwrap();
        let fd: Vec3 = std::array::from_fn(|i| {
            let (mut a, mut b) = (*p, *p);
            a[i] += h;
            b[i] -= h;
            let s = field.sdf_values(&[a, b]).unwrap();
            (s[0] - s[1]) / (2.0 * h)
        });
        let cos = geom::dot(n, geom::normalize(fd)).clamp(-1.0, 1.0);
        assert!(cos.acos().to_degrees() < 1.0);
    }
}

#[test]
fn normals_ignore_output_scale() {
    let field = mlp_field(2);
    let mut scaled = field.clone();
    for name in ["sdf.l3.w", "sdf.l3.b"] {
        for x in scaled.heads.data_mut(name).unwrap() {
            *x *= 10.0;
        }
    }
    let a = estimate_normals(&field, &interior()).unwrap();
    let b = estimate_normals(&scaled, &interior()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(geom::norm(geom::sub(x.unwrap(), y.unwrap())) < 1e-6);
    }
    let w = estimate_curvature(&field, &interior(), DerivMode::JacobianFrobenius).unwrap();
    assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn one_hot_weights_always_pick_that_index() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx = sample_points(&[1.0, 0.0, 0.0], 50, &mut rng).unwrap();
    assert!(idx.iter().all(|&i| i == 0));
    assert!(sample_points(&[], 3, &mut rng).is_err());
    assert!(sample_points(&[1.0], 0, &mut rng).is_err());
}

#[test]
fn zero_weights_fall_back_to_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let idx = sample_points(&[0.0; 4], 4000, &mut rng).unwrap();
    for k in 0..4 {
        let c = idx.iter().filter(|&&i| i == k).count();
        assert!((800..1200).contains(&c));
    }
}

#[test]
fn uniform_draws_pass_chi_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let idx = sample_points(&[1.0; 1000], n, &mut rng).unwrap();
    let mut counts = vec![0usize; 1000];
    idx.iter().for_each(|&i| counts[i] += 1);
    let e = n as f64 / 1000.0;
    let chi: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new(999.0).unwrap().cdf(chi);
    assert!(p > 0.01, "chi2 {chi}, p {p}");
}

#[test]
fn weighted_draws_follow_the_cdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w: Vec<f64> = (0..200).map(|i| ((i * 37) % 11) as f64 + 0.5).collect();
    let n = 100_000;
    let idx = sample_points(&w, n, &mut rng).unwrap();
    let total: f64 = w.iter().sum();
    let mut counts = vec![0usize; w.len()];
    idx.iter().for_each(|&i| counts[i] += 1);
    let (mut emp, mut cdf, mut ks) = (0.0, 0.0, 0.0f64);
    for k in 0..w.len() {
        emp += counts[k] as f64 / n as f64;
        cdf += w[k] / total;
        ks = ks.max((emp - cdf).abs());
    }
    // 1% critical value of the one-sample KS statistic
    assert!(ks < 1.63 / (n as f64).sqrt(), "{ks}");
}

#[test]
fn clipping_caps_the_tail() {
    let mut w = vec![1.0; 2000];
    w[7] = 1e9;
    w[9] = 2e9;
    w[11] = 3e9;
    // nearest rank ⌈0.999·2000⌉ = 1998 lands on the smallest outlier
    let c = clip_quantile(&w, 0.999);
    assert_eq!((c[7], c[9], c[11]), (1e9, 1e9, 1e9));
    assert_eq!(c[0], 1.0);
    let c = clip_quantile(&w, 0.99);
    assert_eq!(c[11], 1.0);
}

#[test]
fn curvature_weights_favour_the_sphere() {
    let s = sphere_on_plane();
    let cloud = simulate_lidar(&s, &LidarSpec::default());
    let w = estimate_curvature(&s, &cloud.xyz, DerivMode::JacobianFrobenius).unwrap();
    let on_sphere: Vec<bool> = cloud.primitive_id.iter().map(|&id| id == 1).collect();
    let share = on_sphere.iter().filter(|&&b| b).count() as f64 / cloud.len() as f64;
    assert!(share > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let idx = sample_points(&w, 10_000, &mut rng).unwrap();
    let drawn = idx.iter().filter(|&&i| on_sphere[i]).count() as f64 / idx.len() as f64;
    assert!(drawn >= 2.0 * share, "{drawn} vs {share}");
}

fn front_camera(scene: &Scene) -> CameraFrame {
    let pose = CameraPose::look_at([0.0, 0.0, 1.6], [6.0, 0.0, 0.3], [0.0, 0.0, 1.0]);
    let k = Intrinsics {
        fx: 32.0,
        fy: 32.0,
        cx: 31.5,
        cy: 31.5,
    };
    simulate_camera(scene, pose, k, 64, 64).unwrap()
}

fn one_point_cloud(p: Vec3) -> PointCloud {
    PointCloud {
        origin: [0.0; 3],
        extra_channels: 1,
        xyz: vec![p],
        extra: vec![0.5],
        primitive_id: vec![0],
        normal: vec![[0.0, 0.0, 1.0]],
        curvature: vec![0.0],
        label: vec![SemanticLabel::Ground],
    }
}

#[test]
fn pixel_maps_preserve_mass_and_respect_visibility() {
    let s = sphere_on_plane();
    let frame = front_camera(&s);
    // a ground point in the middle of the image
    let p = [4.0, -1.5, 0.0];
    let (u, v) = visible_pixel(&frame, p).unwrap();
    assert!(u > 3 && u < 60 && v > 3 && v < 60);
    let maps = project_pixel_weights(&one_point_cloud(p), &[1.0], &[frame.clone()], 5, 1.0).unwrap();
    let m = &maps[0];
    assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let peak = (0..m.len()).max_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap();
    assert_eq!(peak, frame.pixel_index(u, v));
    let nonzero = m.iter().filter(|&&x| x > 0.0).count();
    assert_eq!(nonzero, 25);

    // hidden behind the sphere
    let hidden = [6.5, 1.3, 0.0];
    assert!(frame.project(hidden).is_some());
    assert!(visible_pixel(&frame, hidden).is_none());
    let maps = project_pixel_weights(&one_point_cloud(hidden), &[1.0], &[frame], 5, 1.0).unwrap();
    assert!(maps[0].iter().all(|&x| x == 0.0));
}

#[test]
fn border_pixels_lose_kernel_mass() {
    let s = scene(vec![ScenePrimitive::ground([0.45; 3])]);
    let frame = front_camera(&s);
    // find ground points landing on an interior pixel and on the left border
    let interior = frame.unproject(30.0, 50.0, frame.depth[frame.pixel_index(30, 50)]);
    let border = frame.unproject(0.0, 50.0, frame.depth[frame.pixel_index(0, 50)]);
    let a = project_pixel_weights(&one_point_cloud(interior), &[1.0], &[frame.clone()], 5, 1.0).unwrap();
    let b = project_pixel_weights(&one_point_cloud(border), &[1.0], &[frame], 5, 1.0).unwrap();
    let (sa, sb): (f64, f64) = (a[0].iter().sum(), b[0].iter().sum());
    assert!((sa - 1.0).abs() < 1e-12);
    assert!(sb < sa && sb > 0.3);
    assert!(gaussian_kernel(4, 1.0).is_err());
}

#[test]
fn warmup_schedule() {
    assert_eq!(sampling_schedule(0, 4), SamplingMode::Uniform);
    assert_eq!(sampling_schedule(3, 4), SamplingMode::Uniform);
    assert_eq!(sampling_schedule(4, 4), SamplingMode::Curvature);
    assert_eq!(sampling_schedule(0, 0), SamplingMode::Curvature);
}
