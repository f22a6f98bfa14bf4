use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffengine::{row_jacobians, rel_err};
use crate::geom::Aabb;

fn spec() -> GridSpec {
    GridSpec::new([4, 3, 2], Aabb::new([-2.0, -1.5, -1.0], [2.0, 1.5, 1.0])).unwrap()
}

fn random_grid(seed: u64, spec: &GridSpec, c: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        Shape::new(spec.cells(), c),
        (0..spec.cells() * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn query(spec: &GridSpec, grid: &Tensor, pts: &[Vec3]) -> Tensor {
    let mut tape = Tape::new();
    let g = tape.constant(grid.clone());
    let x = tape.constant(points_tensor(pts));
    let f = query_feature(&mut tape, g, spec, x).unwrap();
    tape.value(f).clone()
}

#[test]
fn cell_centres_return_their_feature() {
    let s = spec();
    let grid = random_grid(1, &s, 5);
    for cell in [0, 7, s.cells() - 1] {
        let f = query(&s, &grid, &[s.centre(cell)]);
        for j in 0..5 {
            assert!((f.get(0, j) - grid.get(cell, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn midpoint_blends_half_and_half() {
    let s = spec();
    let mut grid = Tensor::zeros(Shape::new(s.cells(), 2));
    let (a, b) = (s.index([1, 1, 0]), s.index([2, 1, 0]));
    grid.set(a, 0, 2.0);
    grid.set(a, 1, -1.0);
    grid.set(b, 0, 4.0);
    let mid = crate::geom::scale(crate::geom::add(s.centre(a), s.centre(b)), 0.5);
    let f = query(&s, &grid, &[mid]);
    assert!((f.get(0, 0) - 3.0).abs() < 1e-12);
    assert!((f.get(0, 1) + 0.5).abs() < 1e-12);
}

#[test]
fn weights_form_a_partition_of_unity_and_clamp() {
    let s = spec();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let p: Vec3 = std::array::from_fn(|i| rng.random_range(s.bounds.min[i]..s.bounds.max[i]));
        let (_, w) = trilinear_weights(&s, p);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
    let grid = random_grid(2, &s, 3);
    let corner = s.centre(s.index([3, 2, 1]));
    let far = query(&s, &grid, &[[50.0, 40.0, 9.0], corner]);
    for j in 0..3 {
        assert!((far.get(0, j) - far.get(1, j)).abs() < 1e-12);
    }
}

#[test]
fn features_vary_linearly_along_cell_segments() {
    let s = spec();
    let grid = random_grid(4, &s, 3);
    let a2 = [-0.4, 0.1, 0.2];
    let b2 = [0.4, 0.1, 0.2];
    let m2 = [0.1, 0.1, 0.2];
    let g = query(&s, &grid, &[a2, b2, m2]);
    for j in 0..3 {
        let t = 0.5 / 0.8;
        let lin = g.get(0, j) + t * (g.get(1, j) - g.get(0, j));
        assert!((g.get(2, j) - lin).abs() < 1e-12);
    }
}

fn fd_wrt_points(pts: &[Vec3], f: &dyn Fn(&mut Tape, Var) -> Var) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let x = tape.leaf("x", points_tensor(pts));
    let out = f(&mut tape, x);
    let g = tape.gradient(out, &[x]).unwrap().remove(0).into_data();
    let h = 1e-5;
    let eval = |q: Tensor| {
        let mut t = Tape::new();
        let v = t.leaf("x", q);
        let o = f(&mut t, v);
        t.value(o).item()
    };
    let base = points_tensor(pts);
    let fd = (0..base.data().len())
        .map(|i| {
            let mut up = base.clone();
            up.data_mut()[i] += h;
            let mut down = base.clone();
            down.data_mut()[i] -= h;
            (eval(up) - eval(down)) / (2.0 * h)
        })
        .collect();
    (g, fd)
}

fn interior_points() -> Vec<Vec3> {
    vec![[-0.3, 0.2, -0.1], [0.7, -0.4, 0.3], [1.2, 0.9, 0.25], [-1.1, -0.2, -0.35]]
}

fn head_params(seed: u64, d_f: usize) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    init_field_params(&mut rng, &mut p, d_f).unwrap();
    p
}

#[test]
fn feature_gradient_wrt_points_matches_finite_differences() {
    let s = spec();
    let grid = random_grid(5, &s, 3);
    let f = |t: &mut Tape, x: Var| {
        let g = t.constant(grid.clone());
        let q = query_feature(t, g, &s, x).unwrap();
        let r = t.constant(random_grid(9, &GridSpec::new([4, 1, 1], s.bounds).unwrap(), 3));
        let m = t.mul(q, r).unwrap();
        t.sum(m).unwrap()
    };
    let (g, fd) = fd_wrt_points(&interior_points(), &f);
    for (a, b) in g.iter().zip(&fd) {
        assert!(rel_err(*a, *b, 1e-2) < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn sdf_is_c1_inside_cells() {
    let s = spec();
    let grid = random_grid(6, &s, 4);
    let p = head_params(7, 4);
    let f = |t: &mut Tape, x: Var| {
        let b = p.bind_constants(t);
        let g = t.constant(grid.clone());
        let sd = eval_sdf(t, &b, g, &s, x).unwrap();
        t.sum(sd).unwrap()
    };
    let (g, fd) = fd_wrt_points(&interior_points(), &f);
    for (a, b) in g.iter().zip(&fd) {
        assert!(rel_err(*a, *b, 1e-2) < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn zero_field_gives_zero_distance_and_grey() {
    let s = spec();
    let mut p = head_params(0, 4);
    let names: Vec<String> = p.names().map(String::from).collect();
    for n in names {
        p.data_mut(&n).unwrap().fill(0.0);
    }
    let field = FrozenField::new(&p, Tensor::zeros(Shape::new(s.cells(), 4)), s).unwrap();
    let pts = interior_points();
    assert!(field.sdf_values(&pts).unwrap().iter().all(|&v| v == 0.0));
    for c in field.rgb_values(&pts).unwrap() {
        assert_eq!(c, [0.5; 3]);
    }
}

#[test]
fn colours_stay_in_open_unit_interval() {
    let s = spec();
    for seed in 0..5 {
        let mut p = head_params(seed, 4);
        for x in p.data_mut("rgb.l3.w").unwrap() {
            *x *= 5.0;
        }
        let field = FrozenField::new(&p, random_grid(seed, &s, 4), s).unwrap();
        let pts: Vec<Vec3> = (0..50).map(|i| [i as f64 * 0.3 - 7.0, 0.1 * i as f64 - 2.0, 0.5]).collect();
        for c in field.rgb_values(&pts).unwrap() {
            assert!(c.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn colour_depends_on_grid_values() {
    let s = spec();
    let p = head_params(2, 4);
    let mut tape = Tape::new();
    let b = p.bind_constants(&mut tape);
    let g = tape.leaf("grid", random_grid(3, &s, 4));
    let x = tape.constant(points_tensor(&interior_points()));
    let c = eval_rgb(&mut tape, &b, g, &s, x).unwrap();
    let sum = tape.sum(c).unwrap();
    let grad = tape.gradient(sum, &[g]).unwrap().remove(0);
    assert!(grad.norm() > 1e-6);
}

#[test]
fn curvature_of_learned_field_is_finite() {
    let s = spec();
    let p = head_params(8, 4);
    let field = FrozenField::new(&p, random_grid(8, &s, 4), s).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf("x", points_tensor(&interior_points()));
    let sd = field.sdf_on_tape(&mut tape, x).unwrap();
    let total = tape.sum(sd).unwrap();
    let n = tape.grad(total, &[x]).unwrap()[0];
    let len = tape.row_norm(n).unwrap();
    let unit = tape.div(n, len).unwrap();
    let jac = row_jacobians(&mut tape, unit, x).unwrap();
    for j in jac {
        let fro: f64 = j.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!(fro.is_finite() && fro > 0.0);
    }
}

#[test]
fn lattice_export_has_one_row_per_node() {
    let s = spec();
    let field = FrozenField::new(&head_params(1, 4), random_grid(1, &s, 4), s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sdf.csv");
    field.export_lattice(&path, [3, 4, 2]).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 4 * 2);
}
