use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffengine::{check_param_gradients, rel_err};

const LN4: f64 = std::f64::consts::LN_2 * 2.0;

fn leaf_rows(tape: &mut Tape, rows: &[&[f64]]) -> Var {
    tape.leaf("s", Tensor::from_rows(rows).unwrap())
}

fn random(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Tensor {
    let d = (0..r * c).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(Shape::new(r, c), d).unwrap()
}

fn micro(seed: u64, n_k: usize) -> (ParamSet, Tensor, Tensor, ProtoConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ProtoConfig {
        n_k,
        d_k: 5,
        ..ProtoConfig::default()
    };
    let mut p = ParamSet::new();
    init_proto_params(&mut rng, &mut p, 6, 3, &cfg).unwrap();
    // generic biases keep every projected row away from the zero-norm fallback
    for name in ["proj_p.l1.b", "proj_p.l2.b", "proj_i.l1.b", "proj_i.l2.b"] {
        p.data_mut(name).unwrap().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    // 4³ cells of point and image features
    let pf = random(&mut rng, 64, 6, 1.0);
    let imf = random(&mut rng, 64, 3, 1.0);
    (p, pf, imf, cfg)
}

#[test]
fn projections_have_unit_rows_and_desk_row_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ProtoConfig::default();
    let mut p = ParamSet::new();
    init_proto_params(&mut rng, &mut p, 32, 16, &cfg).unwrap();
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let cells = 16 * 16 * 8;
    let pf = tape.constant(random(&mut rng, cells, 32, 1.0));
    let imf = tape.constant(random(&mut rng, cells, 16, 1.0));
    let e = project_embeddings(&mut tape, &b, pf, imf, None).unwrap();
    for v in [e.p, e.i] {
        let t = tape.value(v);
        assert_eq!((t.rows(), t.cols()), (2048, 32));
        for r in 0..t.rows() {
            let n: f64 = t.row_slice(r).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
    let k = p.get(PROTO_PARAM).unwrap();
    assert_eq!((k.rows(), k.cols()), (32, 32));
    assert!(mean_prototype_cosine(k).abs() < 0.1);
}

#[test]
fn zero_rows_fall_back_to_a_basis_vector() {
    let mut tape = Tape::new();
    let x = tape.leaf("x", Tensor::from_rows(&[&[3.0, 4.0], &[0.0, 0.0]]).unwrap());
    let (y, flagged) = normalize_rows(&mut tape, x).unwrap();
    assert_eq!(flagged, vec![1]);
    assert_eq!(tape.value(y).data(), &[0.6, 0.8, 1.0, 0.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.gradient(s, &[x]).unwrap();
    assert!(g[0].all_finite());
}

#[test]
fn mismatched_rows_are_rejected() {
    let (p, pf, _, _) = micro(0, 4);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let pf = tape.constant(pf);
    let imf = tape.constant(Tensor::zeros(Shape::new(10, 3)));
    assert!(project_embeddings(&mut tape, &b, pf, imf, None).is_err());
}

#[test]
fn both_projection_heads_receive_gradient() {
    let (p, pf, imf, cfg) = micro(1, 4);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let (pf, imf) = (tape.constant(pf), tape.constant(imf));
    let e = project_embeddings(&mut tape, &b, pf, imf, None).unwrap();
    let (l, _) = proto_loss(&mut tape, &b, &e, &cfg).unwrap();
    let names = ["proj_p.l1.w", "proj_p.l2.w", "proj_i.l1.w", "proj_i.l2.w", PROTO_PARAM];
    for (n, g) in names.iter().zip(tape.gradient_by_name(l.total, &names).unwrap()) {
        assert!(g.norm() > 1e-8, "{n}");
    }
}

#[test]
fn similarity_of_unit_vectors() {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.6, 0.8]]).unwrap());
    let k = tape.constant(Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap());
    let s = similarity(&mut tape, e, k).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0, 0.0, 0.0, 0.8]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let e = unit_rows(&mut rng, 50, 7);
    let k = unit_rows(&mut rng, 9, 7);
    let (e, k) = (tape.constant(e), tape.constant(k));
    let s = similarity(&mut tape, e, k).unwrap();
    assert!(tape.value(s).data().iter().all(|x| x.abs() <= 1.0 + 1e-12));
    let bad = tape.constant(Tensor::zeros(Shape::new(3, 4)));
    assert!(similarity(&mut tape, e, bad).is_err());
}

#[test]
fn entropy_loss_closed_forms() {
    let mut tape = Tape::new();
    let s = leaf_rows(&mut tape, &[&[0.3; 4]]);
    let l = em_loss(&mut tape, s, s).unwrap();
    assert!((tape.value(l).item() - 2.0 * LN4 / 4.0).abs() < 1e-9);
    assert!((2.0 * LN4 / 4.0 - 0.6931).abs() < 1e-4);

    let mut tape = Tape::new();
    let s = leaf_rows(&mut tape, &[&[200.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 200.0, 0.0]]);
    let l = em_loss(&mut tape, s, s).unwrap();
    assert!(tape.value(l).item() < 1e-80);
}

proptest! {
    #[test]
    fn entropy_loss_is_non_negative(seed in 0u64..1000, rows in 1usize..6, k in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let a = tape.constant(random(&mut rng, rows, k, 5.0));
        let b = tape.constant(random(&mut rng, rows, k, 5.0));
        let l = em_loss(&mut tape, a, b).unwrap();
        prop_assert!(tape.value(l).item() >= 0.0);
    }
}

#[test]
fn sinkhorn_symmetric_cases() {
    let q = sinkhorn_codes(&Tensor::filled(Shape::new(5, 4), 0.7), 3, 0.05).unwrap();
    assert!(q.data().iter().all(|&x| x == 0.25));

    let (a, b) = (0.9, -0.2);
    let s = Tensor::from_rows(&[&[a, b], &[b, a]]).unwrap();
    for it in 0..6 {
        let q = sinkhorn_codes(&s, it, 0.05).unwrap();
        assert!((q.get(0, 0) - q.get(1, 1)).abs() < 1e-15);
        assert!((q.get(0, 1) - q.get(1, 0)).abs() < 1e-15);
    }
    assert!(sinkhorn_codes(&s, 3, 0.0).is_err());
    assert!(sinkhorn_codes(&Tensor::filled(Shape::new(1, 2), f64::NAN), 3, 0.05).is_err());
}

#[test]
fn sinkhorn_converges_to_balanced_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = cosines(&mut rng, 8, 4, 32);
    let q = sinkhorn_codes(&s, 50, 0.05).unwrap();
    assert!(column_marginal_error(&q) < 1e-3);
    let hits = (0..200)
        .filter(|_| {
            let s = cosines(&mut rng, 8, 4, 32);
            column_marginal_error(&sinkhorn_codes(&s, 50, 0.05).unwrap()) < 1e-3
        })
        .count();
    assert!(hits >= 180, "{hits}/200");
    for r in 0..8 {
        assert!((q.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q.row_slice(r).iter().all(|&x| x >= 0.0));
    }
}

fn marginal_kl(q: &Tensor) -> f64 {
    let (n, k) = (q.rows(), q.cols());
    let target = 1.0 / k as f64;
    (0..k)
        .map(|c| {
            let m = (0..n).map(|r| q.get(r, c)).sum::<f64>() / n as f64;
            if m > 0.0 {
                m * (m / target).ln()
            } else {
                0.0
            }
        })
        .sum()
}

#[test]
fn more_iterations_never_unbalance() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let s = random(&mut rng, 24, 6, 1.0);
        let kl: Vec<f64> = (0..8).map(|it| marginal_kl(&sinkhorn_codes(&s, it, 0.05).unwrap())).collect();
        for w in kl.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{kl:?}");
        }
        let e1 = column_marginal_error(&sinkhorn_codes(&s, 1, 0.05).unwrap());
        let e3 = column_marginal_error(&sinkhorn_codes(&s, 3, 0.05).unwrap());
        assert!(e3 < e1);
    }
}

#[test]
fn dominant_entries_keep_their_argmax() {
    let eps = 0.05;
    let k = 4;
    let margin = 2.0 * eps * (k as f64).ln();
    let s = Tensor::from_rows(&[
        &[0.1, 0.1 + margin + 1e-3, 0.0, 0.1],
        &[0.2 + margin + 0.05, 0.2, 0.1, 0.0],
        &[0.0, 0.0, 0.05, margin + 0.06],
        &[-0.1, 0.0, margin + 0.01, 0.0],
    ])
    .unwrap();
    let q = sinkhorn_codes(&s, 3, eps).unwrap();
    assert_eq!(assignments(&q), assignments(&s));
    let mut tape = Tape::new();
    let v = tape.constant(s.clone());
    let sm = tape.softmax(v).unwrap();
    assert_eq!(assignments(tape.value(sm)), assignments(&s));
}

#[test]
fn swav_closed_forms() {
    let mut tape = Tape::new();
    let s = leaf_rows(&mut tape, &[&[0.2; 4]]);
    let q = Tensor::filled(Shape::new(1, 4), 0.25);
    let l = swav_loss(&mut tape, s, s, &q, &q, 1.0).unwrap();
    assert!((tape.value(l).item() - 2.0 / 4.0 * LN4).abs() < 1e-12);

    let mut tape = Tape::new();
    let rows: &[&[f64]] = &[&[1.0, -1.0, -1.0], &[-1.0, -1.0, 1.0]];
    let s = leaf_rows(&mut tape, rows);
    let q = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
    let l = swav_loss(&mut tape, s, s, &q, &q, 1e-3).unwrap();
    assert!(tape.value(l).item() < 1e-100);
    assert!(swav_loss(&mut tape, s, s, &Tensor::zeros(Shape::new(1, 3)), &q, 1.0).is_err());
}

#[test]
fn swav_gradient_only_flows_through_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, k, tau) = (6, 4, 0.7);
    let sp = random(&mut rng, n, k, 1.0);
    let si = random(&mut rng, n, k, 1.0);
    let q_p = sinkhorn_codes(&sp, 3, 0.05).unwrap();
    let q_i = sinkhorn_codes(&si, 3, 0.05).unwrap();
    let mut tape = Tape::new();
    let a = tape.leaf("sp", sp.clone());
    let b = tape.leaf("si", si);
    let l = swav_loss(&mut tape, a, b, &q_p, &q_i, tau).unwrap();
    let g = tape.gradient(l, &[a, b]).unwrap();
    // d/dS_P of −Σ Q_I log softmax(S_P/τ) / (N·K) = (softmax − Q_I) / (τ·N·K)
    for r in 0..n {
        let row = sp.row_slice(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| ((x - m) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..k {
            let want = (e[c] / z - q_i.get(r, c)) / (tau * (n * k) as f64);
            assert!((g[0].get(r, c) - want).abs() < 1e-14);
        }
    }
    assert!(g[0].norm() > 1e-6 && g[1].norm() > 1e-6);
}

#[test]
fn gram_closed_forms() {
    let mut tape = Tape::new();
    let k = tape.constant(Tensor::identity(4));
    let l = gram_loss(&mut tape, k).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let k = tape.constant(Tensor::from_rows(&[&[0.6, 0.8][..]; 3]).unwrap());
    let l = gram_loss(&mut tape, k).unwrap();
    assert!((tape.value(l).item() - 1.0).abs() < 1e-15);
    let h = 3f64.sqrt() / 2.0;
    let k = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.5, h]]).unwrap());
    let l = gram_loss(&mut tape, k).unwrap();
    assert!((tape.value(l).item() - 0.5).abs() < 1e-15);
    let one = tape.constant(Tensor::row(vec![1.0, 0.0]));
    assert!(gram_loss(&mut tape, one).is_err());
}

fn eval_proto(p: &ParamSet, pf: &Tensor, imf: &Tensor, cfg: &ProtoConfig) -> (f64, f64, f64, f64) {
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let (pf, imf) = (tape.constant(pf.clone()), tape.constant(imf.clone()));
    let e = project_embeddings(&mut tape, &b, pf, imf, None).unwrap();
    let (l, _) = proto_loss(&mut tape, &b, &e, cfg).unwrap();
    let v = |x| tape.value(x).item();
    (v(l.total), v(l.swav), v(l.em), v(l.gmm))
}

#[test]
fn weighted_sum_is_linear_in_the_weights() {
    let (p, pf, imf, cfg) = micro(5, 4);
    let (total, swav, em, gmm) = eval_proto(&p, &pf, &imf, &cfg);
    assert!((total - (swav + 0.1 * em + 0.1 * gmm)).abs() < 1e-14);
    let doubled = ProtoConfig { w_em: 0.2, ..cfg.clone() };
    let (t2, ..) = eval_proto(&p, &pf, &imf, &doubled);
    assert!((t2 - total - 0.1 * em).abs() < 1e-14);
    let off = ProtoConfig {
        w_swav: 0.0,
        w_em: 0.0,
        w_gmm: 0.0,
        ..cfg.clone()
    };
    assert_eq!(eval_proto(&p, &pf, &imf, &off).0, 0.0);
    assert!(ProtoConfig { w_gmm: -1.0, ..cfg.clone() }.validate().is_err());
    assert!(ProtoConfig { n_k: 1, ..cfg }.validate().is_err());
}

#[test]
fn every_loss_matches_finite_differences() {
    let (p, pf, imf, cfg) = micro(6, 4);
    let codes = {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let (a, c) = (tape.constant(pf.clone()), tape.constant(imf.clone()));
        let e = project_embeddings(&mut tape, &b, a, c, None).unwrap();
        proto_loss(&mut tape, &b, &e, &cfg).unwrap().1
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let coords: Vec<(String, usize)> = p
        .iter()
        .flat_map(|(n, t)| {
            let len = t.data().len();
            (0..4).map(|_| (n.to_string(), rng.random_range(0..len))).collect::<Vec<_>>()
        })
        .collect();
    for pick in 0..4 {
        let f = |tape: &mut Tape, b: &Bound| -> crate::error::Result<Var> {
            let (a, c) = (tape.constant(pf.clone()), tape.constant(imf.clone()));
            let e = project_embeddings(tape, b, a, c, None)?;
            let (l, _) = proto_loss_with_codes(tape, b, &e, &cfg, Some(&codes))?;
            Ok([l.total, l.swav, l.em, l.gmm][pick])
        };
        let checks = check_param_gradients(&p, &coords, 1e-6, &f).unwrap();
        for c in checks {
            assert!(c.rel_err(1e-6) < 1e-4, "loss {pick}: {c:?}");
        }
    }
}

#[test]
fn renormalization_restores_unit_rows() {
    let (mut p, ..) = micro(8, 4);
    for x in p.data_mut(PROTO_PARAM).unwrap() {
        *x *= 3.0;
    }
    p.data_mut(PROTO_PARAM).unwrap()[..5].fill(0.0);
    renormalize_prototypes(&mut p).unwrap();
    let k = p.get(PROTO_PARAM).unwrap();
    assert_eq!(k.row_slice(0), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    for r in 0..k.rows() {
        let n: f64 = k.row_slice(r).iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn occupied_rows_toggle() {
    let occ = [false, true, true, false, true];
    assert_eq!(proto_rows(&occ, &ProtoConfig::default()), Some(vec![1, 2, 4]));
    let all = ProtoConfig {
        occupied_only: false,
        ..ProtoConfig::default()
    };
    assert_eq!(proto_rows(&occ, &all), None);
    assert!(rel_err(1.0, 1.0, 1e-9) == 0.0);
}

fn cosines(rng: &mut impl Rng, n: usize, k: usize, d: usize) -> Tensor {
    let (e, p) = (unit_rows(rng, n, d), unit_rows(rng, k, d));
    let data = (0..n)
        .flat_map(|r| {
            let (e, p) = (&e, &p);
            (0..k).map(move |c| e.row_slice(r).iter().zip(p.row_slice(c)).map(|(a, b)| a * b).sum())
        })
        .collect();
    Tensor::new(Shape::new(n, k), data).unwrap()
}
