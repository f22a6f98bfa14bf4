//! Invariant suite shared by the `selfcheck` command and the acceptance run.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curvsample::estimate_curvature;
use crate::diffengine::{check_param_gradients, DerivMode, GradCheck, ParamSet, Shape, Tape, Tensor};
use crate::encoders::{EncoderDims, FusionInputs, GridSpec};
use crate::error::{Error, Result};
use crate::geom;
use crate::protolearn::{
    column_marginal_error, em_loss, gram_loss, project_embeddings, proto_rows, sinkhorn_codes, unit_rows, Codes, ProtoConfig,
};
use crate::renderer::{render_weights, transmittance};
use crate::synthscene::{
    default_bounds, CameraSpec, Intrinsics, LidarSpec, Pose, PrimitiveKind, Scene, SceneSample, ScenePrimitive,
    SemanticLabel, SensorRig, GROUND_ALBEDO,
};
use crate::trainer::{draw_scene, init_params, param_group, scene_loss, Checkpoint, SceneDraw, TrainConfig, Trainer};

/// Losses covered by the gradient suite, in log order.
pub const GRAD_LOSSES: [&str; 5] = ["L_rend", "L_EM", "L_SwAV", "L_GMM", "L"];
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradient magnitudes below this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

/// One named pass/fail line.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((ok, d)) => Check::new(name, ok, d),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

/// Tiny config: 4³ grid, 4 LiDAR rays, 2 pixels per 16×16 camera, `N_K = 4`.
pub fn micro_config(seed: u64) -> TrainConfig {
    let k = Intrinsics {
        fx: 8.0,
        fy: 8.0,
        cx: 7.5,
        cy: 7.5,
    };
    let base = SensorRig::default();
    let rig = SensorRig {
        lidar: LidarSpec {
            azimuth_steps: 16,
            elevation_deg: vec![-20.0, -12.0, -6.0, 0.0],
            ..LidarSpec::default()
        },
        cameras: base
            .cameras
            .iter()
            .map(|c| CameraSpec {
                pose: c.pose,
                intrinsics: k,
            })
            .collect(),
        width: 16,
        height: 16,
    };
    TrainConfig {
        seed,
        epochs: 2,
        steps_per_epoch: Some(2),
        mask_rate: 0.5,
        n_lidar: 4,
        n_pixels: 2,
        n_samples: 8,
        warmup: 1,
        grid: GridSpec {
            dims: [4, 4, 4],
            bounds: default_bounds(),
        },
        encoder: EncoderDims {
            point_in: 4,
            image_hidden: 4,
            d_p: 6,
            d_i: 4,
            d_f: 6,
        },
        proto: ProtoConfig {
            n_k: 4,
            d_k: 5,
            ..ProtoConfig::default()
        },
        scenes: crate::trainer::SceneSet {
            first_seed: 7,
            count: 2,
            objects: 3,
        },
        rig,
        ..TrainConfig::default()
    }
}

/// Everything the finite-difference oracle perturbs around.
#[derive(Clone, Debug)]
pub struct MicroFixture {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub draw: SceneDraw,
    /// Codes at the unperturbed point; frozen so the loss is a smooth function.
    pub codes: Codes,
    /// Projected rows that fell back to the zero-norm basis vector.
    pub flagged: usize,
}

pub fn micro_fixture(seed: u64) -> Result<MicroFixture> {
    let config = micro_config(seed);
    let mut params = init_params(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1c5);
    // generic biases keep pre-activations of empty cells off the ReLU kink
    let biases: Vec<String> = params.names().filter(|n| n.ends_with(".b")).map(String::from).collect();
    for name in biases {
        params.data_mut(&name)?.iter_mut().for_each(|x| *x = rng.random_range(-0.2..0.2));
    }
    let sample = SceneSample::generate(
        config.scenes.first_seed,
        config.scenes.objects,
        config.grid.bounds,
        &config.rig,
    )?;
    let maps = crate::trainer::depth_guided_maps(&sample.cloud, &sample.frames, &config)?;
    let draw = draw_scene(&sample, &maps, None, &config, &mut rng)?;
    let mut tape = Tape::new();
    let b = params.bind_constants(&mut tape);
    let l = scene_loss(&mut tape, &b, &draw, &config, FusionInputs::Both, None)?;
    let rows = proto_rows(&draw.inputs.occupancy, &config.proto);
    let emb = project_embeddings(&mut tape, &b, l.encoded.p_hat, l.encoded.i_hat, rows.as_deref())?;
    Ok(MicroFixture {
        flagged: emb.flagged.len(),
        config,
        params,
        draw,
        codes: l.codes,
    })
}

/// `per_group` random coordinates from every parameter group.
pub fn group_coordinates(params: &ParamSet, per_group: usize, rng: &mut impl Rng) -> Vec<(String, usize)> {
    let mut groups: Vec<(&str, Vec<(String, usize)>)> = Vec::new();
    for (name, t) in params.iter() {
        let g = param_group(name);
        let entries = (0..t.data().len()).map(|i| (name.to_string(), i));
        match groups.iter_mut().find(|(k, _)| *k == g) {
            Some((_, v)) => v.extend(entries),
            None => groups.push((g, entries.collect())),
        }
    }
    let mut out = Vec::new();
    for (_, all) in groups {
        for _ in 0..per_group.min(all.len()) {
            out.push(all[rng.random_range(0..all.len())].clone());
        }
    }
    out
}

/// Analytic versus central-difference gradients of every loss in [`GRAD_LOSSES`].
pub fn gradient_suite(seed: u64, per_group: usize) -> Result<Vec<(&'static str, Vec<GradCheck>)>> {
    let fx = micro_fixture(seed)?;
    if fx.flagged > 0 {
        return Err(Error::invalid(format!("{} zero-norm embedding rows in the fixture", fx.flagged)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d);
    let coords = group_coordinates(&fx.params, per_group, &mut rng);
    GRAD_LOSSES
        .iter()
        .map(|&which| {
            let checks = check_param_gradients(&fx.params, &coords, FD_STEP, &|tape, b| {
                let l = scene_loss(tape, b, &fx.draw, &fx.config, FusionInputs::Both, Some(&fx.codes))?;
                Ok(match which {
                    "L_rend" => l.rend.total,
                    "L_EM" => l.proto.em,
                    "L_SwAV" => l.proto.swav,
                    "L_GMM" => l.proto.gmm,
                    _ => l.total,
                })
            })?;
            Ok((which, checks))
        })
        .collect()
}

/// Share of checks within `tol` and the worst relative error.
pub fn summarize(checks: &[GradCheck], tol: f64) -> (f64, f64) {
    let errs: Vec<f64> = checks.iter().map(|c| c.rel_err(FD_FLOOR)).collect();
    let within = errs.iter().filter(|&&e| e <= tol).count();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    (within as f64 / errs.len().max(1) as f64, worst)
}

fn gradients() -> Result<(bool, String)> {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, checks) in gradient_suite(0, 8)? {
        let (share, worst) = summarize(&checks, 1e-4);
        ok &= share >= 0.99 && worst <= 1e-3;
        parts.push(format!("{name} {:.0}% worst {worst:.1e}", 100.0 * share));
    }
    Ok((ok, parts.join(", ")))
}

fn render_weights_of(sdf: &[f64], h: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(Shape::new(1, sdf.len()), sdf.to_vec())?);
    let hv = tape.scalar(h);
    let w = render_weights(&mut tape, s, hv)?;
    Ok((tape.value(w.alpha).clone(), tape.value(w.trans).clone(), tape.value(w.weights).clone()))
}

/// Closed forms for `α` and `t`, then invariants on 10⁴ random SDF sequences.
pub fn rendering_fixture() -> Result<(bool, String)> {
    let (a, _, _) = render_weights_of(&[1.0, -1.0], 1.0)?;
    let alpha_ok = (a.get(0, 0) - 0.6322).abs() < 1e-4;
    let mut tape = Tape::new();
    let al = tape.constant(Tensor::row(vec![0.5, 0.5, 0.5]));
    let t = transmittance(&mut tape, al)?;
    let trans_ok = tape.value(t).data() == [1.0, 0.5, 0.25];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(2..24);
        let sdf: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (a, t, w) = render_weights_of(&sdf, rng.random_range(0.1..50.0))?;
        let unit = |x: &f64| (0.0..=1.0).contains(x);
        let fine = a.data().iter().all(unit)
            && t.data().iter().all(unit)
            && t.data().windows(2).all(|p| p[1] <= p[0])
            && w.data().iter().sum::<f64>() <= 1.0 + 1e-12;
        bad += usize::from(!fine);
    }
    Ok((
        alpha_ok && trans_ok && bad == 0,
        format!("alpha {:.6}, t exact {trans_ok}, {bad} bad sequences", a.get(0, 0)),
    ))
}

fn sphere(centre: [f64; 3], radius: f64) -> Result<ScenePrimitive> {
    ScenePrimitive::new(
        PrimitiveKind::Sphere { radius },
        Pose::translation(centre),
        [0.8, 0.2, 0.2],
        SemanticLabel::Foreground,
    )
}

/// One unit sphere resting on the ground plane in front of the sensors.
pub fn sphere_on_plane() -> Result<Scene> {
    Ok(Scene::new(
        vec![ScenePrimitive::ground(GROUND_ALBEDO), sphere([4.0, 0.0, 1.0], 1.0)?],
        default_bounds(),
    ))
}

/// `√2/r` on analytic spheres and zero on the plane.
pub fn curvature_oracle() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for r in [0.5, 1.0, 2.0] {
        let c = [1.0, -2.0, 0.5];
        let s = Scene::new(vec![sphere(c, r)?], default_bounds());
        let pts = [
            geom::add(c, [r, 0.0, 0.0]),
            geom::add(c, [0.0, 0.0, r]),
            geom::add(c, geom::scale(geom::normalize([1.0, -1.0, 1.0]), r)),
        ];
        for w in estimate_curvature(&s, &pts, DerivMode::JacobianFrobenius)? {
            worst = worst.max((w - 2f64.sqrt() / r).abs());
        }
    }
    let g = Scene::new(vec![ScenePrimitive::ground(GROUND_ALBEDO)], default_bounds());
    let plane = estimate_curvature(&g, &[[0.5, 0.5, 0.0], [-3.0, 2.0, 0.0]], DerivMode::JacobianFrobenius)?
        .into_iter()
        .fold(0.0, f64::max);
    Ok((
        worst < 1e-6 && plane < 1e-9,
        format!("sphere error {worst:.1e}, plane {plane:.1e}"),
    ))
}

/// `L_GMM`, `L_EM` and Sinkhorn closed forms.
pub fn prototype_fixture() -> Result<(bool, String)> {
    let gmm = |rows: &[&[f64]]| -> Result<f64> {
        let mut tape = Tape::new();
        let k = tape.constant(Tensor::from_rows(rows)?);
        let g = gram_loss(&mut tape, k)?;
        Ok(tape.value(g).item())
    };
    let g0 = gmm(&[&[1.0, 0.0, 0.0][..], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]])?;
    let g1 = gmm(&[&[0.6, 0.8][..], &[0.6, 0.8], &[0.6, 0.8]])?;
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::filled(Shape::new(1, 4), 0.3));
    let em = em_loss(&mut tape, s, s)?;
    let em = tape.value(em).item();
    let em_ok = (em - 2.0 * 4f64.ln() / 4.0).abs() < 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (e, p) = (unit_rows(&mut rng, 8, 32), unit_rows(&mut rng, 4, 32));
    let mut tape = Tape::new();
    let (ev, pv) = (tape.constant(e), tape.constant(p));
    let cos = tape.matmul_t(ev, pv, false, true)?;
    let cos = tape.value(cos).clone();
    let marg50 = column_marginal_error(&sinkhorn_codes(&cos, 50, 0.05)?);
    let mut fewer = true;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d: Vec<f64> = (0..24 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = Tensor::new(Shape::new(24, 6), d)?;
        let e1 = column_marginal_error(&sinkhorn_codes(&s, 1, 0.05)?);
        let e3 = column_marginal_error(&sinkhorn_codes(&s, 3, 0.05)?);
        fewer &= e3 < e1;
    }
    Ok((
        g0 == 0.0 && (g1 - 1.0).abs() < 1e-12 && em_ok && marg50 < 1e-3 && fewer,
        format!("gmm {g0}/{g1:.12}, em {em:.12}, sinkhorn50 {marg50:.1e}, 3<1 {fewer}"),
    ))
}

fn config_round_trip() -> Result<(bool, String)> {
    let c = TrainConfig::default();
    let back = TrainConfig::from_toml(&c.to_toml()?)?;
    Ok((back == c, "default config through TOML".into()))
}

/// Two identical tiny runs, then save→load→save of the result.
fn determinism(scratch: &Path) -> Result<(bool, String)> {
    let cfg = micro_config(5);
    let (a, b) = (scratch.join("run_a"), scratch.join("run_b"));
    let ca = Trainer::new(cfg.clone())?.run(&a)?;
    Trainer::new(cfg)?.run(&b)?;
    let la = std::fs::read(a.join(crate::trainer::LOG_FILE))?;
    let lb = std::fs::read(b.join(crate::trainer::LOG_FILE))?;
    let s1 = scratch.join("ckpt_a");
    let s2 = scratch.join("ckpt_b");
    ca.save(&s1)?;
    Checkpoint::load(&s1)?.save(&s2)?;
    let same = |ext: &str| -> Result<bool> {
        Ok(std::fs::read(s1.with_extension(ext))? == std::fs::read(s2.with_extension(ext))?)
    };
    let ckpt = same("json")? && same("bin")?;
    Ok((la == lb && ckpt, format!("logs identical {}, checkpoint round trip {ckpt}", la == lb)))
}

/// Every invariant check; `scratch` receives the temporary training runs.
pub fn run_all(scratch: &Path) -> Vec<Check> {
    if let Err(e) = std::fs::create_dir_all(scratch) {
        return vec![Check::new("scratch directory", false, e.to_string())];
    }
    vec![
        Check::from_result("gradients", gradients()),
        Check::from_result("rendering", rendering_fixture()),
        Check::from_result("curvature", curvature_oracle()),
        Check::from_result("prototypes", prototype_fixture()),
        Check::from_result("config", config_round_trip()),
        Check::from_result("determinism", determinism(scratch)),
    ]
}

/// Fails with the names of the failed checks.
pub fn require(checks: &[Check]) -> Result<()> {
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!("failed checks: {}", failed.join(", "))))
    }
}
