use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::curvsample::{project_pixel_weights, sample_indices, CurvatureWeights};
use crate::diffengine::{Bound, ParamSet, Shape, Tape, Tensor, Var};
use crate::encoders::{encode_scene, init_encoder_params, Encoded, FusionInputs, MaskSpec, SceneInputs};
use crate::error::{Error, Result};
use crate::neuralfield::{eval_field, eval_sdf, init_field_params, FrozenField};
use crate::protolearn::{init_proto_params, project_embeddings, proto_loss_with_codes, proto_rows, Codes, ProtoLoss};
use crate::renderer::{
    init_render_params, integrate, integrate_rows, ray_bounds, render_weights, rendering_loss, sample_ray,
    sharpness, Ray, RayBatch, RenderLoss,
};
use crate::synthscene::{CameraFrame, PointCloud, SceneSample};

/// Fresh parameters for every trainable group.
pub fn init_params(cfg: &TrainConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = ParamSet::new();
    init_encoder_params(&mut rng, &mut p, &cfg.encoder)?;
    init_field_params(&mut rng, &mut p, cfg.encoder.d_f)?;
    init_render_params(&mut p, cfg.h0)?;
    init_proto_params(&mut rng, &mut p, cfg.encoder.d_p, cfg.encoder.d_i, &cfg.proto)?;
    Ok(p)
}

/// Parameter group of a name (`enc_p`, `sdf`, `proto`, ...).
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Pixel maps for uniform sampling: every LiDAR point with weight one,
/// blurred like the curvature maps, so camera rays follow the LiDAR support.
pub fn depth_guided_maps(cloud: &PointCloud, frames: &[CameraFrame], cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
    let ones = vec![1.0; cloud.len()];
    project_pixel_weights(cloud, &ones, frames, cfg.k_gaus, cfg.sigma_blur)
}

/// Rays and targets drawn for one scene at one step.
#[derive(Clone, Debug)]
pub struct SceneDraw {
    pub inputs: SceneInputs,
    pub lidar: RayBatch,
    /// `[R, 1]` observed ranges.
    pub ranges: Tensor,
    /// `[R, 3]` observed endpoints.
    pub endpoints: Tensor,
    pub camera: Option<RayBatch>,
    /// `[R_c, 3]` observed colours.
    pub colors: Tensor,
}

fn lidar_ray(cloud: &PointCloud, i: usize, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Option<Ray>> {
    let d = cloud.direction(i);
    let Some((near, far)) = ray_bounds(&cfg.grid.bounds, cloud.origin, d) else {
        return Ok(None);
    };
    sample_ray(cloud.origin, d, near, far, cfg.n_samples, cfg.sample_strategy, rng).map(Some)
}

/// Draws `N_L` LiDAR rays and `N_C` pixels per camera. `weights` switches
/// from the depth-guided uniform maps to curvature weighting.
pub fn draw_scene(
    sample: &SceneSample,
    uniform_maps: &[Vec<f64>],
    weights: Option<&CurvatureWeights>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SceneDraw> {
    let cloud = &sample.cloud;
    if cloud.is_empty() {
        return Err(Error::invalid(format!("scene {} has no LiDAR returns", sample.seed)));
    }
    let mask = MaskSpec::new(cfg.mask_rate, rng.random())?;
    let inputs = SceneInputs::prepare(cloud, &sample.frames, &cfg.grid, Some(&mask))?;

    let picks = match weights {
        Some(w) => sample_indices(&w.points, cfg.n_lidar, rng)?,
        None => (0..cfg.n_lidar).map(|_| rng.random_range(0..cloud.len())).collect(),
    };
    let mut rays = Vec::with_capacity(picks.len());
    let (mut ranges, mut ends) = (Vec::new(), Vec::new());
    for i in picks {
        if let Some(r) = lidar_ray(cloud, i, cfg, rng)? {
            rays.push(r);
            ranges.push(cloud.range(i));
            ends.extend(cloud.xyz[i]);
        }
    }
    if rays.is_empty() {
        return Err(Error::invalid("no LiDAR ray intersects the grid"));
    }
    let n = rays.len();
    let lidar = RayBatch::new(rays)?;

    let mut cam_rays = Vec::new();
    let mut colors = Vec::new();
    if cfg.n_pixels > 0 {
        for (ci, frame) in sample.frames.iter().enumerate() {
            let map = match weights {
                Some(w) => &w.pixels[ci],
                None => &uniform_maps[ci],
            };
            for px in sample_indices(map, cfg.n_pixels, rng)? {
                let (u, v) = (px % frame.width, px / frame.width);
                let (o, d) = frame.ray(u as f64, v as f64);
                let Some((near, far)) = ray_bounds(&cfg.grid.bounds, o, d) else {
                    continue;
                };
                cam_rays.push(sample_ray(o, d, near, far, cfg.n_samples, cfg.sample_strategy, rng)?);
                colors.extend(frame.rgb(u, v));
            }
        }
    }
    let n_c = cam_rays.len();
    Ok(SceneDraw {
        inputs,
        lidar,
        ranges: Tensor::column(ranges),
        endpoints: Tensor::new(Shape::new(n, 3), ends)?,
        camera: (n_c > 0).then(|| RayBatch::new(cam_rays)).transpose()?,
        colors: Tensor::new(Shape::new(n_c, 3), colors)?,
    })
}

/// Rendered range `[R, 1]` of a ray batch through the field on `grid`.
pub fn render_ranges(tape: &mut Tape, p: &Bound, grid: Var, cfg: &TrainConfig, rays: &RayBatch) -> Result<Var> {
    let pts = tape.constant(rays.points());
    let s = eval_sdf(tape, p, grid, &cfg.grid, pts)?;
    let s = tape.reshape(s, Shape::new(rays.len(), rays.samples))?;
    let h = sharpness(tape, p)?;
    let w = render_weights(tape, s, h)?;
    let t = tape.constant(rays.ranges());
    integrate(tape, w.weights, t)
}

#[derive(Clone, Debug)]
pub struct SceneLoss {
    pub total: Var,
    pub rend: RenderLoss,
    pub proto: ProtoLoss,
    pub codes: Codes,
    pub encoded: Encoded,
}

/// `ω_r·L_rend + ω_proto·L_proto` for one drawn scene.
pub fn scene_loss(
    tape: &mut Tape,
    p: &Bound,
    draw: &SceneDraw,
    cfg: &TrainConfig,
    fusion: FusionInputs,
    codes: Option<&Codes>,
) -> Result<SceneLoss> {
    let enc = encode_scene(tape, p, &draw.inputs, fusion)?;
    let grid = enc.f_tilde;
    let pred = render_ranges(tape, p, grid, cfg, &draw.lidar)?;
    let ends = tape.constant(draw.endpoints.clone());
    let surface = eval_sdf(tape, p, grid, &cfg.grid, ends)?;
    let colors = match &draw.camera {
        Some(cam) => {
            let pts = tape.constant(cam.points());
            let (s, c) = eval_field(tape, p, grid, &cfg.grid, pts)?;
            let s = tape.reshape(s, Shape::new(cam.len(), cam.samples))?;
            let h = sharpness(tape, p)?;
            let w = render_weights(tape, s, h)?;
            Some(integrate_rows(tape, w.weights, c)?)
        }
        None => None,
    };
    let rend = rendering_loss(
        tape,
        pred,
        &draw.ranges,
        surface,
        colors.map(|c| (c, &draw.colors)),
        cfg.w_sur,
        cfg.w_c,
    )?;
    let rows = proto_rows(&draw.inputs.occupancy, &cfg.proto);
    if rows.as_ref().is_some_and(|r| r.is_empty()) {
        return Err(Error::invalid("no occupied cells for the prototype losses"));
    }
    let emb = project_embeddings(tape, p, enc.p_hat, enc.i_hat, rows.as_deref())?;
    let (proto, codes) = proto_loss_with_codes(tape, p, &emb, &cfg.proto, codes)?;
    let a = tape.scale(rend.total, cfg.w_r)?;
    let b = tape.scale(proto.total, cfg.w_proto)?;
    let total = tape.add(a, b)?;
    Ok(SceneLoss {
        total,
        rend,
        proto,
        codes,
        encoded: enc,
    })
}

/// Logged loss values of one step (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub l: f64,
    pub l_rend: f64,
    pub l_proto: f64,
    pub l_em: f64,
    pub l_swav: f64,
    pub l_gmm: f64,
}

fn non_finite(tape: &Tape, what: &str) -> Error {
    match tape.first_non_finite() {
        Some((id, op)) => Error::NonFinite(format!("{what}: first non-finite node #{id} ({op})")),
        None => Error::NonFinite(what.to_string()),
    }
}

/// Loss values and parameter gradients of one scene.
pub fn scene_gradient(
    params: &ParamSet,
    draw: &SceneDraw,
    cfg: &TrainConfig,
    fusion: FusionInputs,
) -> Result<(StepStats, Vec<(String, Tensor)>)> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let l = scene_loss(&mut tape, &b, draw, cfg, fusion, None)?;
    let v = |x: Var| tape.value(x).item();
    let stats = StepStats {
        l: v(l.total),
        l_rend: v(l.rend.total),
        l_proto: v(l.proto.total),
        l_em: v(l.proto.em),
        l_swav: v(l.proto.swav),
        l_gmm: v(l.proto.gmm),
    };
    if !stats.l.is_finite() {
        return Err(non_finite(&tape, "loss"));
    }
    let names = b.names();
    let grads = tape.gradient(l.total, &b.vars())?;
    if let Some(k) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{}`", names[k])));
    }
    Ok((stats, names.into_iter().zip(grads).collect()))
}

/// Batch-mean stats and gradients; scenes run on separate threads and are
/// reduced in batch order.
pub fn batch_gradient(
    params: &ParamSet,
    draws: &[SceneDraw],
    cfg: &TrainConfig,
    fusion: FusionInputs,
) -> Result<(StepStats, Vec<(String, Tensor)>)> {
    if draws.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let results: Vec<Result<_>> = if draws.len() == 1 {
        vec![scene_gradient(params, &draws[0], cfg, fusion)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = draws
                .iter()
                .map(|d| s.spawn(move || scene_gradient(params, d, cfg, fusion)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("worker panicked"))))
                .collect()
        })
    };
    let inv = 1.0 / draws.len() as f64;
    let mut stats = StepStats::default();
    let mut sum: Option<Vec<(String, Tensor)>> = None;
    for r in results {
        let (s, g) = r?;
        stats.l += s.l * inv;
        stats.l_rend += s.l_rend * inv;
        stats.l_proto += s.l_proto * inv;
        stats.l_em += s.l_em * inv;
        stats.l_swav += s.l_swav * inv;
        stats.l_gmm += s.l_gmm * inv;
        match &mut sum {
            None => sum = Some(g.into_iter().map(|(n, t)| (n, t.map(|x| x * inv))).collect()),
            Some(acc) => {
                for ((_, a), (_, t)) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                        *x += y * inv;
                    }
                }
            }
        }
    }
    Ok((stats, sum.expect("non-empty batch")))
}

/// `F̃` of a scene with frozen parameters.
pub fn scene_features(params: &ParamSet, sample: &SceneSample, cfg: &TrainConfig, mask: Option<&MaskSpec>) -> Result<Tensor> {
    let inputs = SceneInputs::prepare(&sample.cloud, &sample.frames, &cfg.grid, mask)?;
    let mut tape = Tape::new();
    let b = params.bind_constants(&mut tape);
    let enc = encode_scene(&mut tape, &b, &inputs, FusionInputs::Both)?;
    Ok(tape.value(enc.f_tilde).clone())
}

/// The learned field of one scene, for curvature estimation and exports.
pub fn scene_field(params: &ParamSet, sample: &SceneSample, cfg: &TrainConfig, mask: Option<&MaskSpec>) -> Result<FrozenField> {
    let grid = scene_features(params, sample, cfg, mask)?;
    FrozenField::new(params, grid, cfg.grid)
}

/// Mean `|r − r̃|` over every return of `cloud`, rendered through the field
/// built from `sample`'s sensors.
pub fn range_error(
    params: &ParamSet,
    sample: &SceneSample,
    cloud: &PointCloud,
    cfg: &TrainConfig,
    mask: Option<&MaskSpec>,
) -> Result<f64> {
    let grid = scene_features(params, sample, cfg, mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut err = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..cloud.len()).collect();
    for chunk in idx.chunks(256) {
        let mut rays = Vec::new();
        let mut target = Vec::new();
        let eval_cfg = TrainConfig {
            sample_strategy: crate::renderer::SampleStrategy::Uniform,
            ..cfg.clone()
        };
        for &i in chunk {
            if let Some(r) = lidar_ray(cloud, i, &eval_cfg, &mut rng)? {
                rays.push(r);
                target.push(cloud.range(i));
            }
        }
        if rays.is_empty() {
            continue;
        }
        let batch = RayBatch::new(rays)?;
        let mut tape = Tape::new();
        let b = params.bind_constants(&mut tape);
        let g = tape.constant(grid.clone());
        let pred = render_ranges(&mut tape, &b, g, cfg, &batch)?;
        for (p, t) in tape.value(pred).data().iter().zip(&target) {
            err += (p - t).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no evaluation rays intersect the grid"));
    }
    Ok(err / count as f64)
}
