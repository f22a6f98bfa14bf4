//! Debug artifacts of a trained model: curvature and prototype point clouds,
//! rendered views and the tape of one loss evaluation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::model::{depth_guided_maps, draw_scene, scene_field, scene_loss};
use crate::curvsample::{clip_quantile, estimate_curvature};
use crate::diffengine::{ParamSet, Tape};
use crate::encoders::{encode_scene, FusionInputs, SceneInputs};
use crate::error::{Error, Result};
use crate::protolearn::{assignments, project_embeddings, similarity, PROTO_PARAM};
use crate::renderer::{render_image, sharpness, RenderedImage};
use crate::synthscene::{heat_color, palette, write_ply, write_ppm, SceneSample};

const OUTSIDE_GRID: [f64; 3] = [0.5, 0.5, 0.5];

/// Curvature weight of every LiDAR point under the learned field, clipped like
/// the sampler clips it, written as a blue→red PLY. Returns the weights.
pub fn export_curvature(params: &ParamSet, sample: &SceneSample, cfg: &TrainConfig, path: &Path) -> Result<Vec<f64>> {
    let field = scene_field(params, sample, cfg, None)?;
    let w = clip_quantile(&estimate_curvature(&field, &sample.cloud.xyz, cfg.curvature_mode)?, 0.999);
    let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let colors: Vec<_> = w.iter().map(|&x| heat_color(x, lo, hi)).collect();
    write_ply(path, &sample.cloud, Some(&colors))?;
    Ok(w)
}

/// Argmax prototype of each grid cell's point embedding.
pub fn cell_prototypes(params: &ParamSet, sample: &SceneSample, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let inputs = SceneInputs::prepare(&sample.cloud, &sample.frames, &cfg.grid, None)?;
    let mut tape = Tape::new();
    let b = params.bind_constants(&mut tape);
    let enc = encode_scene(&mut tape, &b, &inputs, FusionInputs::Both)?;
    let emb = project_embeddings(&mut tape, &b, enc.p_hat, enc.i_hat, None)?;
    let k = b.get(PROTO_PARAM)?;
    let s = similarity(&mut tape, emb.p, k)?;
    Ok(assignments(tape.value(s)))
}

/// Points coloured by the prototype of their cell (grey outside the grid).
/// Returns the per-point assignment.
pub fn export_prototypes(
    params: &ParamSet,
    sample: &SceneSample,
    cfg: &TrainConfig,
    path: &Path,
) -> Result<Vec<Option<usize>>> {
    let cells = cell_prototypes(params, sample, cfg)?;
    let per_point: Vec<Option<usize>> = sample.cloud.xyz.iter().map(|p| cfg.grid.locate(*p).map(|c| cells[c])).collect();
    let colors: Vec<_> = per_point.iter().map(|a| a.map_or(OUTSIDE_GRID, palette)).collect();
    write_ply(path, &sample.cloud, Some(&colors))?;
    Ok(per_point)
}

/// Renders the learned field through every rig camera into `dir`
/// (`viewN_depth.ppm`, `viewN_rgb.ppm`, `viewN_opacity.ppm`).
pub fn export_views(params: &ParamSet, sample: &SceneSample, cfg: &TrainConfig, dir: &Path) -> Result<Vec<RenderedImage>> {
    std::fs::create_dir_all(dir)?;
    let field = scene_field(params, sample, cfg, None)?;
    let mut tape = Tape::new();
    let b = params.bind_constants(&mut tape);
    let h = sharpness(&mut tape, &b)?;
    let h = tape.value(h).item();
    let mut out = Vec::new();
    for (i, cam) in cfg.rig.cameras.iter().enumerate() {
        let img = render_image(&field, h, &cam.pose, &cam.intrinsics, cfg.rig.width, cfg.rig.height, cfg.n_samples)?;
        let far = img.depth.iter().copied().fold(0.0, f64::max).max(1e-9);
        let grey = |v: &[f64], scale: f64| -> Vec<f64> { v.iter().flat_map(|x| [x / scale; 3]).collect() };
        write_ppm(&dir.join(format!("view{i}_depth.ppm")), img.width, img.height, &grey(&img.depth, far))?;
        write_ppm(&dir.join(format!("view{i}_rgb.ppm")), img.width, img.height, &img.rgb)?;
        write_ppm(&dir.join(format!("view{i}_opacity.ppm")), img.width, img.height, &grey(&img.opacity, 1.0))?;
        out.push(img);
    }
    Ok(out)
}

/// JSON op-list of the tape recorded for one training loss on `sample`.
pub fn loss_tape_json(params: &ParamSet, sample: &SceneSample, cfg: &TrainConfig) -> Result<String> {
    let maps = depth_guided_maps(&sample.cloud, &sample.frames, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = draw_scene(sample, &maps, None, cfg, &mut rng)?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let l = scene_loss(&mut tape, &b, &draw, cfg, FusionInputs::Both, None)?;
    if !tape.value(l.total).item().is_finite() {
        return Err(Error::NonFinite("loss of the dumped tape".into()));
    }
    tape.dump_json()
}
