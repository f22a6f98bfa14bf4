use super::{integrate, integrate_rows, ray_bounds, render_weights, Ray, RayBatch};
use crate::diffengine::{Shape, Tape, Tensor};
use crate::error::Result;
use crate::neuralfield::{eval_field, FrozenField};
use crate::synthscene::{CameraPose, Intrinsics};

/// Field rendered through a pinhole camera. Depth is camera `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub rgb: Vec<f64>,
    /// Total ray weight `Σ w` per pixel.
    pub opacity: Vec<f64>,
}

pub fn render_image(
    field: &FrozenField,
    h: f64,
    pose: &CameraPose,
    k: &Intrinsics,
    width: usize,
    height: usize,
    samples: usize,
) -> Result<RenderedImage> {
    let mut out = RenderedImage {
        width,
        height,
        depth: vec![0.0; width * height],
        rgb: vec![0.0; width * height * 3],
        opacity: vec![0.0; width * height],
    };
    let centre = pose.centre();
    let fwd = pose.rotation[2];
    let mut pending: Vec<(usize, Ray)> = Vec::new();
    for v in 0..height {
        for u in 0..width {
            let dc = [(u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0];
            let d = crate::geom::normalize(crate::geom::mat_t_vec(&pose.rotation, dc));
            let Some((near, far)) = ray_bounds(&field.spec.bounds, centre, d) else { continue };
            let bin = (far - near) / samples as f64;
            let ranges = (0..samples).map(|i| near + (i as f64 + 0.5) * bin).collect();
            pending.push((v * width + u, Ray {
                origin: centre,
                dir: d,
                ranges,
            }));
        }
    }
    for chunk in pending.chunks(256) {
        let batch = RayBatch::new(chunk.iter().map(|(_, r)| r.clone()).collect())?;
        let mut tape = Tape::new();
        let params = field.heads.bind_constants(&mut tape);
        let grid = tape.constant(field.grid.clone());
        let pts = tape.constant(batch.points());
        let (s, c) = eval_field(&mut tape, &params, grid, &field.spec, pts)?;
        let s = tape.reshape(s, Shape::new(batch.len(), batch.samples))?;
        let hv = tape.constant(Tensor::scalar(h));
        let w = render_weights(&mut tape, s, hv)?;
        let ranges = tape.constant(batch.ranges());
        let r = integrate(&mut tape, w.weights, ranges)?;
        let rgb = integrate_rows(&mut tape, w.weights, c)?;
        let total = tape.sum_rows(w.weights)?;
        for (row, (pix, ray)) in chunk.iter().enumerate() {
            let cosine = crate::geom::dot(ray.dir, fwd);
            out.depth[*pix] = tape.value(r).get(row, 0) * cosine;
            out.opacity[*pix] = tape.value(total).get(row, 0);
            for ch in 0..3 {
                out.rgb[3 * pix + ch] = tape.value(rgb).get(row, ch);
            }
        }
    }
    Ok(out)
}
