//! Point, image and fusion encoders over a dense voxel grid.

mod grid;
mod layers;
mod lift;

pub use grid::{apply_mask, voxelize, GridSpec, MaskSpec, VoxelFeatureGrid, Voxelized};
pub use layers::{activate, dense, image_stencil, stencil_conv, Act};
pub use lift::{
    bilinear_corners, buffer_depth, plan_lift, visible_sample, LiftPlan, VISIBILITY_TOLERANCE,
};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Bound, CornerIndex, ParamSet, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::synthscene::{CameraFrame, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// `3 + d` raw point channels.
    pub point_in: usize,
    pub image_hidden: usize,
    pub d_p: usize,
    pub d_i: usize,
    pub d_f: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            point_in: 4,
            image_hidden: 16,
            d_p: 32,
            d_i: 16,
            d_f: 32,
        }
    }
}

pub fn init_encoder_params(rng: &mut impl Rng, params: &mut ParamSet, d: &EncoderDims) -> Result<()> {
    params.init_linear(rng, "enc_p.l1", d.point_in, d.d_p)?;
    params.init_linear(rng, "enc_p.l2", d.d_p, d.d_p)?;
    params.init_linear(rng, "enc_p.mix", 27 * d.d_p, d.d_p)?;
    params.init_linear(rng, "enc_i.c1", 9 * 3, d.image_hidden)?;
    params.init_linear(rng, "enc_i.c2", 9 * d.image_hidden, d.d_i)?;
    params.init_linear(rng, "fuse.l1", d.d_p + d.d_i, d.d_f)?;
    params.init_linear(rng, "fuse.l2", d.d_f, d.d_f)?;
    params.init_linear(rng, "f3d.conv", 27 * d.d_f, d.d_f)?;
    Ok(())
}

/// `P̂`: per-cell two-layer MLP, then one 3×3×3 mixing layer.
pub fn encode_points(tape: &mut Tape, p: &Bound, voxels: Var, stencil: &Arc<CornerIndex>) -> Result<Var> {
    let h = dense(tape, p, "enc_p.l1", voxels, Act::Relu)?;
    let h = dense(tape, p, "enc_p.l2", h, Act::Relu)?;
    stencil_conv(tape, p, "enc_p.mix", h, stencil, 27, Act::Relu)
}

/// Per-pixel features `[w·h, d_i]` of one `[w·h, 3]` image.
pub fn encode_image(tape: &mut Tape, p: &Bound, image: Var, stencil: &Arc<CornerIndex>) -> Result<Var> {
    let h = stencil_conv(tape, p, "enc_i.c1", image, stencil, 9, Act::Relu)?;
    stencil_conv(tape, p, "enc_i.c2", h, stencil, 9, Act::Relu)
}

/// `Î`: image features gathered bilinearly at visible LiDAR points and
/// scatter-averaged into their cells.
pub fn encode_images(
    tape: &mut Tape,
    p: &Bound,
    images: &[Var],
    stencil: &Arc<CornerIndex>,
    plans: &[LiftPlan],
    cells: usize,
) -> Result<Var> {
    if images.len() != plans.len() {
        return Err(Error::invalid(format!(
            "{} images but {} lift plans",
            images.len(),
            plans.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&img, plan) in images.iter().zip(plans) {
        let feat = encode_image(tape, p, img, stencil)?;
        let d = tape.shape(feat).cols;
        let lifted = if plan.is_empty() {
            tape.constant(Tensor::zeros(Shape::new(cells, d)))
        } else {
            let w = tape.constant(plan.weights.clone());
            let g = tape.weighted_gather(feat, w, plan.pixels.clone())?;
            let s = tape.constant(plan.scatter.clone());
            tape.weighted_scatter(g, s, plan.cells.clone(), cells)?
        };
        acc = Some(match acc {
            None => lifted,
            Some(a) => tape.add(a, lifted)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("no camera frames"))
}

/// `F̂`: channel concat then a per-cell two-layer MLP.
pub fn fuse(tape: &mut Tape, p: &Bound, p_feat: Var, i_feat: Var) -> Result<Var> {
    let (a, b) = (tape.shape(p_feat), tape.shape(i_feat));
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            node: i_feat.id(),
            lhs: a.to_string(),
            rhs: b.to_string(),
        });
    }
    let x = tape.concat(p_feat, i_feat)?;
    let h = dense(tape, p, "fuse.l1", x, Act::Relu)?;
    dense(tape, p, "fuse.l2", h, Act::None)
}

/// `F̃ = F̂ + conv(F̂)`.
pub fn refine_3d(tape: &mut Tape, p: &Bound, fused: Var, stencil: &Arc<CornerIndex>) -> Result<Var> {
    let r = stencil_conv(tape, p, "f3d.conv", fused, stencil, 27, Act::None)?;
    tape.add(fused, r)
}

/// Which modalities feed the fusion layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionInputs {
    #[default]
    Both,
    PointsOnly,
    ImagesOnly,
}

/// Everything about one scene that the encoders need and that carries no gradient.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub spec: GridSpec,
    /// Masked raw cell features `[cells, 3 + d]`.
    pub voxels: Tensor,
    pub occupancy: Vec<bool>,
    pub mask: Vec<bool>,
    pub images: Vec<Tensor>,
    pub plans: Vec<LiftPlan>,
    pub stencil: Arc<CornerIndex>,
    pub image_stencil: Arc<CornerIndex>,
    pub dropped: usize,
}

impl SceneInputs {
    pub fn prepare(
        cloud: &PointCloud,
        frames: &[CameraFrame],
        spec: &GridSpec,
        mask: Option<&MaskSpec>,
    ) -> Result<Self> {
        let vox = voxelize(cloud, spec)?;
        let (grid, cell_mask) = match mask {
            Some(m) => apply_mask(&vox.grid, m)?,
            None => (vox.grid.clone(), vec![false; spec.cells()]),
        };
        let plans = plan_lift(cloud, &vox.point_cell, frames, spec.cells(), Some(&cell_mask))?;
        let (w, h) = frames
            .first()
            .map(|f| (f.width, f.height))
            .ok_or_else(|| Error::invalid("no camera frames"))?;
        if frames.iter().any(|f| (f.width, f.height) != (w, h)) {
            return Err(Error::invalid("camera frames differ in size"));
        }
        let images = frames
            .iter()
            .map(|f| Tensor::new(Shape::new(w * h, 3), f.image.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneInputs {
            spec: *spec,
            voxels: grid.to_tensor(),
            occupancy: vox.grid.occupancy,
            mask: cell_mask,
            images,
            plans,
            stencil: spec.stencil(),
            image_stencil: image_stencil(w, h),
            dropped: vox.dropped,
        })
    }
}

/// Tape handles of every encoder stage for one scene.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub p_hat: Var,
    pub i_hat: Var,
    pub f_hat: Var,
    pub f_tilde: Var,
}

pub fn encode_scene(tape: &mut Tape, p: &Bound, inputs: &SceneInputs, which: FusionInputs) -> Result<Encoded> {
    let vox = tape.constant(inputs.voxels.clone());
    let p_hat = encode_points(tape, p, vox, &inputs.stencil)?;
    let images: Vec<Var> = inputs.images.iter().map(|t| tape.constant(t.clone())).collect();
    let i_hat = encode_images(
        tape,
        p,
        &images,
        &inputs.image_stencil,
        &inputs.plans,
        inputs.spec.cells(),
    )?;
    let zero_like = |tape: &mut Tape, v: Var| tape.constant(Tensor::zeros(tape.shape(v)));
    let (pf, imf) = match which {
        FusionInputs::Both => (p_hat, i_hat),
        FusionInputs::PointsOnly => (p_hat, zero_like(tape, i_hat)),
        FusionInputs::ImagesOnly => (zero_like(tape, p_hat), i_hat),
    };
    let f_hat = fuse(tape, p, pf, imf)?;
    let f_tilde = refine_3d(tape, p, f_hat, &inputs.stencil)?;
    Ok(Encoded {
        p_hat,
        i_hat,
        f_hat,
        f_tilde,
    })
}
