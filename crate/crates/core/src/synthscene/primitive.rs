use serde::{Deserialize, Serialize};

use crate::diffengine::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveKind {
    /// Horizontal plane through the pose origin, normal `+z`.
    Plane,
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
    /// Vertical capsule: segment of half-length `half_height` along local `z`.
    Capsule { radius: f64, half_height: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticLabel {
    Foreground,
    Ground,
}

/// Rigid placement; `rotation` maps local to world axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: geom::IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Pose {
            rotation: geom::IDENTITY,
            translation: t,
        }
    }

    pub fn to_local(&self, p: Vec3) -> Vec3 {
        geom::mat_t_vec(&self.rotation, geom::sub(p, self.translation))
    }

    pub fn dir_to_world(&self, d: Vec3) -> Vec3 {
        geom::mat_vec(&self.rotation, d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    #[serde(flatten)]
    pub kind: PrimitiveKind,
    pub pose: Pose,
    pub albedo: Vec3,
    pub label: SemanticLabel,
}

impl ScenePrimitive {
    pub fn new(kind: PrimitiveKind, pose: Pose, albedo: Vec3, label: SemanticLabel) -> Result<Self> {
        let positive = match kind {
            PrimitiveKind::Plane => true,
            PrimitiveKind::Sphere { radius } => radius > 0.0,
            PrimitiveKind::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
            PrimitiveKind::Capsule {
                radius,
                half_height,
            } => radius > 0.0 && half_height > 0.0,
        };
        if !positive {
            return Err(Error::invalid(format!("non-positive size in {kind:?}")));
        }
        if albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("albedo outside [0,1]"));
        }
        Ok(ScenePrimitive {
            kind,
            pose,
            albedo,
            label,
        })
    }

    pub fn ground(albedo: Vec3) -> Self {
        ScenePrimitive {
            kind: PrimitiveKind::Plane,
            pose: Pose::identity(),
            albedo,
            label: SemanticLabel::Ground,
        }
    }

    /// Exact signed distance.
    pub fn sdf(&self, p: Vec3) -> f64 {
        let l = self.pose.to_local(p);
        match self.kind {
            PrimitiveKind::Plane => l[2],
            PrimitiveKind::Sphere { radius } => geom::norm(l) - radius,
            PrimitiveKind::Box { half_extents } => {
                let q: Vec3 = std::array::from_fn(|i| l[i].abs() - half_extents[i]);
                let outside = geom::norm(q.map(|x| x.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            PrimitiveKind::Capsule {
                radius,
                half_height,
            } => {
                let z = l[2] - l[2].clamp(-half_height, half_height);
                geom::norm([l[0], l[1], z]) - radius
            }
        }
    }

    /// Analytic outward unit normal of the distance field at `p`.
    pub fn normal(&self, p: Vec3) -> Vec3 {
        let l = self.pose.to_local(p);
        let n_local = match self.kind {
            PrimitiveKind::Plane => [0.0, 0.0, 1.0],
            PrimitiveKind::Sphere { .. } => geom::normalize(l),
            PrimitiveKind::Box { half_extents } => {
                let q: Vec3 = std::array::from_fn(|i| l[i].abs() - half_extents[i]);
                let sign: Vec3 = l.map(|x| if x < 0.0 { -1.0 } else { 1.0 });
                if q.iter().any(|&x| x > 0.0) {
                    let m = q.map(|x| x.max(0.0));
                    let n = geom::normalize(m);
                    std::array::from_fn(|i| n[i] * sign[i])
                } else {
                    let axis = (0..3).fold(0, |best, i| if q[i] > q[best] { i } else { best });
                    let mut n = [0.0; 3];
                    n[axis] = sign[axis];
                    n
                }
            }
            PrimitiveKind::Capsule { half_height, .. } => {
                let z = l[2] - l[2].clamp(-half_height, half_height);
                geom::normalize([l[0], l[1], z])
            }
        };
        self.pose.dir_to_world(n_local)
    }

    /// Closed-form Frobenius norm of the normal field's Jacobian at a surface point.
    pub fn surface_curvature(&self, p: Vec3) -> f64 {
        match self.kind {
            PrimitiveKind::Plane | PrimitiveKind::Box { .. } => 0.0,
            PrimitiveKind::Sphere { radius } => 2f64.sqrt() / radius,
            PrimitiveKind::Capsule {
                radius,
                half_height,
            } => {
                let z = self.pose.to_local(p)[2];
                if z.abs() <= half_height {
                    1.0 / radius
                } else {
                    2f64.sqrt() / radius
                }
            }
        }
    }

    /// Radius of a sphere around the pose origin enclosing the primitive.
    pub fn bounding_radius(&self) -> f64 {
        match self.kind {
            PrimitiveKind::Plane => f64::INFINITY,
            PrimitiveKind::Sphere { radius } => radius,
            PrimitiveKind::Box { half_extents } => geom::norm(half_extents),
            PrimitiveKind::Capsule {
                radius,
                half_height,
            } => radius + half_height,
        }
    }

    /// Signed distance recorded on a tape for `[n,3]` world points.
    pub fn sdf_on_tape(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let n = tape.shape(points).rows;
        let t = tape.constant(Tensor::row(self.pose.translation.to_vec()));
        let rel = tape.sub(points, t)?;
        // local row = (p - t)ᵀ R
        let r = tape.constant(mat_tensor(&self.pose.rotation));
        let local = tape.matmul(rel, r)?;
        match self.kind {
            PrimitiveKind::Plane => tape.slice_cols(local, 2, 1),
            PrimitiveKind::Sphere { radius } => {
                let len = tape.row_norm(local)?;
                tape.affine(len, 1.0, -radius)
            }
            PrimitiveKind::Box { half_extents } => {
                let a = tape.abs(local)?;
                let h = tape.constant(Tensor::row(half_extents.to_vec()));
                let q = tape.sub(a, h)?;
                let pos = tape.max_const(q, 0.0)?;
                let outside = tape.row_norm(pos)?;
                let qx = tape.slice_cols(q, 0, 1)?;
                let qy = tape.slice_cols(q, 1, 1)?;
                let qz = tape.slice_cols(q, 2, 1)?;
                let m = max_on_tape(tape, qx, qy)?;
                let m = max_on_tape(tape, m, qz)?;
                // min(m, 0) = m - relu(m)
                let rm = tape.relu(m)?;
                let inner = tape.sub(m, rm)?;
                tape.add(outside, inner)
            }
            PrimitiveKind::Capsule {
                radius,
                half_height,
            } => {
                let xy = tape.slice_cols(local, 0, 2)?;
                let z = tape.slice_cols(local, 2, 1)?;
                let above = tape.affine(z, 1.0, -half_height)?;
                let above = tape.relu(above)?;
                let below = tape.affine(z, -1.0, -half_height)?;
                let below = tape.relu(below)?;
                let dz = tape.sub(above, below)?;
                let p = tape.concat(xy, dz)?;
                let len = tape.row_norm(p)?;
                debug_assert_eq!(tape.shape(len).rows, n);
                tape.affine(len, 1.0, -radius)
            }
        }
    }
}

fn mat_tensor(m: &Mat3) -> Tensor {
    Tensor::new(crate::diffengine::Shape::new(3, 3), m.iter().flatten().copied().collect())
        .expect("3x3")
}

/// `max(a, b) = a + relu(b - a)`
pub(crate) fn max_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(b, a)?;
    let r = tape.relu(d)?;
    tape.add(a, r)
}

/// `min(a, b) = a - relu(a - b)`
pub(crate) fn min_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let r = tape.relu(d)?;
    tape.sub(a, r)
}
