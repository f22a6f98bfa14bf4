use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::primitive::{min_on_tape, Pose, PrimitiveKind, ScenePrimitive, SemanticLabel};
use crate::diffengine::{Tape, Var};
use crate::error::{Error, Result};
use crate::geom::{self, Aabb, Vec3};

/// Albedo of the ground plane (mid grey).
pub const GROUND_ALBEDO: Vec3 = [0.45, 0.45, 0.45];

/// Objects keep this much horizontal clearance from the sensor mast at the origin.
const SENSOR_CLEARANCE: f64 = 2.0;
const ATTEMPTS_PER_OBJECT: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<ScenePrimitive>,
    pub bounds: Aabb,
}

impl Scene {
    /// Scene from explicit primitives (no ground plane is added).
    pub fn new(primitives: Vec<ScenePrimitive>, bounds: Aabb) -> Self {
        Scene { primitives, bounds }
    }

    /// Composite signed distance, `min` over primitives.
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.closest(p).map_or(f64::INFINITY, |(_, d)| d)
    }

    /// Index and distance of the primitive whose surface is nearest in the SDF sense.
    pub fn closest(&self, p: Vec3) -> Option<(usize, f64)> {
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, prim)| (i, prim.sdf(p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn normal(&self, p: Vec3) -> Option<Vec3> {
        self.closest(p).map(|(i, _)| self.primitives[i].normal(p))
    }

    pub fn label_of(&self, id: usize) -> SemanticLabel {
        self.primitives[id].label
    }

    /// Composite distance recorded on a tape for `[n,3]` points.
    pub fn sdf_on_tape(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for prim in &self.primitives {
            let d = prim.sdf_on_tape(tape, points)?;
            acc = Some(match acc {
                None => d,
                Some(a) => min_on_tape(tape, a, d)?,
            });
        }
        acc.ok_or_else(|| Error::invalid("empty scene has no distance field"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Default scene box: 20×20×8 m with the ground plane half a voxel above the floor.
pub fn default_bounds() -> Aabb {
    Aabb::new([-10.0, -10.0, -1.5], [10.0, 10.0, 6.5])
}

/// Deterministic random scene: a ground plane at `z = 0` plus `n_objects`
/// non-overlapping primitives resting on it.
pub fn generate_scene(seed: u64, n_objects: usize, bounds: Aabb) -> Result<Scene> {
    if !(bounds.min[2] < 0.0 && bounds.max[2] > 0.0) {
        return Err(Error::invalid("scene bounds must straddle the ground plane z = 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = vec![ScenePrimitive::ground(GROUND_ALBEDO)];
    let mut placed: Vec<(Vec3, f64)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < n_objects {
        if attempts >= ATTEMPTS_PER_OBJECT * n_objects.max(1) {
            return Err(Error::Placement {
                requested: n_objects,
                attempts,
            });
        }
        attempts += 1;
        let kind = match rng.random_range(0..3) {
            0 => PrimitiveKind::Sphere {
                radius: rng.random_range(0.5..1.2),
            },
            1 => PrimitiveKind::Box {
                half_extents: [
                    rng.random_range(0.4..1.2),
                    rng.random_range(0.4..1.2),
                    rng.random_range(0.4..1.0),
                ],
            },
            _ => PrimitiveKind::Capsule {
                radius: rng.random_range(0.3..0.7),
                half_height: rng.random_range(0.2..0.8),
            },
        };
        let rest_height = match kind {
            PrimitiveKind::Sphere { radius } => radius,
            PrimitiveKind::Box { half_extents } => half_extents[2],
            PrimitiveKind::Capsule {
                radius,
                half_height,
            } => radius + half_height,
            PrimitiveKind::Plane => unreachable!(),
        };
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        let albedo: Vec3 = std::array::from_fn(|_| rng.random_range(0.05..1.0));
        let probe = ScenePrimitive::new(kind, Pose::identity(), albedo, SemanticLabel::Foreground)?;
        let r = probe.bounding_radius();
        let margin = r + 0.1;
        if bounds.max[0] - bounds.min[0] <= 2.0 * margin
            || bounds.max[1] - bounds.min[1] <= 2.0 * margin
            || bounds.max[2] < rest_height + r
        {
            continue;
        }
        let x = rng.random_range(bounds.min[0] + margin..bounds.max[0] - margin);
        let y = rng.random_range(bounds.min[1] + margin..bounds.max[1] - margin);
        let centre = [x, y, rest_height];
        if x.hypot(y) < SENSOR_CLEARANCE + r {
            continue;
        }
        let overlaps = placed
            .iter()
            .any(|(c, rc)| geom::norm(geom::sub(*c, centre)) < r + rc + 0.2);
        if overlaps {
            continue;
        }
        let pose = Pose {
            rotation: geom::rot_z(yaw),
            translation: centre,
        };
        primitives.push(ScenePrimitive::new(kind, pose, albedo, SemanticLabel::Foreground)?);
        placed.push((centre, r));
    }
    Ok(Scene { primitives, bounds })
}
