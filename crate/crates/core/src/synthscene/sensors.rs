use serde::{Deserialize, Serialize};

use super::primitive::SemanticLabel;
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};

pub const MAX_MARCH_STEPS: usize = 256;
pub const HIT_EPSILON: f64 = 1e-6;
/// Fixed directional light (pointing towards the light) for Lambertian shading.
pub fn light_dir() -> Vec3 {
    geom::normalize([0.4, 0.3, 1.0])
}
const AMBIENT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub point: Vec3,
    pub primitive: usize,
}

/// Sphere-trace `o + t·d` for `t ∈ [0, t_max]`.
pub fn trace_ray(scene: &Scene, o: Vec3, d: Vec3, t_max: f64) -> Option<Hit> {
    let mut t = 0.0;
    for _ in 0..MAX_MARCH_STEPS {
        let p = geom::add(o, geom::scale(d, t));
        let (id, dist) = scene.closest(p)?;
        if dist.abs() < HIT_EPSILON {
            return Some(Hit {
                range: t,
                point: p,
                primitive: id,
            });
        }
        t += dist;
        if t > t_max || t < 0.0 {
            return None;
        }
    }
    None
}

fn trace_in_bounds(scene: &Scene, o: Vec3, d: Vec3) -> Option<Hit> {
    let (_, t_exit) = scene.bounds.ray_interval(o, d)?;
    trace_ray(scene, o, d, t_exit)
}

pub fn luminance(c: Vec3) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

/// LiDAR returns with `3 + d` channels per point and analytic ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub origin: Vec3,
    /// Extra channels `d` per point (intensity stand-in).
    pub extra_channels: usize,
    pub xyz: Vec<Vec3>,
    /// Row-major `len × extra_channels`.
    pub extra: Vec<f64>,
    pub primitive_id: Vec<usize>,
    pub normal: Vec<Vec3>,
    pub curvature: Vec<f64>,
    pub label: Vec<SemanticLabel>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn extra_of(&self, i: usize) -> &[f64] {
        &self.extra[i * self.extra_channels..(i + 1) * self.extra_channels]
    }

    pub fn range(&self, i: usize) -> f64 {
        geom::norm(geom::sub(self.xyz[i], self.origin))
    }

    pub fn direction(&self, i: usize) -> Vec3 {
        geom::normalize(geom::sub(self.xyz[i], self.origin))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub origin: Vec3,
    pub azimuth_steps: usize,
    pub elevation_deg: Vec<f64>,
    /// Rotation of the whole azimuth pattern, degrees.
    #[serde(default)]
    pub azimuth_offset_deg: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        LidarSpec {
            origin: [0.0, 0.0, 1.8],
            azimuth_steps: 64,
            elevation_deg: (0..16).map(|i| -30.0 + 2.0 * i as f64).collect(),
            azimuth_offset_deg: 0.0,
        }
    }
}

pub fn simulate_lidar(scene: &Scene, spec: &LidarSpec) -> PointCloud {
    let mut cloud = PointCloud {
        origin: spec.origin,
        extra_channels: 1,
        xyz: Vec::new(),
        extra: Vec::new(),
        primitive_id: Vec::new(),
        normal: Vec::new(),
        curvature: Vec::new(),
        label: Vec::new(),
    };
    for &elev in &spec.elevation_deg {
        let (se, ce) = elev.to_radians().sin_cos();
        for k in 0..spec.azimuth_steps {
            let az = std::f64::consts::TAU * k as f64 / spec.azimuth_steps as f64
                + spec.azimuth_offset_deg.to_radians();
            let (sa, ca) = az.sin_cos();
            let d = [ce * ca, ce * sa, se];
            let Some(hit) = trace_in_bounds(scene, spec.origin, d) else {
                continue;
            };
            let prim = &scene.primitives[hit.primitive];
            cloud.xyz.push(hit.point);
            cloud.extra.push(luminance(prim.albedo));
            cloud.primitive_id.push(hit.primitive);
            cloud.normal.push(prim.normal(hit.point));
            cloud.curvature.push(prim.surface_curvature(hit.point));
            cloud.label.push(prim.label);
        }
    }
    cloud
}

/// Pinhole intrinsics in pixels; pixel `(u, v)` is column `u`, row `v`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Mat3 {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx > 0.0 && self.fy > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid("focal lengths must be positive"))
        }
    }
}

/// World→camera rigid transform `x_cam = R x_world + t` (camera `z` forward, `y` down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let fwd = geom::normalize(geom::sub(target, eye));
        let right = geom::normalize(geom::cross(fwd, up));
        let down = geom::cross(fwd, right);
        let rotation = [right, down, fwd];
        let translation = geom::scale(geom::mat_vec(&rotation, eye), -1.0);
        CameraPose {
            rotation,
            translation,
        }
    }

    pub fn centre(&self) -> Vec3 {
        geom::scale(geom::mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        geom::add(geom::mat_vec(&self.rotation, p), self.translation)
    }
}

/// 3×4 projection `K·[R|t]` from world (LiDAR) coordinates to homogeneous pixels.
pub type Calibration = [[f64; 4]; 3];

pub fn calibration(k: &Intrinsics, pose: &CameraPose) -> Calibration {
    let km = k.matrix();
    let mut rt = [[0.0; 4]; 3];
    for i in 0..3 {
        rt[i][..3].copy_from_slice(&pose.rotation[i]);
        rt[i][3] = pose.translation[i];
    }
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|m| km[i][m] * rt[m][j]).sum()))
}

/// Pixel coordinates and camera depth of a world point, if in front of the camera.
pub fn project(t: &Calibration, p: Vec3) -> Option<(f64, f64, f64)> {
    let h = [p[0], p[1], p[2], 1.0];
    let x: Vec3 = std::array::from_fn(|i| (0..4).map(|j| t[i][j] * h[j]).sum());
    (x[2] > 1e-9).then(|| (x[0] / x[2], x[1] / x[2], x[2]))
}

/// Sentinel id for sky pixels.
pub const SKY: i64 = -1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major `height × width × 3`, values in `[0, 1]`.
    pub image: Vec<f64>,
    /// Camera-frame `z` depth per pixel; `+∞` where nothing is hit.
    pub depth: Vec<f64>,
    pub primitive_id: Vec<i64>,
    pub intrinsics: Intrinsics,
    pub pose: CameraPose,
    pub calibration: Calibration,
}

impl CameraFrame {
    pub fn pixel_index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn rgb(&self, u: usize, v: usize) -> Vec3 {
        let i = 3 * self.pixel_index(u, v);
        [self.image[i], self.image[i + 1], self.image[i + 2]]
    }

    /// World-space unit ray through pixel coordinates `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let k = &self.intrinsics;
        let dc = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
        let dw = geom::normalize(geom::mat_t_vec(&self.pose.rotation, dc));
        (self.pose.centre(), dw)
    }

    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        project(&self.calibration, p)
    }

    /// Inverse of [`CameraFrame::project`].
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let k = &self.intrinsics;
        let pc = [(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth];
        geom::mat_t_vec(&self.pose.rotation, geom::sub(pc, self.pose.translation))
    }

    /// Nearest pixel of a projected point, when it falls inside the image.
    pub fn nearest_pixel(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (ui, vi) = (u.round(), v.round());
        (ui >= 0.0 && vi >= 0.0 && (ui as usize) < self.width && (vi as usize) < self.height)
            .then(|| (ui as usize, vi as usize))
    }
}

pub fn simulate_camera(
    scene: &Scene,
    pose: CameraPose,
    intrinsics: Intrinsics,
    width: usize,
    height: usize,
) -> Result<CameraFrame> {
    intrinsics.validate()?;
    let mut frame = CameraFrame {
        width,
        height,
        image: vec![0.0; width * height * 3],
        depth: vec![f64::INFINITY; width * height],
        primitive_id: vec![SKY; width * height],
        intrinsics,
        pose,
        calibration: calibration(&intrinsics, &pose),
    };
    let fwd = pose.rotation[2];
    for v in 0..height {
        for u in 0..width {
            let (o, d) = frame.ray(u as f64, v as f64);
            let Some(hit) = trace_in_bounds(scene, o, d) else {
                continue;
            };
            let prim = &scene.primitives[hit.primitive];
            let n = prim.normal(hit.point);
            let shade = AMBIENT + (1.0 - AMBIENT) * geom::dot(n, light_dir()).max(0.0);
            let i = frame.pixel_index(u, v);
            for c in 0..3 {
                frame.image[3 * i + c] = prim.albedo[c] * shade;
            }
            frame.depth[i] = hit.range * geom::dot(d, fwd);
            frame.primitive_id[i] = hit.primitive as i64;
        }
    }
    Ok(frame)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
}

/// Sensor rig: one LiDAR and `N_cam` pinhole cameras sharing the mast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorRig {
    pub lidar: LidarSpec,
    pub cameras: Vec<CameraSpec>,
    pub width: usize,
    pub height: usize,
}

impl Default for SensorRig {
    fn default() -> Self {
        let eye = [0.0, 0.0, 1.6];
        let k = Intrinsics {
            fx: 32.0,
            fy: 32.0,
            cx: 31.5,
            cy: 31.5,
        };
        let cameras = [[6.0, 0.0, 0.3], [-6.0, 0.0, 0.3]]
            .into_iter()
            .map(|target| CameraSpec {
                pose: CameraPose::look_at(eye, target, [0.0, 0.0, 1.0]),
                intrinsics: k,
            })
            .collect();
        SensorRig {
            lidar: LidarSpec::default(),
            cameras,
            width: 64,
            height: 64,
        }
    }
}
