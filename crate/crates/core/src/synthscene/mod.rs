//! Procedural scenes with exact distance fields and simulated sensors.

mod io;
mod primitive;
mod scene;
mod sensors;

pub use io::{
    heat_color, palette, write_cloud_csv, write_frame_csv, write_frame_ppm, write_ply, write_ppm,
};
pub use primitive::{Pose, PrimitiveKind, ScenePrimitive, SemanticLabel};
pub use scene::{default_bounds, generate_scene, Scene, GROUND_ALBEDO};
pub use sensors::{
    calibration, light_dir, luminance, project, simulate_camera, simulate_lidar, trace_ray,
    Calibration, CameraFrame, CameraPose, CameraSpec, Hit, Intrinsics, LidarSpec, PointCloud,
    SensorRig, HIT_EPSILON, MAX_MARCH_STEPS, SKY,
};

use std::path::Path;

use crate::error::Result;
use crate::geom::Aabb;

/// A scene together with its paired sensor readings.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub seed: u64,
    pub scene: Scene,
    pub cloud: PointCloud,
    pub frames: Vec<CameraFrame>,
}

impl SceneSample {
    pub fn capture(seed: u64, scene: Scene, rig: &SensorRig) -> Result<Self> {
        let cloud = simulate_lidar(&scene, &rig.lidar);
        let frames = rig
            .cameras
            .iter()
            .map(|c| simulate_camera(&scene, c.pose, c.intrinsics, rig.width, rig.height))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneSample {
            seed,
            scene,
            cloud,
            frames,
        })
    }

    pub fn generate(seed: u64, n_objects: usize, bounds: Aabb, rig: &SensorRig) -> Result<Self> {
        let scene = generate_scene(seed, n_objects, bounds)?;
        Self::capture(seed, scene, rig)
    }

    /// `scene.json`, `cloud.ply`, `cloud_gt.csv`, `calib.json`, and per camera `camN.ppm` + `camN_gt.csv`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("scene.json"), self.scene.to_json()?)?;
        write_ply(&dir.join("cloud.ply"), &self.cloud, None)?;
        write_cloud_csv(&dir.join("cloud_gt.csv"), &self.cloud)?;
        let calib: Vec<Calibration> = self.frames.iter().map(|f| f.calibration).collect();
        std::fs::write(dir.join("calib.json"), serde_json::to_string_pretty(&calib)?)?;
        for (n, f) in self.frames.iter().enumerate() {
            write_frame_ppm(&dir.join(format!("cam{n}.ppm")), f)?;
            write_frame_csv(&dir.join(format!("cam{n}_gt.csv")), f)?;
        }
        Ok(())
    }
}
