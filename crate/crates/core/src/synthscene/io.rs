//! Plain-file exports: ASCII PLY clouds, binary PPM images, CSV ground truth.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::sensors::{CameraFrame, PointCloud};
use crate::error::{Error, Result};
use crate::geom::Vec3;

/// ASCII PLY with `x y z` and the extra channels; optional per-point colour.
pub fn write_ply(path: &Path, cloud: &PointCloud, colors: Option<&[Vec3]>) -> Result<()> {
    if let Some(c) = colors {
        if c.len() != cloud.len() {
            return Err(Error::invalid("colour count does not match point count"));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property double {axis}")?;
    }
    for c in 0..cloud.extra_channels {
        let name = if c == 0 { "intensity".to_string() } else { format!("extra{c}") };
        writeln!(w, "property double {name}")?;
    }
    if colors.is_some() {
        for ch in ["red", "green", "blue"] {
            writeln!(w, "property uchar {ch}")?;
        }
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        let p = cloud.xyz[i];
        write!(w, "{} {} {}", p[0], p[1], p[2])?;
        for e in cloud.extra_of(i) {
            write!(w, " {e}")?;
        }
        if let Some(c) = colors {
            let q = c[i].map(to_byte);
            write!(w, " {} {} {}", q[0], q[1], q[2])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn to_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6) of an RGB buffer in `[0,1]`.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::invalid("image buffer does not match extents"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = rgb.iter().map(|&x| to_byte(x)).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn write_frame_ppm(path: &Path, frame: &CameraFrame) -> Result<()> {
    write_ppm(path, frame.width, frame.height, &frame.image)
}

/// Per-point ground truth: position, range, primitive, label, normal, curvature.
pub fn write_cloud_csv(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "x", "y", "z", "range", "primitive", "label", "nx", "ny", "nz", "curvature",
    ])?;
    for i in 0..cloud.len() {
        let p = cloud.xyz[i];
        let n = cloud.normal[i];
        w.write_record([
            p[0].to_string(),
            p[1].to_string(),
            p[2].to_string(),
            cloud.range(i).to_string(),
            cloud.primitive_id[i].to_string(),
            format!("{:?}", cloud.label[i]).to_lowercase(),
            n[0].to_string(),
            n[1].to_string(),
            n[2].to_string(),
            cloud.curvature[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-pixel ground truth: depth (`inf` for sky) and primitive id (`-1` for sky).
pub fn write_frame_csv(path: &Path, frame: &CameraFrame) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["u", "v", "depth", "primitive"])?;
    for v in 0..frame.height {
        for u in 0..frame.width {
            let i = frame.pixel_index(u, v);
            w.write_record([
                u.to_string(),
                v.to_string(),
                frame.depth[i].to_string(),
                frame.primitive_id[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Blue → red ramp over `[lo, hi]`.
pub fn heat_color(x: f64, lo: f64, hi: f64) -> Vec3 {
    let t = if hi > lo { ((x - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    [t, 0.0, 1.0 - t]
}

/// Distinct colour per category index.
pub fn palette(i: usize) -> Vec3 {
    let h = (i as f64 * 0.618_033_988_75).fract();
    let k = |n: f64| {
        let x = (n + h * 6.0) % 6.0;
        1.0 - (x.min(4.0 - x).clamp(0.0, 1.0))
    };
    [k(5.0), k(3.0), k(1.0)]
}
