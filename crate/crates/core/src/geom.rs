//! Small fixed-size vector helpers shared by the scene and sensor code.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// `mᵀ v`
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Axis-aligned box in world metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn size(&self) -> Vec3 {
        sub(self.max, self.min)
    }

    pub fn diagonal(&self) -> f64 {
        norm(self.size())
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(other.min) && self.contains(other.max)
    }

    /// Slab test; returns the parametric `[t_enter, t_exit]` of the ray inside the box.
    pub fn ray_interval(&self, o: Vec3, d: Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let (a, b) = ((self.min[i] - o[i]) * inv, (self.max[i] - o[i]) * inv);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 >= t0.max(0.0)).then_some((t0.max(0.0), t1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_box_interval() {
        let b = Aabb::new([-1.0; 3], [1.0; 3]);
        let (t0, t1) = b.ray_interval([-3.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!((t0, t1), (2.0, 4.0));
        let (t0, t1) = b.ray_interval([0.0; 3], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!((t0, t1), (0.0, 1.0));
        assert!(b.ray_interval([0.0, 3.0, 0.0], [1.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn rotation_transpose_inverts() {
        let r = rot_z(0.7);
        let v = [0.3, -1.0, 2.0];
        let back = mat_t_vec(&r, mat_vec(&r, v));
        for i in 0..3 {
            assert!((back[i] - v[i]).abs() < 1e-14);
        }
    }
}
