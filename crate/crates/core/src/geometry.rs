//! Small fixed-size geometry helpers: rigid poses, pinhole intrinsics,
//! axis-aligned boxes and voxel keys.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
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
    let n = norm(a);
    if n == 0.0 {
        a
    } else {
        scale(a, 1.0 / n)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Intrinsics for a horizontal field of view with square pixels and a centered principal point.
    pub fn from_hfov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Intrinsics { fx, fy: fx, cx: 0.5 * width as f64, cy: 0.5 * height as f64 }
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn from_matrix(k: &[[f64; 3]; 3]) -> Self {
        Intrinsics { fx: k[0][0], fy: k[1][1], cx: k[0][2], cy: k[1][2] }
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    pub fn project(&self, pc: Vec3) -> (f64, f64) {
        (self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy)
    }

    /// Camera-frame ray direction (z = 1) through continuous pixel coordinates.
    pub fn unproject_dir(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Rigid camera-to-world transform. Camera axes follow the x-right, y-down,
/// z-forward convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Camera at `eye` looking at `target`, with `up` as the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let right = cross(forward, up);
        if norm(right) < 1e-9 || norm(forward) < 1e-9 {
            return Err(Error::Config("look_at: view direction parallel to up".into()));
        }
        let right = normalize(right);
        let down = cross(forward, right);
        let mut rotation = [[0.0; 3]; 3];
        for r in 0..3 {
            rotation[r] = [right[r], down[r], forward[r]];
        }
        Ok(Pose { rotation, translation: eye })
    }

    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for r in 0..3 {
            rotation[r] = [m[r][0], m[r][1], m[r][2]];
        }
        Pose { rotation, translation: [m[0][3], m[1][3], m[2][3]] }
    }

    pub fn camera_to_world(&self, pc: Vec3) -> Vec3 {
        add(self.rotate(pc), self.translation)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [dot(r[0], v), dot(r[1], v), dot(r[2], v)]
    }

    /// World-to-camera transform through the transposed rotation.
    pub fn world_to_camera(&self, pw: Vec3) -> Vec3 {
        let d = sub(pw, self.translation);
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        dot(r[0], cross(r[1], r[2]))
    }

    /// Largest deviation of RᵀR from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let col_dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((col_dot - target).abs());
            }
        }
        worst
    }
}

/// Axis-aligned 3D box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Tight box around `points`, grown by `pad` on every side. `None` for no points.
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>, pad: f64) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = Aabb { min: first, max: first };
        for p in it {
            b.include(*p);
        }
        for a in 0..3 {
            b.min[a] -= pad;
            b.max[a] += pad;
        }
        Some(b)
    }

    pub fn include(&mut self, p: Vec3) {
        for a in 0..3 {
            self.min[a] = self.min[a].min(p[a]);
            self.max[a] = self.max[a].max(p[a]);
        }
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| (self.max[a] - self.min[a]).max(0.0)).product()
    }

    /// Intersection over union of volumes. Two degenerate (zero-volume) boxes
    /// score 1 when identical and 0 otherwise.
    pub fn iou(&self, other: &Aabb) -> f64 {
        let inter: f64 = (0..3)
            .map(|a| (self.max[a].min(other.max[a]) - self.min[a].max(other.min[a])).max(0.0))
            .product();
        let union = self.volume() + other.volume() - inter;
        if union <= 0.0 {
            return if self == other { 1.0 } else { 0.0 };
        }
        inter / union
    }
}

/// Integer voxel coordinate at resolution `voxel`.
pub fn voxel_key(p: Vec3, voxel: f64) -> [i64; 3] {
    [
        (p[0] / voxel).floor() as i64,
        (p[1] / voxel).floor() as i64,
        (p[2] / voxel).floor() as i64,
    ]
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_is_right_handed_and_round_trips() {
        let pose = Pose::look_at([1.0, 2.0, 1.5], [3.0, -1.0, 0.5], [0.0, 0.0, 1.0]).unwrap();
        assert!((pose.determinant() - 1.0).abs() < 1e-12);
        assert!(pose.orthonormality_error() < 1e-12);
        let p = [0.3, -0.7, 2.0];
        let back = pose.world_to_camera(pose.camera_to_world(p));
        for a in 0..3 {
            assert!((back[a] - p[a]).abs() < 1e-12);
        }
        let ahead = pose.world_to_camera([3.0, -1.0, 0.5]);
        assert!(ahead[0].abs() < 1e-12 && ahead[1].abs() < 1e-12 && ahead[2] > 0.0);
    }

    #[test]
    fn camera_y_points_down() {
        let pose = Pose::look_at([0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 0.0, 1.0]).unwrap();
        let below = pose.world_to_camera([1.0, 0.0, 0.0]);
        assert!(below[1] > 0.0);
    }

    #[test]
    fn aabb_iou_cases() {
        let a = Aabb { min: [0.0; 3], max: [1.0; 3] };
        let b = Aabb { min: [0.5, 0.0, 0.0], max: [1.5, 1.0, 1.0] };
        assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        assert!((a.iou(&b) - 0.5 / 1.5).abs() < 1e-12);
        let far = Aabb { min: [5.0; 3], max: [6.0; 3] };
        assert_eq!(a.iou(&far), 0.0);
        let point = Aabb { min: [1.0; 3], max: [1.0; 3] };
        assert_eq!(point.iou(&point), 1.0);
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[2.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
