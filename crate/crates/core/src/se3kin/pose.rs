use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcgeom::PointSet;

pub type Vec3 = [f64; 3];

/// Rigid transform stored as a unit quaternion `(w, x, y, z)` and a translation
/// in meters. Applying a pose rotates first, then translates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [f64; 4],
    pub translation: Vec3,
}

const RENORM_TOL: f64 = 1e-12;

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub const fn identity() -> Self {
        Pose {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
        }
    }

    /// Builds a pose, normalizing the quaternion. Zero or non-finite input is rejected.
    pub fn new(rotation: [f64; 4], translation: Vec3) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose".into()));
        }
        let n = norm4(&rotation);
        if n < 1e-12 {
            return Err(Error::InvalidArgument("zero quaternion".into()));
        }
        Ok(Pose {
            rotation: rotation.map(|c| c / n),
            translation,
        })
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = norm3(&axis);
        let (s, c) = (0.5 * angle).sin_cos();
        let k = if n > 0.0 { s / n } else { 0.0 };
        Pose {
            rotation: [c, axis[0] * k, axis[1] * k, axis[2] * k],
            translation: [0.0; 3],
        }
    }

    /// Planar pose on the z = `height` plane with yaw about +z.
    pub fn planar(x: f64, y: f64, yaw: f64, height: f64) -> Self {
        let mut p = Self::from_axis_angle([0.0, 0.0, 1.0], yaw);
        p.translation = [x, y, height];
        p
    }

    /// `self ∘ other`: the result applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = normalize_quat(quat_mul(&self.rotation, &other.rotation));
        let rt = self.rotate(&other.translation);
        Pose {
            rotation,
            translation: [
                rt[0] + self.translation[0],
                rt[1] + self.translation[1],
                rt[2] + self.translation[2],
            ],
        }
    }

    pub fn inverse(&self) -> Pose {
        let [w, x, y, z] = self.rotation;
        let conj = Pose {
            rotation: [w, -x, -y, -z],
            translation: [0.0; 3],
        };
        let t = conj.rotate(&self.translation);
        Pose {
            rotation: conj.rotation,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        // v' = v + 2w(u×v) + 2u×(u×v)
        let [w, ux, uy, uz] = self.rotation;
        let u = [ux, uy, uz];
        let c1 = cross(&u, v);
        let c2 = cross(&u, &c1);
        [
            v[0] + 2.0 * (w * c1[0] + c2[0]),
            v[1] + 2.0 * (w * c1[1] + c2[1]),
            v[2] + 2.0 * (w * c1[2] + c2[2]),
        ]
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        let r = self.rotate(p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// Row-major 3×3 rotation matrix.
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.rotation;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Yaw about +z, assuming the rotation is (close to) planar.
    pub fn yaw(&self) -> f64 {
        let [w, x, y, z] = self.rotation;
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }

    pub fn quat_norm(&self) -> f64 {
        norm4(&self.rotation)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
    }

    /// Seven values `(w, x, y, z, tx, ty, tz)`.
    pub fn to_array(&self) -> [f64; 7] {
        let [w, x, y, z] = self.rotation;
        let [a, b, c] = self.translation;
        [w, x, y, z, a, b, c]
    }

    pub fn from_array(v: &[f64; 7]) -> Result<Pose> {
        Pose::new([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6]])
    }
}

/// Applies `pose` to every point; order and length are preserved.
pub fn pose_apply(pose: &Pose, pts: &PointSet) -> Result<PointSet> {
    if !pose.is_finite() {
        return Err(Error::NonFinite("pose".into()));
    }
    pts.check_finite()?;
    Ok(PointSet::from_vec_unchecked(
        pts.points().iter().map(|p| pose.transform_point(p)).collect(),
    ))
}

pub(crate) fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

// Leaves quaternions that are already unit (to rounding) bit-for-bit untouched,
// so composing with the identity is exact.
fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n2 = q.iter().map(|c| c * c).sum::<f64>();
    if (n2 - 1.0).abs() <= RENORM_TOL {
        q
    } else {
        let n = n2.sqrt();
        q.map(|c| c / n)
    }
}

pub(crate) fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn norm4(v: &[f64; 4]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}
