//! Fixed-size 3D helpers: 3×3 matrices, quaternions, axis-angle rotations.

use crate::error::{Result, TensorError};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn normalize3(a: Vec3) -> Option<Vec3> {
    let n = norm3(a);
    (n > 0.0 && n.is_finite()).then(|| scale3(a, 1.0 / n))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat_from_slice(s: &[f64]) -> Mat3 {
    [[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], s[8]]]
}

pub fn mat_to_array(m: &Mat3) -> [f64; 9] {
    [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
}

/// Rotation by `angle` radians about the unit `axis` (Rodrigues).
pub fn axis_angle_matrix(axis_angle: Vec3) -> Mat3 {
    let theta = norm3(axis_angle);
    if theta < 1e-12 {
        // First-order expansion, exact enough at this magnitude.
        let [x, y, z] = axis_angle;
        return [[1.0, -z, y], [z, 1.0, -x], [-y, x, 1.0]];
    }
    let [x, y, z] = scale3(axis_angle, 1.0 / theta);
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Rotation quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(TensorError::Invalid(format!("cannot normalize quaternion {self:?}")));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let axis = normalize3(axis)
            .ok_or_else(|| TensorError::Invalid("zero rotation axis".into()))?;
        let (s, c) = (0.5 * angle).sin_cos();
        Ok(Self::new(c, axis[0] * s, axis[1] * s, axis[2] * s))
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn to_rotation_matrix(self) -> Result<Mat3> {
        Ok(unit_quat_matrix(self.normalized()?.to_array()))
    }
}

/// Normalizes `q` and converts it to a rotation matrix.
pub fn quat_to_rotmat(q: [f64; 4]) -> Result<Mat3> {
    Quaternion::from_array(q).to_rotation_matrix()
}

/// Rotation matrix of an already unit-norm quaternion.
pub fn unit_quat_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Pulls a matrix adjoint back through [`unit_quat_matrix`] and the
/// normalization `q / |q|`, returning the adjoint of the raw quaternion.
pub fn quat_matrix_vjp(raw: [f64; 4], grad_r: &Mat3) -> [f64; 4] {
    let n = (raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let [w, x, y, z] = raw.map(|v| v / n);
    let g = grad_r;
    let dw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let dx = 2.0
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2]
            + z * g[2][0]
            + w * g[2][1]
            - 2.0 * x * g[2][2]);
    let dy = 2.0
        * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0]
            + z * g[2][1]
            - 2.0 * y * g[2][2]);
    let dz = 2.0
        * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    let unit = [w, x, y, z];
    let du = [dw, dx, dy, dz];
    let proj: f64 = unit.iter().zip(&du).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|i| (du[i] - unit[i] * proj) / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_quaternion() {
        assert_eq!(quat_to_rotmat([1.0, 0.0, 0.0, 0.0]).unwrap(), IDENTITY3);
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = quat_to_rotmat([h, 0.0, 0.0, h]).unwrap();
        let want = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - want[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        assert!(quat_to_rotmat([0.0; 4]).is_err());
    }

    #[test]
    fn axis_angle_matches_quaternion() {
        let aa = [0.3, -0.7, 0.2];
        let angle = norm3(aa);
        let q = Quaternion::from_axis_angle(aa, angle).unwrap();
        let a = axis_angle_matrix(aa);
        let b = q.to_rotation_matrix().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - b[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn quat_vjp_matches_finite_differences() {
        let raw = [0.9, -0.3, 0.4, 0.2];
        let g = [[0.3, -1.0, 0.5], [0.7, 0.2, -0.4], [-0.6, 0.1, 0.9]];
        let f = |q: [f64; 4]| {
            let r = quat_to_rotmat(q).unwrap();
            (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| r[i][j] * g[i][j]).sum::<f64>()
        };
        let analytic = quat_matrix_vjp(raw, &g);
        for k in 0..4 {
            let h = 1e-6;
            let mut p = raw;
            let mut m = raw;
            p[k] += h;
            m[k] -= h;
            let numeric = (f(p) - f(m)) / (2.0 * h);
            assert!((numeric - analytic[k]).abs() < 1e-8, "{k}: {numeric} vs {}", analytic[k]);
        }
    }
}
