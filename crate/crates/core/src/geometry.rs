//! Rotation algebra, interpolation, alignment and projection primitives.

use nalgebra::{Matrix3, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle Rodrigues coefficients switch to their Taylor series.
const RODRIGUES_SERIES_BELOW: f64 = 1e-8;
/// Below this angle coefficient derivatives switch to their Taylor series.
const DERIVATIVE_SERIES_BELOW: f64 = 1e-2;

#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `sin(x)/x` and `(1 - cos(x))/x^2`.
fn rodrigues_coeffs(angle: f64) -> (f64, f64) {
    if angle < RODRIGUES_SERIES_BELOW {
        let a2 = angle * angle;
        (1.0 - a2 / 6.0, 0.5 - a2 / 24.0)
    } else {
        let half = 0.5 * angle;
        (angle.sin() / angle, 2.0 * (half.sin() / angle).powi(2))
    }
}

/// Closed-form Rodrigues map from a rotation vector to a rotation matrix.
pub fn axis_angle_to_matrix(v: &Vec3) -> Mat3 {
    let angle = v.norm();
    let (a, b) = rodrigues_coeffs(angle);
    let k = skew(v);
    Mat3::identity() + k * a + k * k * b
}

/// Partial derivatives `dR/dv_i` of the Rodrigues map, i = 0..3.
pub fn axis_angle_jacobian(v: &Vec3) -> [Mat3; 3] {
    let angle = v.norm();
    let (a, b) = rodrigues_coeffs(angle);
    // (da/dθ)/θ and (db/dθ)/θ
    let (da, db) = if angle < DERIVATIVE_SERIES_BELOW {
        let t2 = angle * angle;
        (
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        let (s, c) = angle.sin_cos();
        let t3 = angle * angle * angle;
        (
            (angle * c - s) / t3,
            (angle * s - 2.0 * (1.0 - c)) / (t3 * angle),
        )
    };
    let k = skew(v);
    let k2 = k * k;
    let mut out = [Mat3::zeros(); 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let e = skew(&Vec3::ith(i, 1.0));
        *slot = e * a + (e * k + k * e) * b + k * (da * v[i]) + k2 * (db * v[i]);
    }
    out
}

/// Pulls a gradient w.r.t. a rotation matrix back onto its rotation vector.
#[inline]
pub fn pull_back_rotation_grad(jac: &[Mat3; 3], d_r: &Mat3) -> Vec3 {
    Vec3::new(
        jac[0].component_mul(d_r).sum(),
        jac[1].component_mul(d_r).sum(),
        jac[2].component_mul(d_r).sum(),
    )
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix (Shepperd's method).
///
/// The branch is chosen by the largest of the trace and the diagonal entries,
/// so at exactly π the axis follows the largest diagonal entry.
pub fn matrix_to_quaternion(m: &Mat3) -> [f64; 4] {
    let tr = m.trace();
    let d = [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
    let mut q = if tr >= d[0] && tr >= d[1] && tr >= d[2] {
        let s = (1.0 + tr).max(0.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if d[0] >= d[1] && d[0] >= d[2] {
        let s = (1.0 + d[0] - d[1] - d[2]).max(0.0).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if d[1] >= d[2] {
        let s = (1.0 + d[1] - d[0] - d[2]).max(0.0).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + d[2] - d[0] - d[1]).max(0.0).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    if q[0] < 0.0 {
        q.iter_mut().for_each(|x| *x = -*x);
    }
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    q.map(|x| x / n)
}

pub fn quaternion_to_matrix(q: [f64; 4]) -> Mat3 {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation vector with angle in `[0, π]`.
pub fn matrix_to_axis_angle(m: &Mat3) -> Vec3 {
    let [w, x, y, z] = matrix_to_quaternion(m);
    let v = Vec3::new(x, y, z);
    let n = v.norm();
    if n < 1e-12 {
        return v * (2.0 / w);
    }
    let angle = 2.0 * n.atan2(w);
    v * (angle / n)
}

/// Inverse right Jacobian of SO(3): `dv = J_r^{-1}(v) dphi` for body-frame increments.
pub fn right_jacobian_inv(v: &Vec3) -> Mat3 {
    let angle = v.norm();
    let c = if angle < DERIVATIVE_SERIES_BELOW {
        let t2 = angle * angle;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let (s, co) = angle.sin_cos();
        1.0 / (angle * angle) - (1.0 + co) / (2.0 * angle * s)
    };
    let k = skew(v);
    Mat3::identity() + k * 0.5 + k * k * c
}

/// Representation-agnostic 3D rotation, stored as an orthonormal matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    pub fn from_axis_angle(v: &Vec3) -> Self {
        Rotation(axis_angle_to_matrix(v))
    }

    pub fn from_quaternion(q: [f64; 4]) -> Self {
        Rotation(quaternion_to_matrix(q))
    }

    /// Accepts a matrix whose orthogonality error `||RᵀR - I||_F` is at most `tol`.
    pub fn from_matrix(m: Mat3, tol: f64) -> Result<Self> {
        let err = orthogonality_error(&m);
        if err > tol || m.determinant() <= 0.0 {
            return Err(Error::Validation(format!(
                "matrix is not a rotation (orthogonality error {err:.3e}, det {:.6})",
                m.determinant()
            )));
        }
        Ok(Rotation(m))
    }

    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn to_axis_angle(&self) -> Vec3 {
        matrix_to_axis_angle(&self.0)
    }

    pub fn to_quaternion(&self) -> [f64; 4] {
        matrix_to_quaternion(&self.0)
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.0 * p
    }

    pub fn angle(&self) -> f64 {
        geodesic_distance(&Rotation::identity(), self)
    }
}

pub fn orthogonality_error(m: &Mat3) -> f64 {
    (m.transpose() * m - Mat3::identity()).norm()
}

/// Nearest rotation in Frobenius norm (polar factor).
pub fn polar_project(m: &Mat3) -> Mat3 {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).scale_mut(-1.0);
        r = u2 * v_t;
    }
    r
}

/// `(sin d, cos d)` of the relative rotation between two matrices.
fn relative_sin_cos(a: &Mat3, b: &Mat3) -> (f64, f64) {
    let m = a.transpose() * b;
    let s = 0.5 * vee(&(m - m.transpose())).norm();
    let c = 0.5 * (m.trace() - 1.0);
    (s, c)
}

/// Angle of `aᵀb` in `[0, π]`.
///
/// Evaluated as `atan2(sin, cos)` which equals `arccos((tr(aᵀb) - 1)/2)` with the
/// argument clamped, but keeps full precision near 0 and π.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    geodesic_distance_mat(&a.0, &b.0)
}

pub fn geodesic_distance_mat(a: &Mat3, b: &Mat3) -> f64 {
    let (s, c) = relative_sin_cos(a, b);
    s.atan2(c.clamp(-1.0, 1.0))
}

/// Squared geodesic distance and its gradients w.r.t. both matrices.
pub fn geodesic_sq_grad(a: &Mat3, b: &Mat3) -> (f64, Mat3, Mat3) {
    let (s, c) = relative_sin_cos(a, b);
    let d = s.atan2(c.clamp(-1.0, 1.0));
    // d(d²)/d tr = -d / sin d
    let ratio = if d < 1e-4 {
        1.0 + d * d / 6.0
    } else {
        d / s.max(1e-12)
    };
    let g = -ratio;
    (d * d, b * g, a * g)
}

/// Geodesic distance and its gradients; the gradient is taken as zero at d = 0.
pub fn geodesic_grad(a: &Mat3, b: &Mat3) -> (f64, Mat3, Mat3) {
    let (s, c) = relative_sin_cos(a, b);
    let d = s.atan2(c.clamp(-1.0, 1.0));
    if d < 1e-12 {
        return (d, Mat3::zeros(), Mat3::zeros());
    }
    let g = -0.5 / s.max(1e-12);
    (d, b * g, a * g)
}

/// Constant-speed shortest-arc interpolation, `t ∈ [0, 1]`.
pub fn slerp(a: &Rotation, b: &Rotation, t: f64) -> Rotation {
    let rel = matrix_to_axis_angle(&(a.0.transpose() * b.0));
    Rotation(a.0 * axis_angle_to_matrix(&(rel * t)))
}

/// Slerp between two rotation vectors, returning a rotation vector.
pub fn slerp_axis_angle(a: &Vec3, b: &Vec3, t: f64) -> Vec3 {
    slerp(&Rotation::from_axis_angle(a), &Rotation::from_axis_angle(b), t).to_axis_angle()
}

/// `dst ≈ scale * rotation * src + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

/// Least-squares similarity (or rigid motion when `with_scale` is false)
/// mapping `src` onto `dst`, reflections excluded.
pub fn umeyama_align(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(Error::InvalidInput(format!(
            "point count mismatch: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("alignment needs at least 3 points, got {n}")));
    }
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vec3>() / nf;
    let mu_d = dst.iter().sum::<Vec3>() / nf;
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_s;
        let dc = d - mu_d;
        cov += dc * sc.transpose();
        var_s += sc.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    if var_s <= f64::EPSILON * (1.0 + mu_s.norm_squared()) {
        return Err(Error::Degenerate("source points have zero variance".into()));
    }
    // Collinear sources leave the spin about their line free; any choice
    // the SVD makes is optimal, so they are accepted.
    let svd = SVD::new(cov, true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let d = svd.singular_values;
    let sign = if (u.determinant() * v_t.determinant()) < 0.0 { -1.0 } else { 1.0 };
    let s_diag = Vec3::new(1.0, 1.0, sign);
    let rotation = u * Mat3::from_diagonal(&s_diag) * v_t;
    let scale = if with_scale {
        d.component_mul(&s_diag).sum() / var_s
    } else {
        1.0
    };
    let translation = mu_d - rotation * mu_s * scale;
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub const DEFAULT_FOCAL: f64 = 1000.0;

    /// Fixed focal length with the principal point at the image center.
    pub fn default_for_image(width: f64, height: f64) -> Self {
        Self {
            fx: Self::DEFAULT_FOCAL,
            fy: Self::DEFAULT_FOCAL,
            cx: 0.5 * width,
            cy: 0.5 * height,
        }
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn unproject(&self, pixel: &Vec2, depth: f64) -> Vec3 {
        Vec3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }
}

/// Perspective projection; `None` when the point is not in front of the camera.
#[inline]
pub fn project_perspective(p: &Vec3, k: &Intrinsics) -> Option<Vec2> {
    if p.z <= 0.0 {
        return None;
    }
    Some(Vec2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Weak-perspective (scaled orthographic) projection.
#[inline]
pub fn project_weak(p: &Vec3, scale: f64, offset: &Vec2) -> Vec2 {
    Vec2::new(scale * p.x + offset.x, scale * p.y + offset.y)
}
