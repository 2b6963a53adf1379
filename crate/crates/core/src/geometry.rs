//! SO(3)/SE(3) operations used throughout the pipeline.
//!
//! Poses map points from one camera frame into another: `p_b = T_ba * p_a`.
//! Twists are stored translation-first, `[rho, phi]`, where `phi` is an
//! axis-angle rotation vector.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

/// Below this rotation angle the Rodrigues coefficients switch to their
/// Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Rotations closer than this to pi are rejected by [`log_se3`].
pub const LOG_PI_MARGIN: f64 = 1e-6;

/// Orthonormality tolerance for a [`Pose`] built from raw matrices.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {angle} rad is too close to pi for a well-conditioned logarithm")]
    LogNearPi { angle: f64 },
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("rotation is not orthonormal (deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },
}

/// Minimal scalar abstraction so the exponential map can run on plain
/// floats and on forward-mode dual numbers alike.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// Rodrigues coefficients `(A, B, C)` with
/// `A = sin t / t`, `B = (1 - cos t) / t^2`, `C = (t - sin t) / t^3`.
fn rodrigues_coefficients<S: Real>(theta_sq: S) -> (S, S, S) {
    let one = S::from_f64(1.0);
    if theta_sq.value() < SMALL_ANGLE * SMALL_ANGLE {
        let a = one - theta_sq / S::from_f64(6.0);
        let b = S::from_f64(0.5) - theta_sq / S::from_f64(24.0);
        let c = S::from_f64(1.0 / 6.0) - theta_sq / S::from_f64(120.0);
        (a, b, c)
    } else {
        let theta = theta_sq.sqrt();
        let s = theta.sin();
        let half = (theta * S::from_f64(0.5)).sin();
        let a = s / theta;
        let b = S::from_f64(2.0) * half * half / theta_sq;
        // theta - sin(theta) cancels badly for small angles
        let c = if theta_sq.value() < SERIES_ANGLE_SQ {
            horner(theta_sq, &[1.0 / 6.0, -1.0 / 120.0, 1.0 / 5040.0, -1.0 / 362_880.0, 1.0 / 39_916_800.0])
        } else {
            (theta - s) / (theta_sq * theta)
        };
        (a, b, c)
    }
}

/// Below this squared angle, coefficients prone to cancellation use their
/// Taylor series (truncation error below 1e-18).
const SERIES_ANGLE_SQ: f64 = 1e-2;

fn horner<S: Real>(x: S, coeffs: &[f64]) -> S {
    coeffs
        .iter()
        .rev()
        .fold(S::from_f64(0.0), |acc, c| acc * x + S::from_f64(*c))
}

fn hat<S: Real>(w: [S; 3]) -> [[S; 3]; 3] {
    let z = S::from_f64(0.0);
    [[z, -w[2], w[1]], [w[2], z, -w[0]], [-w[1], w[0], z]]
}

fn mat_mul<S: Real>(a: &[[S; 3]; 3], b: &[[S; 3]; 3]) -> [[S; 3]; 3] {
    let z = S::from_f64(0.0);
    let mut out = [[z; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = z;
            for k in 0..3 {
                acc = acc + a[i][k] * b[k][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

/// Exponential map on a raw `[rho, phi]` array, generic over the scalar.
/// Returns the rotation rows and the translation.
pub fn exp_se3_generic<S: Real>(xi: [S; 6]) -> ([[S; 3]; 3], [S; 3]) {
    let rho = [xi[0], xi[1], xi[2]];
    let phi = [xi[3], xi[4], xi[5]];
    let theta_sq = phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2];
    let (a, b, c) = rodrigues_coefficients(theta_sq);
    let k = hat(phi);
    let k2 = mat_mul(&k, &k);
    let one = S::from_f64(1.0);
    let zero = S::from_f64(0.0);
    let mut rot = [[zero; 3]; 3];
    let mut v = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { one } else { zero };
            rot[i][j] = id + a * k[i][j] + b * k2[i][j];
            v[i][j] = id + b * k[i][j] + c * k2[i][j];
        }
    }
    let mut t = [zero; 3];
    for i in 0..3 {
        t[i] = v[i][0] * rho[0] + v[i][1] * rho[1] + v[i][2] * rho[2];
    }
    (rot, t)
}

/// se(3) vector, translation first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub translational: Vector3<f64>,
    pub rotational: Vector3<f64>,
}

impl Twist {
    pub fn new(translational: Vector3<f64>, rotational: Vector3<f64>) -> Self {
        Self {
            translational,
            rotational,
        }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        let t = &self.translational;
        let r = &self.rotational;
        [t.x, t.y, t.z, r.x, r.y, r.z]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.translational, -self.rotational)
    }
}

impl Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist::new(
            self.translational + rhs.translational,
            self.rotational + rhs.rotational,
        )
    }
}

impl Mul<f64> for Twist {
    type Output = Twist;
    fn mul(self, s: f64) -> Twist {
        Twist::new(self.translational * s, self.rotational * s)
    }
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose after checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        let deviation = orthonormal_deviation(&rotation);
        if deviation > ORTHONORMAL_TOL {
            return Err(GeometryError::NotOrthonormal { deviation });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Like [`Pose::new`], but projects rotations that are only roughly
    /// orthonormal (deviation up to `tol`) onto SO(3). Meant for poses
    /// parsed from files written with few significant digits.
    pub fn new_projected(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tol: f64,
    ) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        let deviation = orthonormal_deviation(&rotation);
        if deviation <= ORTHONORMAL_TOL {
            return Ok(Self {
                rotation,
                translation,
            });
        }
        if deviation > tol {
            return Err(GeometryError::NotOrthonormal { deviation });
        }
        let svd = rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Ok(Self {
            rotation: r,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about a unit axis by `angle` radians, no translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        exp_se3(&Twist::new(Vector3::zeros(), axis.normalize() * angle))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn with_translation(&self, t: Vector3<f64>) -> Self {
        Self {
            rotation: self.rotation,
            translation: t,
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major upper 3x4 block of the homogeneous matrix.
    pub fn to_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_rows(v: &[f64; 12]) -> Result<Pose, GeometryError> {
        let (r, t) = split_rows(v);
        Pose::new(r, t)
    }

    pub fn from_rows_projected(v: &[f64; 12], tol: f64) -> Result<Pose, GeometryError> {
        let (r, t) = split_rows(v);
        Pose::new_projected(r, t, tol)
    }

    /// Frobenius distance between homogeneous matrices.
    pub fn distance(&self, other: &Pose) -> f64 {
        (self.to_homogeneous() - other.to_homogeneous()).norm()
    }
}

fn split_rows(v: &[f64; 12]) -> (Matrix3<f64>, Vector3<f64>) {
    let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let t = Vector3::new(v[3], v[7], v[11]);
    (r, t)
}

fn orthonormal_deviation(r: &Matrix3<f64>) -> f64 {
    let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    orth.max(det)
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = self.to_rows();
        for (i, v) in rows.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{v:.16e}")?;
        }
        Ok(())
    }
}

pub fn exp_se3(twist: &Twist) -> Pose {
    let (r, t) = exp_se3_generic(twist.to_array());
    Pose {
        rotation: Matrix3::from_fn(|i, j| r[i][j]),
        translation: Vector3::new(t[0], t[1], t[2]),
    }
}

fn vee_skew(r: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) * 0.5
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = vee_skew(r).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Rotation vector of `r`. Fails close to pi, where the axis extracted
/// from the skew part loses precision.
pub fn log_so3(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let theta = rotation_angle(r);
    if theta >= std::f64::consts::PI - LOG_PI_MARGIN {
        return Err(GeometryError::LogNearPi { angle: theta });
    }
    let w = vee_skew(r);
    if theta < SMALL_ANGLE {
        return Ok(w);
    }
    Ok(w * (theta / theta.sin()))
}

pub fn log_se3(pose: &Pose) -> Result<Twist, GeometryError> {
    let phi = log_so3(&pose.rotation)?;
    let theta_sq = phi.norm_squared();
    let k = phi.cross_matrix();
    // V^-1 = I - K/2 + d * K^2 with d = (1 - A / (2B)) / theta^2
    let d = if theta_sq < SERIES_ANGLE_SQ {
        horner(theta_sq, &[1.0 / 12.0, 1.0 / 720.0, 1.0 / 30_240.0, 1.0 / 1_209_600.0, 1.0 / 47_900_160.0])
    } else {
        let theta = theta_sq.sqrt();
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta_sq;
        (1.0 - a / (2.0 * b)) / theta_sq
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * d;
    Ok(Twist::new(v_inv * pose.translation, phi))
}

/// Applies a correction on the left of a VO estimate.
pub fn apply_correction(correction: &Pose, vo: &Pose) -> Pose {
    correction.compose(vo)
}

/// Geodesic rotation angle of the pose, in `[0, pi]`.
pub fn rotation_magnitude(pose: &Pose) -> f64 {
    rotation_angle(&pose.rotation)
}
