//! SE(3)/SO(3) algebra, pinhole camera model and grid back-projection.
//!
//! Poses are stored as a unit quaternion plus translation. Tangent vectors
//! follow the `[rho(3), phi(3)]` convention (translational part first).
//! All retractions in the optimizers use the right perturbation
//! `T <- T * exp(xi)`.

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

/// Small-angle threshold for the Taylor branches of exp/log.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Cheirality cutoff: points with camera-frame z below this never project.
pub const Z_MIN: f64 = 0.1;
/// Inverse-depth clamp range, 1/meters.
pub const LAMBDA_MIN: f64 = 1e-4;
pub const LAMBDA_MAX: f64 = 1.0 / Z_MIN;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("rotation angle too close to pi for a stable log")]
    AngleNearPi,
    #[error("inverse depth must be positive, got {0}")]
    NonPositiveInverseDepth(f64),
}

/// Rigid transform in SE(3): rotation as unit quaternion, translation in meters.
///
/// The quaternion sign is canonicalized to `w >= 0` so serialization is
/// deterministic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        let mut p = Pose {
            rotation,
            translation,
        };
        p.canonicalize();
        p
    }

    /// Build from raw quaternion components (w, x, y, z); renormalizes.
    pub fn from_parts(qw: f64, qx: f64, qy: f64, qz: f64, t: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Pose::new(q, t)
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        // closed-form conversion: the iterative refinement in nalgebra's
        // `from_matrix` can fail to terminate on degenerate near-rotations
        let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
            *r,
        ));
        Pose::new(q, t)
    }

    fn canonicalize(&mut self) {
        let q = self.rotation.into_inner();
        if q.w < 0.0 {
            self.rotation = UnitQuaternion::new_unchecked(-q);
        }
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose::new(rinv, -(rinv * self.translation))
    }

    /// Apply the transform to a point.
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Right-perturbed retraction `self * exp(xi)`.
    pub fn retract(&self, xi: &Twist) -> Pose {
        self.compose(&se3_exp(xi))
    }

    /// Local coordinates of `other` relative to `self`: `log(self^-1 * other)`.
    pub fn local(&self, other: &Pose) -> Result<Twist, GeomError> {
        se3_log(&self.inverse().compose(other))
    }

    /// Rotation angle in radians, in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Serialized layout: 7 f64 (qw, qx, qy, qz, tx, ty, tz).
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.into_inner();
        let t = self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    /// Inverse of [`Pose::to_array`]. Trusts that the quaternion components
    /// are already normalized (they came from `to_array`), so the round trip
    /// is bit-exact; still re-canonicalizes the sign.
    pub fn from_array(a: &[f64; 7]) -> Self {
        let q = UnitQuaternion::new_unchecked(Quaternion::new(a[0], a[1], a[2], a[3]));
        let mut p = Pose {
            rotation: q,
            translation: Vector3::new(a[4], a[5], a[6]),
        };
        p.canonicalize();
        p
    }

    /// Yaw-only pose on the ground plane.
    pub fn from_pose2d(p: &Pose2D) -> Self {
        Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), p.theta),
            Vector3::new(p.x, p.y, 0.0),
        )
    }
}

/// Tangent vector of SE(3): `rho` translational, `phi` rotational (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            rho: Vector3::zeros(),
            phi: Vector3::zeros(),
        }
    }

    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Twist { rho, phi }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Twist {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        ]
    }

    pub fn norm(&self) -> f64 {
        (self.rho.norm_squared() + self.phi.norm_squared()).sqrt()
    }
}

/// 2D pose on the ground plane; theta wrapped to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2D {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * std::f64::consts::PI);
    if r > std::f64::consts::PI {
        r -= 2.0 * std::f64::consts::PI;
    } else if r <= -std::f64::consts::PI {
        r += 2.0 * std::f64::consts::PI;
    }
    r
}

/// Pinhole camera intrinsics. Width and height must be divisible by 8 so the
/// inverse-depth grid aligns with the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(
            width > 0 && height > 0 && width % 8 == 0 && height % 8 == 0,
            "image dims must be positive and divisible by 8"
        );
        CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn grid_rows(&self) -> usize {
        (self.height / 8) as usize
    }

    pub fn grid_cols(&self) -> usize {
        (self.width / 8) as usize
    }

    /// Pixel center of grid cell (row, col): (8c+4, 8r+4).
    pub fn grid_pixel(&self, row: usize, col: usize) -> Vector2<f64> {
        Vector2::new(8.0 * col as f64 + 4.0, 8.0 * row as f64 + 4.0)
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential map.
pub fn so3_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let angle = phi.norm();
    if angle < SMALL_ANGLE {
        // second-order Taylor of the quaternion exponential
        let half = phi * 0.5;
        let w = 1.0 - half.norm_squared() / 2.0;
        UnitQuaternion::from_quaternion(Quaternion::from_parts(w, half))
    } else {
        UnitQuaternion::from_scaled_axis(*phi)
    }
}

/// SO(3) logarithm; angle assumed below pi (checked by se3_log).
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    q.scaled_axis()
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let s = skew(phi);
    if angle < SMALL_ANGLE {
        Matrix3::identity() + 0.5 * s + s * s / 6.0
    } else {
        let a2 = angle * angle;
        Matrix3::identity() + (1.0 - angle.cos()) / a2 * s + (angle - angle.sin()) / (a2 * angle) * s * s
    }
}

/// Right Jacobian of SO(3): Jr(phi) = Jl(-phi).
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian(&-phi)
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let s = skew(phi);
    if angle < SMALL_ANGLE {
        Matrix3::identity() + 0.5 * s + s * s / 12.0
    } else {
        let coeff = 1.0 / (angle * angle) - (1.0 + angle.cos()) / (2.0 * angle * angle.sin());
        Matrix3::identity() + 0.5 * s + coeff * s * s
    }
}

/// SE(3) exponential map: total on finite input, Taylor branch near zero.
pub fn se3_exp(xi: &Twist) -> Pose {
    let q = so3_exp(&xi.phi);
    let v = so3_left_jacobian(&xi.phi);
    Pose::new(q, v * xi.rho)
}

/// SE(3) logarithm. Fails when the rotation angle is within 1e-6 of pi.
pub fn se3_log(p: &Pose) -> Result<Twist, GeomError> {
    let angle = p.rotation_angle();
    if angle >= std::f64::consts::PI - 1e-6 {
        return Err(GeomError::AngleNearPi);
    }
    let phi = so3_log(&p.rotation);
    let vinv = so3_left_jacobian_inv(&phi);
    Ok(Twist::new(vinv * p.translation, phi))
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let s = skew(phi);
    if angle < SMALL_ANGLE {
        Matrix3::identity() - 0.5 * s + s * s / 12.0
    } else {
        let k = (1.0 / (angle * angle)) * (1.0 - (angle * (1.0 + angle.cos())) / (2.0 * angle.sin()));
        Matrix3::identity() - 0.5 * s + k * s * s
    }
}

/// Project a camera-frame point through the pinhole model.
///
/// `valid` is false when the point is behind the cheirality cutoff or the
/// pixel falls outside the image.
pub fn project(k: &CameraIntrinsics, point_cam: &Vector3<f64>) -> (Vector2<f64>, bool) {
    let z = point_cam.z;
    if z <= Z_MIN {
        return (Vector2::zeros(), false);
    }
    let u = k.fx * point_cam.x / z + k.cx;
    let v = k.fy * point_cam.y / z + k.cy;
    let valid = u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64;
    (Vector2::new(u, v), valid)
}

/// Jacobian of the projected pixel w.r.t. the camera-frame point.
pub fn project_jacobian(k: &CameraIntrinsics, point_cam: &Vector3<f64>) -> Matrix2x3<f64> {
    let z = point_cam.z;
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * point_cam.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * point_cam.y * iz2,
    )
}

/// Back-project a pixel at the given inverse depth into the camera frame.
///
/// The inverse depth is clamped to `[LAMBDA_MIN, LAMBDA_MAX]` before use.
pub fn backproject(
    k: &CameraIntrinsics,
    pixel: &Vector2<f64>,
    inv_depth: f64,
) -> Result<Vector3<f64>, GeomError> {
    if inv_depth <= 0.0 {
        return Err(GeomError::NonPositiveInverseDepth(inv_depth));
    }
    let lam = inv_depth.clamp(LAMBDA_MIN, LAMBDA_MAX);
    let z = 1.0 / lam;
    Ok(Vector3::new(
        (pixel.x - k.cx) / k.fx * z,
        (pixel.y - k.cy) / k.fy * z,
        z,
    ))
}
