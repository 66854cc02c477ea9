//! Rigid poses, the pinhole camera and pose-error metrics.
//!
//! Poses map world coordinates into the camera frame: `x_cam = R * x_world + t`.
//! Cameras use the usual computer-vision axes (x right, y down, z forward) and
//! pixel centers sit at integer coordinates.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// World "up" direction. Horizontal motion keeps this coordinate fixed.
pub const WORLD_UP: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

const ORTHO_DRIFT_TOL: f64 = 1e-12;
const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point lies behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("malformed pose string: {0}")]
    MalformedPose(String),
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
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

    /// Builds a pose from a rotation and translation. The rotation is
    /// projected back onto SO(3) if it drifted.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: orthonormalize_if_drifted(rotation),
            translation,
        }
    }

    /// Pose of a camera located at `center` whose world-to-camera rotation is `rotation`.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        let rotation = orthonormalize_if_drifted(rotation);
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    /// Level camera (no pitch/roll) at `center` looking along world heading
    /// `yaw` (radians, measured from +x towards +y), tilted by `pitch` radians
    /// (positive looks up).
    pub fn level(center: Vector3<f64>, yaw: f64, pitch: f64) -> Self {
        let forward = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self::from_center(rotation, center)
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis expressed in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Left-multiplies by the rigid motion `(exp(omega), v)`.
    pub fn perturbed(&self, omega: &Vector3<f64>, v: &Vector3<f64>) -> Pose {
        let r = Rotation3::new(*omega).into_inner();
        Pose::new(r * self.rotation, r * self.translation + v)
    }

    /// Rotates the camera about the world vertical through its own center.
    pub fn yawed(&self, angle: f64) -> Pose {
        let rz = Rotation3::from_axis_angle(&nalgebra::Vector3::z_axis(), angle).into_inner();
        // camera-to-world rotation is Rᵀ, so the new world-to-camera rotation is R·Rzᵀ
        Pose::from_center(self.rotation * rz.transpose(), self.center())
    }

    /// `‖RᵀR − I‖_F`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    /// Twelve whitespace-separated numbers: row-major rotation, then translation.
    pub fn to_text(&self) -> String {
        let r = &self.rotation;
        let t = &self.translation;
        let vals = [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ];
        // `{:?}` on f64 prints the shortest representation that parses back exactly
        vals.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
    }

    pub fn parse_text(s: &str) -> Result<Pose, GeometryError> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| GeometryError::MalformedPose(format!("bad number {tok:?}")))
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != 12 {
            return Err(GeometryError::MalformedPose(format!(
                "expected 12 numbers, got {}",
                vals.len()
            )));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::MalformedPose("non-finite value".into()));
        }
        let rotation = Matrix3::from_row_slice(&vals[..9]);
        let translation = Vector3::new(vals[9], vals[10], vals[11]);
        let pose = Pose {
            rotation,
            translation,
        };
        if pose.orthonormality_error() > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(GeometryError::MalformedPose("rotation is not orthonormal".into()));
        }
        Ok(pose)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl FromStr for Pose {
    type Err = GeometryError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pose::parse_text(s)
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_text())
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Pose::parse_text(&s).map_err(serde::de::Error::custom)
    }
}

fn orthonormalize_if_drifted(r: Matrix3<f64>) -> Matrix3<f64> {
    let drift = (r.transpose() * r - Matrix3::identity()).norm();
    if drift <= ORTHO_DRIFT_TOL {
        return r;
    }
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut out = u * v_t;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * v_t;
    }
    out
}

/// Pinhole intrinsics with image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Whether a continuous pixel position rounds to a pixel inside the image.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= -0.5 && pixel.y >= -0.5 && pixel.x < self.width as f64 - 0.5 && pixel.y < self.height as f64 - 0.5
    }

    /// Pixel in the camera frame (no pose).
    pub fn project_camera(&self, xc: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if xc.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera(xc.z));
        }
        Ok(Vector2::new(
            self.fx * xc.x / xc.z + self.cx,
            self.fy * xc.y / xc.z + self.cy,
        ))
    }

    /// Ray direction in the camera frame with unit z component.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }
}

/// Projects a world point. Returns the pixel and the camera-frame depth.
/// The pixel may fall outside the image.
pub fn project(k: &Intrinsics, pose: &Pose, x: &Vector3<f64>) -> Result<(Vector2<f64>, f64), GeometryError> {
    let xc = pose.transform_point(x);
    let px = k.project_camera(&xc)?;
    Ok((px, xc.z))
}

/// Lifts a pixel at a given camera-frame depth back into the world.
pub fn backproject(k: &Intrinsics, pose: &Pose, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let xc = k.ray(pixel) * depth;
    Ok(pose.rotation.transpose() * (xc - pose.translation))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Distance between camera centers, meters.
    pub translation_error: f64,
    /// Angle of the relative rotation, degrees.
    pub rotation_error: f64,
}

impl PoseError {
    pub const INFINITE: PoseError = PoseError {
        translation_error: f64::INFINITY,
        rotation_error: f64::INFINITY,
    };

    pub fn within(&self, meters: f64, degrees: f64) -> bool {
        self.translation_error <= meters && self.rotation_error <= degrees
    }
}

pub fn pose_error(est: &Pose, gt: &Pose) -> PoseError {
    let translation_error = (est.center() - gt.center()).norm();
    let rotation_error = rotation_angle(&est.rotation, &gt.rotation).to_degrees();
    PoseError {
        translation_error,
        rotation_error,
    }
}

/// Angle between two rotations in radians.
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    // atan2 of the skew and trace parts stays accurate near 0 and π where acos does not
    let r = a.transpose() * b;
    let cos = (r.trace() - 1.0) / 2.0;
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    s.atan2(cos)
}
