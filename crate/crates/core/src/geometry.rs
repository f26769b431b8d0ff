//! Circular-orbit CT acquisition geometry approximated by pinhole cameras.
//!
//! Frame convention (frozen, every test pins it):
//!
//! * World origin is the isocenter. World `+z` is the patient superior axis and
//!   the rotation axis of the orbit.
//! * The camera sits at the X-ray source, `source_to_isocenter` from the origin,
//!   at `(R cos θ, R sin θ, 0)` for view angle `θ`.
//! * Camera frame: `+z_cam` is the viewing direction (toward the isocenter),
//!   `+x_cam` is increasing image `u`, `+y_cam` is increasing image `v` (image
//!   rows go down). World `+z` therefore maps to decreasing `v`.
//! * Pixel `(i, j)` has its center at `(u, v) = (i + 0.5, j + 0.5)`; the
//!   principal point is `(W/2, H/2)`.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar CT scan parameters, in world units (millimetres by convention).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub source_to_isocenter: f64,
    pub source_to_detector: f64,
    pub detector_width: f64,
    pub detector_height: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub n_views: usize,
    pub angular_start_deg: f64,
    pub angular_step_deg: f64,
    pub fov_side: f64,
}

impl Default for ScanGeometry {
    fn default() -> Self {
        Self {
            source_to_isocenter: 1000.0,
            source_to_detector: 1500.0,
            detector_width: 300.0,
            detector_height: 300.0,
            image_width: 128,
            image_height: 128,
            n_views: 360,
            angular_start_deg: 0.0,
            angular_step_deg: 1.0,
            fov_side: 200.0,
        }
    }
}

impl ScanGeometry {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("source_to_isocenter", self.source_to_isocenter),
            ("source_to_detector", self.source_to_detector),
            ("detector_width", self.detector_width),
            ("detector_height", self.detector_height),
            ("fov_side", self.fov_side),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.source_to_detector <= self.source_to_isocenter {
            return Err(Error::invalid(
                "source_to_detector must exceed source_to_isocenter",
            ));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        if self.n_views == 0 {
            return Err(Error::invalid("n_views must be at least 1"));
        }
        if !self.angular_start_deg.is_finite() || !self.angular_step_deg.is_finite() {
            return Err(Error::invalid("angles must be finite"));
        }
        if self.n_views > 1 && self.angular_step_deg == 0.0 {
            return Err(Error::invalid("angular_step_deg must be non-zero"));
        }
        if self.n_views as f64 * self.angular_step_deg.abs() > 360.0 + 1e-9 {
            return Err(Error::invalid(format!(
                "{} views at {} deg exceed a full orbit",
                self.n_views, self.angular_step_deg
            )));
        }
        Ok(())
    }

    /// Angle of view `k` in degrees.
    pub fn view_angle(&self, k: usize) -> f64 {
        self.angular_start_deg + k as f64 * self.angular_step_deg
    }

    pub fn fx(&self) -> f64 {
        self.source_to_detector * self.image_width as f64 / self.detector_width
    }

    pub fn fy(&self) -> f64 {
        self.source_to_detector * self.image_height as f64 / self.detector_height
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.image_width, self.image_height)
    }
}

/// A pinhole camera placed at the X-ray source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// World-to-camera rotation. Rows are the camera axes in world coordinates.
    pub rotation: Matrix3<f64>,
    pub camera_center: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub view_angle_deg: f64,
    /// Points with camera depth at or below this are not projectable.
    pub near: f64,
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, depth: f64 },
    /// At or behind the near plane.
    NotProjectable,
}

impl CameraPose {
    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (x - self.camera_center)
    }

    /// Viewing direction in world coordinates.
    pub fn principal_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// Unit world-space direction of the ray through image point `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let dir_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * dir_cam).normalize()
    }

    pub fn project(&self, x_cam: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * x_cam.x / x_cam.z + self.cx,
            self.fy * x_cam.y / x_cam.z + self.cy,
        )
    }
}

/// Camera pose at an arbitrary orbit angle.
pub fn pose_at_angle(geom: &ScanGeometry, angle_deg: f64) -> CameraPose {
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let radius = geom.source_to_isocenter;
    let center = Vector3::new(radius * cos, radius * sin, 0.0);
    let forward = Vector3::new(-cos, -sin, 0.0);
    let down = Vector3::new(0.0, 0.0, -1.0);
    let right = down.cross(&forward);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    CameraPose {
        rotation,
        camera_center: center,
        fx: geom.fx(),
        fy: geom.fy(),
        cx: geom.image_width as f64 / 2.0,
        cy: geom.image_height as f64 / 2.0,
        view_angle_deg: angle_deg,
        near: 1e-4 * radius,
    }
}

/// One pose per view of the orbit.
pub fn orbit_poses(geom: &ScanGeometry) -> Result<Vec<CameraPose>> {
    geom.validate()?;
    Ok((0..geom.n_views)
        .map(|k| pose_at_angle(geom, geom.view_angle(k)))
        .collect())
}

pub fn project_point(pose: &CameraPose, x: &Vector3<f64>) -> Projection {
    let xc = pose.world_to_camera(x);
    if xc.z <= pose.near {
        return Projection::NotProjectable;
    }
    let uv = pose.project(&xc);
    Projection::Visible {
        u: uv.x,
        v: uv.y,
        depth: xc.z,
    }
}

/// Jacobian of `(u, v)` with respect to the camera-space point.
pub fn projection_jacobian(pose: &CameraPose, x_cam: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
    if x_cam.z <= pose.near {
        return Err(Error::invalid(format!(
            "camera depth {} is at or behind the near plane",
            x_cam.z
        )));
    }
    Ok(jacobian_unchecked(pose.fx, pose.fy, x_cam))
}

#[inline]
pub(crate) fn jacobian_unchecked(fx: f64, fy: f64, x_cam: &Vector3<f64>) -> Matrix2x3<f64> {
    let inv_z = 1.0 / x_cam.z;
    let inv_z2 = inv_z * inv_z;
    Matrix2x3::new(
        fx * inv_z,
        0.0,
        -fx * x_cam.x * inv_z2,
        0.0,
        fy * inv_z,
        -fy * x_cam.y * inv_z2,
    )
}
