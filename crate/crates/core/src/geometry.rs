//! Rigid transforms and the pinhole camera model shared by every stage.
//!
//! Conventions:
//! - [`Pose`] maps world coordinates into the camera frame, `p_cam = R * p_world + t`.
//! - The camera looks along `+z`, `x` points right and `y` points down in the image.
//! - Pixel `(i, j)` covers `[i, i + 1) x [j, j + 1)`; its center sits at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;

/// Points closer than this to the image plane are treated as behind the camera.
pub const Z_MIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quaternion norm {norm} deviates from 1 by more than {tolerance}")]
    NonUnitQuaternion { norm: f64, tolerance: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Continuous image coordinates in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    /// Integer cell containing this location.
    pub fn cell(&self) -> (i64, i64) {
        (self.u.floor() as i64, self.v.floor() as i64)
    }
}

/// SE(3) transform from world to camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::from_parts(UnitQuaternion::identity(), translation)
    }

    /// Builds a pose from a `(w, x, y, z)` quaternion, rejecting quaternions whose
    /// norm is further than `tolerance` from one. Accepted quaternions are normalized.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3], tolerance: f64) -> Result<Self, GeometryError> {
        if q.iter().chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if (norm - 1.0).abs() > tolerance {
            return Err(GeometryError::NonUnitQuaternion { norm, tolerance });
        }
        Ok(Self {
            rotation: UnitQuaternion::new_normalize(quat),
            translation: Vec3::new(t[0], t[1], t[2]),
        })
    }

    /// Rebuilds a stored pose without renormalizing, so a pose written with
    /// [`Pose::wxyz`] reloads bit for bit. The quaternion must already be unit
    /// to within 1e-9.
    pub fn from_wxyz_exact(q: [f64; 4], t: [f64; 3]) -> Result<Self, GeometryError> {
        if q.iter().chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NonUnitQuaternion { norm, tolerance: 1e-9 });
        }
        Ok(Self {
            rotation: UnitQuaternion::new_unchecked(quat),
            translation: Vec3::new(t[0], t[1], t[2]),
        })
    }

    /// Camera placed at `eye` looking at `target`, with `up` projecting to image-up.
    pub fn look_at(eye: &Point3, target: &Point3, up: &Vec3) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(up);
        if right.norm() < 1e-9 {
            // Looking straight along `up`; any perpendicular works.
            right = forward.cross(&Vec3::new(1.0, 0.0, 0.0));
            if right.norm() < 1e-9 {
                right = forward.cross(&Vec3::new(0.0, 1.0, 0.0));
            }
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        // Rows of the world->camera rotation are the camera axes expressed in world.
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&r);
        let translation = -(rotation * eye.coords);
        Self::from_parts(rotation, translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Quaternion as `[w, x, y, z]`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn transform(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::from_parts(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::from_parts(inv, -(inv * self.translation))
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Point3 {
        Point3::from(-(self.rotation.inverse() * self.translation))
    }

    /// World-frame direction of the optical axis, `R^T (0, 0, 1)`.
    pub fn viewing_direction(&self) -> Vec3 {
        (self.rotation.inverse() * Vec3::z()).normalize()
    }
}

/// Angle of a unit quaternion's rotation in radians, accurate near zero.
pub fn rotation_angle(q: &UnitQuaternion<f64>) -> f64 {
    let q = q.quaternion();
    2.0 * q.vector().norm().atan2(q.w.abs())
}

/// Translation error in meters (between camera centers) and rotation error in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub translation_m: f64,
    pub rotation_deg: f64,
}

pub fn pose_error(estimate: &Pose, truth: &Pose) -> PoseError {
    let translation_m = (estimate.center() - truth.center()).norm();
    let relative = estimate.rotation() * truth.rotation().inverse();
    PoseError {
        translation_m,
        rotation_deg: rotation_angle(&relative).to_degrees(),
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    q: [f64; 4],
    t: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            q: self.wxyz(),
            t: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(deserializer)?;
        Pose::from_wxyz(repr.q, repr.t, 1e-3).map_err(serde::de::Error::custom)
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("intrinsics"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("image size must be positive".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Projects a camera-frame point. `None` means the point is behind the camera
    /// (depth at or below [`Z_MIN`]); the pixel may still fall outside the image.
    pub fn project(&self, p: &Point3) -> Option<Pixel> {
        if p.z <= Z_MIN {
            return None;
        }
        Some(Pixel {
            u: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
        })
    }

    /// Camera-frame point at depth `z` along the ray through `px`.
    pub fn backproject(&self, px: &Pixel, z: f64) -> Point3 {
        Point3::new((px.u - self.cx) / self.fx * z, (px.v - self.cy) / self.fy * z, z)
    }

    /// Unit-norm bearing of the ray through `px`.
    pub fn bearing(&self, px: &Pixel) -> Vec3 {
        self.backproject(px, 1.0).coords.normalize()
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// World point to pixel through a posed camera.
pub fn project_world(pose: &Pose, intr: &CameraIntrinsics, p: &Point3) -> Option<Pixel> {
    intr.project(&pose.transform(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn intr100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn random_pose(axis: [f64; 3], angle: f64, t: [f64; 3]) -> Pose {
        let axis = Vec3::new(axis[0], axis[1], axis[2]);
        let rot = if axis.norm() < 1e-6 {
            UnitQuaternion::identity()
        } else {
            UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
        };
        Pose::from_parts(rot, Vec3::new(t[0], t[1], t[2]))
    }

    #[test]
    fn transform_examples() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform(&p), p);

        let shift = Pose::from_translation(Vec3::new(0.0, 0.0, -5.0));
        assert_eq!(shift.transform(&Point3::new(0.0, 0.0, 5.0)), Point3::origin());

        let rot = Pose::from_wxyz([FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2], [0.0; 3], 1e-9).unwrap();
        let out = rot.transform(&Point3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(out, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn project_examples() {
        let intr = intr100();
        assert_eq!(intr.project(&Point3::new(0.0, 0.0, 1.0)), Some(Pixel::new(50.0, 50.0)));
        assert_eq!(intr.project(&Point3::new(1.0, 0.0, 2.0)), Some(Pixel::new(100.0, 50.0)));
        assert_eq!(intr.project(&Point3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(intr.project(&Point3::new(0.0, 0.0, 1e-7)), None);
    }

    #[test]
    fn viewing_direction_examples() {
        assert_relative_eq!(Pose::identity().viewing_direction(), Vec3::z(), epsilon = 1e-12);
        let flip = random_pose([0.0, 1.0, 0.0], std::f64::consts::PI, [0.0; 3]);
        assert_relative_eq!(flip.viewing_direction(), -Vec3::z(), epsilon = 1e-12);

        // Oracle: explicit rotation matrix about x, transpose applied to the optical axis.
        let a = std::f64::consts::FRAC_PI_2;
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, a.cos(), -a.sin(), 0.0, a.sin(), a.cos());
        let expected = rx.transpose() * Vec3::z();
        let pose = random_pose([1.0, 0.0, 0.0], a, [0.3, -0.2, 0.1]);
        let dir = pose.viewing_direction();
        assert!(dir.dot(&Vec3::z()).abs() < 1e-9);
        assert_relative_eq!(dir, expected, epsilon = 1e-12);
        assert_relative_eq!(dir.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pose_error_examples() {
        let id = Pose::identity();
        assert_eq!(pose_error(&id, &id), PoseError { translation_m: 0.0, rotation_deg: 0.0 });

        let moved = Pose::from_translation(Vec3::new(0.1, 0.0, 0.0));
        let e = pose_error(&moved, &id);
        assert_relative_eq!(e.translation_m, 0.1, epsilon = 1e-12);
        assert_eq!(e.rotation_deg, 0.0);

        let turned = random_pose([0.0, 0.0, 1.0], 1f64.to_radians(), [0.0; 3]);
        let e = pose_error(&turned, &id);
        assert!(e.translation_m < 1e-12);
        assert_relative_eq!(e.rotation_deg, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let eye = Point3::new(1.0, 2.0, 1.5);
        let target = Point3::new(4.0, 6.0, 1.0);
        let pose = Pose::look_at(&eye, &target, &Vec3::z());
        assert_relative_eq!(pose.center(), eye, epsilon = 1e-12);
        let in_cam = pose.transform(&target);
        assert!(in_cam.x.abs() < 1e-12 && in_cam.y.abs() < 1e-12 && in_cam.z > 0.0);
        // World up maps to image up (negative camera y).
        let above = pose.transform(&(target + Vec3::z()));
        assert!(above.y < 0.0);
    }

    #[test]
    fn rejects_bad_intrinsics_and_quaternions() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 10.0, 1.0, 10, 10).is_err());
        assert!(Pose::from_wxyz([0.5, 0.0, 0.0, 0.0], [0.0; 3], 1e-3).is_err());
    }

    #[test]
    fn pose_serde_round_trip() {
        let pose = random_pose([0.2, -0.4, 1.0], 0.7, [1.0, -2.0, 0.5]);
        let json = serde_json::to_string(&pose).unwrap();
        let back: Pose = serde_json::from_str(&json).unwrap();
        assert_relative_eq!(back.transform(&Point3::new(1.0, 2.0, 3.0)), pose.transform(&Point3::new(1.0, 2.0, 3.0)), epsilon = 1e-12);
    }

    prop_compose! {
        fn arb_pose()(ax in prop::array::uniform3(-1.0f64..1.0), angle in -3.1f64..3.1, t in prop::array::uniform3(-10.0f64..10.0)) -> Pose {
            random_pose(ax, angle, t)
        }
    }

    proptest! {
        #[test]
        fn compose_inverse_is_identity(p in arb_pose()) {
            let id = p.compose(&p.inverse());
            prop_assert!(rotation_angle(id.rotation()) < 1e-9);
            prop_assert!(id.translation().norm() < 1e-9);
            prop_assert!((id.rotation().quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            let e = pose_error(&left, &right);
            prop_assert!(e.translation_m < 1e-9);
            prop_assert!(e.rotation_deg.to_radians() < 1e-9);
        }

        #[test]
        fn backprojection_round_trip(u in 0.0f64..640.0, v in 0.0f64..480.0, depth in 0.1f64..100.0) {
            let intr = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap();
            let px = Pixel::new(u, v);
            let back = intr.project(&intr.backproject(&px, depth)).unwrap();
            prop_assert!(back.distance(&px) < 1e-6);
        }

        #[test]
        fn rotation_error_is_symmetric(a in arb_pose(), b in arb_pose()) {
            let ab = pose_error(&a, &b).rotation_deg;
            let ba = pose_error(&b, &a).rotation_deg;
            prop_assert!((ab - ba).abs().to_radians() < 1e-9);
        }
    }
}
