//! Rigid transforms and the pinhole camera.
//!
//! Camera frame convention: X right, Y down, Z forward. The default sensor
//! frame is x forward, y left, z up, so the default extrinsic maps
//! `(x, y, z) -> (-y, -z, x)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Points closer than this to the image plane (camera Z) are not projected.
pub const Z_MIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a transform, rejecting rotations that are not proper
    /// orthonormal matrices (to 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if orth > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("extrinsic rotation is not orthonormal".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("extrinsic translation is not finite".into()));
        }
        Ok(Self { rotation, translation })
    }

    /// Rotation about the vertical (z) axis by `yaw` radians.
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Sensor (x forward, y left, z up) to camera (X right, Y down, Z forward)
    /// with both origins coincident.
    pub fn sensor_to_camera() -> Self {
        Self {
            rotation: Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            translation: Vector3::zeros(),
        }
    }

    /// From 12 numbers, row-major `[R | t]`.
    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::DimensionMismatch { expected: 12, actual: v.len() });
        }
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::new(r, Vector3::new(v[3], v[7], v[11]))
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }
}

pub fn transform_points(points: &[Vector3<f64>], t: &RigidTransform) -> Vec<Vector3<f64>> {
    points.iter().map(|p| t.apply(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Sensor frame to camera frame.
    pub extrinsic: RigidTransform,
}

impl Default for CameraModel {
    /// 1280x720 forward camera, 1000 px focal length, mounted at the LiDAR origin.
    fn default() -> Self {
        Self {
            fx: 1000.0,
            fy: 1000.0,
            cx: 640.0,
            cy: 360.0,
            width: 1280,
            height: 720,
            extrinsic: RigidTransform::sensor_to_camera(),
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("camera intrinsics out of range".into()))
        }
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Pinhole projection of a camera-frame point, without bounds checks.
    pub fn project_camera(&self, pc: &Vector3<f64>) -> Option<(f64, f64)> {
        if pc.z <= Z_MIN {
            return None;
        }
        Some((self.cx + self.fx * pc.x / pc.z, self.cy + self.fy * pc.y / pc.z))
    }

    /// Unit-free viewing ray of pixel `(u, v)` in the sensor frame, and the
    /// camera center in the sensor frame.
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let inv = self.extrinsic.inverse();
        let dir_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (inv.translation, inv.rotation * dir_cam)
    }

    /// Intersection of the pixel's ray with the horizontal plane `z = ground_z`
    /// (sensor frame), if it lies in front of the camera.
    pub fn back_project_to_ground(&self, u: f64, v: f64, ground_z: f64) -> Option<Vector3<f64>> {
        let (origin, dir) = self.pixel_ray(u, v);
        if dir.z.abs() < 1e-12 {
            return None;
        }
        let t = (ground_z - origin.z) / dir.z;
        if t <= 0.0 {
            return None;
        }
        Some(origin + dir * t)
    }
}

/// Projects a sensor-frame point to pixel coordinates; `None` when the point
/// is behind the near plane or falls outside the image.
pub fn project_point(p: &Vector3<f64>, cam: &CameraModel) -> Option<(f64, f64)> {
    let pc = cam.extrinsic.apply(p);
    let (u, v) = cam.project_camera(&pc)?;
    cam.in_bounds(u, v).then_some((u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
        (a - b).abs().max() < tol
    }

    #[test]
    fn identity_and_translation() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(transform_points(&[p], &RigidTransform::identity())[0], p);
        let t = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(transform_points(&[Vector3::zeros()], &t)[0], Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn yaw_quarter_turn() {
        let t = RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2);
        let q = transform_points(&[Vector3::new(1.0, 0.0, 0.0)], &t)[0];
        assert!(close(&q, &Vector3::new(0.0, 1.0, 0.0), 1e-12));
    }

    #[test]
    fn pinhole_worked_example() {
        let cam = CameraModel { extrinsic: RigidTransform::identity(), ..Default::default() };
        let (u, v) = project_point(&Vector3::new(0.0, 1.5, 10.0), &cam).unwrap();
        assert!((u - 640.0).abs() < 1e-12 && (v - 510.0).abs() < 1e-12);
        assert_eq!(project_point(&Vector3::new(0.0, 0.0, 5.0), &cam), Some((640.0, 360.0)));
        assert_eq!(project_point(&Vector3::new(0.0, 0.0, -1.0), &cam), None);
    }

    #[test]
    fn default_extrinsic_maps_ground_ahead() {
        let cam = CameraModel::default();
        let (u, v) = project_point(&Vector3::new(10.0, 0.0, -1.5), &cam).unwrap();
        assert!((u - 640.0).abs() < 1e-12 && (v - 510.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_orthonormal() {
        let mut v = RigidTransform::identity().to_row_major();
        v[0] = 1.1;
        assert!(RigidTransform::from_row_major(&v).is_err());
    }

    proptest! {
        #[test]
        fn inverse_round_trip(yaw in -3.0f64..3.0, tx in -10.0f64..10.0, ty in -10.0f64..10.0,
                              px in -50.0f64..50.0, py in -50.0f64..50.0, pz in -5.0f64..5.0) {
            let mut t = RigidTransform::from_yaw(yaw);
            t.translation = Vector3::new(tx, ty, 0.5);
            let p = Vector3::new(px, py, pz);
            let back = transform_points(&transform_points(&[p], &t), &t.inverse())[0];
            prop_assert!(close(&back, &p, 1e-9));
        }

        #[test]
        fn ground_back_projection(x in 2.0f64..80.0, y in -10.0f64..10.0) {
            let cam = CameraModel::default();
            let p = Vector3::new(x, y, -1.5);
            if let Some((u, v)) = project_point(&p, &cam) {
                let q = cam.back_project_to_ground(u, v, -1.5).unwrap();
                prop_assert!(close(&q, &p, 1e-6));
            }
        }
    }
}
