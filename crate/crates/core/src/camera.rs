//! Pinhole camera with world-to-camera extrinsics.

use nalgebra::{Matrix3, Vector3};

pub const NEAR_PLANE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rot: Matrix3<f64>,
    /// World-to-camera translation: x_cam = rot * x_world + trans.
    pub trans: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rot: Matrix3<f64>,
        trans: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        let orth = (rot * rot.transpose() - Matrix3::identity()).norm();
        assert!(orth < 1e-6, "rotation not orthonormal (|RRᵀ-I| = {orth})");
        Camera {
            fx,
            fy,
            cx,
            cy,
            rot,
            trans,
            width,
            height,
        }
    }

    /// Camera placed at `eye` looking at `target`, +y image axis pointing
    /// down as usual for pixel coordinates.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y_deg: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right); // camera +y
        let rot = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let trans = -rot * eye;
        let fy = height as f64 / 2.0 / (fov_y_deg.to_radians() / 2.0).tan();
        Camera::new(
            fy,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rot,
            trans,
            width,
            height,
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        -self.rot.transpose() * self.trans
    }

    /// World-space ray through pixel coordinates (px, py); pixel centers are
    /// at half-integer coordinates.
    pub fn ray(&self, px: f64, py: f64) -> Ray {
        let dir_cam = Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        Ray {
            origin: self.center(),
            dir: (self.rot.transpose() * dir_cam).normalize(),
        }
    }

    /// Projects a world point; `None` when at or behind the near plane.
    /// Returns (pixel x, pixel y, camera-space depth).
    pub fn project(&self, p: Vector3<f64>) -> Option<(f64, f64, f64)> {
        let pc = self.rot * p + self.trans;
        if pc.z <= NEAR_PLANE {
            return None;
        }
        Some((
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
            pc.z,
        ))
    }
}
