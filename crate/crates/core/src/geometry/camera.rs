use nalgebra::{Matrix2x3, Matrix3, Vector2};

use super::Ray;
use crate::{Error, Result, Vec3};
#[allow(unused_imports)]
use num_traits::Float;

/// Pinhole camera. Pixel `(0, 0)` is the top-left corner of the image and the
/// optical axis passes through `(width / 2, height / 2)`. Pixels are square;
/// `vertical_fov` spans the image height.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    position: Vec3,
    look_at: Vec3,
    up: Vec3,
    vertical_fov: f64,
    width: usize,
    height: usize,
    // world -> camera rows: right, up, forward
    basis: Matrix3<f64>,
    focal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    InFront { pixel: Vector2<f64>, depth: f64 },
    Behind,
}

impl Projection {
    pub fn pixel(&self) -> Option<Vector2<f64>> {
        match self {
            Projection::InFront { pixel, .. } => Some(*pixel),
            Projection::Behind => None,
        }
    }
}

impl Camera {
    pub fn new(
        position: Vec3,
        look_at: Vec3,
        up: Vec3,
        vertical_fov: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(vertical_fov > 0.0 && vertical_fov < core::f64::consts::PI) {
            return Err(Error::InvalidCamera("vertical field of view must lie in (0, pi)"));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("resolution must be positive"));
        }
        let view = look_at - position;
        if view.norm() < 1e-12 {
            return Err(Error::InvalidCamera("look_at coincides with position"));
        }
        let forward = view.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 * up.norm().max(1e-300) || up.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up vector is parallel to the view direction"));
        }
        let right = right.normalize();
        let true_up = right.cross(&forward);
        let basis = Matrix3::from_rows(&[right.transpose(), true_up.transpose(), forward.transpose()]);
        let focal = (height as f64 / 2.0) / (vertical_fov / 2.0).tan();
        Ok(Self {
            position,
            look_at,
            up: up.normalize(),
            vertical_fov,
            width,
            height,
            basis,
            focal,
        })
    }

    /// Camera on a sphere around the origin, z-up. Azimuth is measured from +x
    /// toward +y, elevation from the xy-plane.
    pub fn orbit(
        azimuth: f64,
        elevation: f64,
        distance: f64,
        vertical_fov: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (se, ce) = elevation.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        let position = Vec3::new(ce * ca, ce * sa, se) * distance;
        Self::new(position, Vec3::zeros(), Vec3::z(), vertical_fov, width, height)
    }

    pub fn position(&self) -> Vec3 {
        self.position
    }

    pub fn look_at(&self) -> Vec3 {
        self.look_at
    }

    pub fn up(&self) -> Vec3 {
        self.up
    }

    pub fn vertical_fov(&self) -> f64 {
        self.vertical_fov
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        self.focal
    }

    /// Same pose and field of view at another resolution.
    pub fn with_resolution(&self, width: usize, height: usize) -> Result<Self> {
        Self::new(self.position, self.look_at, self.up, self.vertical_fov, width, height)
    }

    /// Rows are the camera's right, up and forward axes in world coordinates.
    pub fn world_to_camera(&self) -> &Matrix3<f64> {
        &self.basis
    }

    /// Camera-to-world pose as a row-major 4x4 matrix (columns: right, up,
    /// backward, position).
    pub fn pose_matrix(&self) -> [[f64; 4]; 4] {
        let r = self.basis.row(0);
        let u = self.basis.row(1);
        let f = self.basis.row(2);
        let p = self.position;
        [
            [r[0], u[0], -f[0], p.x],
            [r[1], u[1], -f[1], p.y],
            [r[2], u[2], -f[2], p.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Angle of the relative rotation between two camera orientations.
    pub fn rotation_distance(&self, other: &Camera) -> f64 {
        let rel = self.basis * other.basis.transpose();
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Ray through continuous pixel coordinates.
    pub fn ray(&self, px: f64, py: f64) -> Ray {
        let x = (px - self.width as f64 / 2.0) / self.focal;
        let y = -(py - self.height as f64 / 2.0) / self.focal;
        let dir = self.basis.transpose() * Vec3::new(x, y, 1.0);
        Ray::new(self.position, dir).expect("camera rays are never degenerate")
    }

    /// Ray through the center of integer pixel `(i, j)`.
    pub fn pixel_ray(&self, i: usize, j: usize) -> Ray {
        self.ray(i as f64 + 0.5, j as f64 + 0.5)
    }

    pub fn project(&self, point: &Vec3) -> Projection {
        let c = self.basis * (point - self.position);
        if c.z <= 0.0 {
            return Projection::Behind;
        }
        Projection::InFront {
            pixel: Vector2::new(
                self.width as f64 / 2.0 + self.focal * c.x / c.z,
                self.height as f64 / 2.0 - self.focal * c.y / c.z,
            ),
            depth: c.z,
        }
    }

    /// Projection plus its Jacobian with respect to the world point.
    pub fn project_with_jacobian(&self, point: &Vec3) -> Option<(Vector2<f64>, Matrix2x3<f64>)> {
        let c = self.basis * (point - self.position);
        if c.z <= 0.0 {
            return None;
        }
        let inv = 1.0 / c.z;
        let pixel = Vector2::new(
            self.width as f64 / 2.0 + self.focal * c.x * inv,
            self.height as f64 / 2.0 - self.focal * c.y * inv,
        );
        let d_cam = Matrix2x3::new(
            self.focal * inv,
            0.0,
            -self.focal * c.x * inv * inv,
            0.0,
            -self.focal * inv,
            self.focal * c.y * inv * inv,
        );
        Some((pixel, d_cam * self.basis))
    }
}
