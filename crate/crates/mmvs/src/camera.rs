//! Pinhole camera model and the plain-text camera file format.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{MvsError, Result};

/// Pinhole camera with world-to-camera extrinsics.
#[derive(Clone, Debug)]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        let cam = Camera {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(MvsError::shape(
                "intrinsics must be upper-triangular with positive focal entries",
            ));
        }
        let rtr = self.rotation.transpose() * self.rotation;
        if (rtr - Matrix3::identity()).norm() > 1e-6 {
            return Err(MvsError::shape("rotation is not orthonormal"));
        }
        if (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(MvsError::shape("rotation determinant must be +1"));
        }
        Ok(())
    }

    /// Camera looking from `eye` toward `target`, y-down image convention.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up_hint: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up_hint).normalize();
        let down = forward.cross(&right).normalize();
        // Rows of R are the camera axes expressed in world coordinates.
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -rotation * eye;
        let intrinsics = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Camera {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    /// Projects a world point: returns `(pixel, depth)`. A non-positive
    /// depth means the point is behind the camera.
    pub fn project(&self, x: Vector3<f64>) -> ([f64; 2], f64) {
        let v = self.intrinsics * (self.rotation * x + self.translation);
        ([v[0] / v[2], v[1] / v[2]], v[2])
    }

    /// Exact inverse of [`Camera::project`] for `depth > 0`.
    pub fn backproject(&self, pixel: [f64; 2], depth: f64) -> Result<Vector3<f64>> {
        if depth <= 0.0 {
            return Err(MvsError::Numerical(format!(
                "backproject requires positive depth, got {depth}"
            )));
        }
        let k_inv = self
            .intrinsics
            .try_inverse()
            .ok_or_else(|| MvsError::Numerical("singular intrinsics".into()))?;
        let ray = k_inv * Vector3::new(pixel[0], pixel[1], 1.0);
        Ok(self.rotation.transpose() * (ray * depth - self.translation))
    }

    /// Camera for images downscaled by an integer factor: intrinsics divide,
    /// extrinsics are unchanged.
    pub fn scaled(&self, factor: usize) -> Camera {
        let f = factor as f64;
        let mut k = self.intrinsics / f;
        k[(2, 2)] = 1.0;
        Camera {
            intrinsics: k,
            rotation: self.rotation,
            translation: self.translation,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    /// Plain-text form: 3x3 intrinsics row-major, 3x4 [R|t] row-major, then
    /// a "depth_min depth_max" line.
    pub fn to_text(&self, depth_min: f64, depth_max: f64) -> String {
        let mut s = String::new();
        for r in 0..3 {
            for c in 0..3 {
                let _ = write!(s, "{} ", self.intrinsics[(r, c)]);
            }
            s.push('\n');
        }
        for r in 0..3 {
            for c in 0..3 {
                let _ = write!(s, "{} ", self.rotation[(r, c)]);
            }
            let _ = writeln!(s, "{}", self.translation[r]);
        }
        let _ = writeln!(s, "{depth_min} {depth_max}");
        s
    }

    /// Sets the image size, which the text format does not carry (it comes
    /// from the image files alongside the camera).
    pub fn with_size(mut self, width: usize, height: usize) -> Camera {
        self.width = width;
        self.height = height;
        self
    }

    pub fn from_text(text: &str) -> Result<(Camera, f64, f64)> {
        let nums: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| MvsError::Format(format!("bad camera token: {t}")))
            })
            .collect::<Result<_>>()?;
        if nums.len() != 23 {
            return Err(MvsError::Format(format!(
                "camera file needs 23 numbers, got {}",
                nums.len()
            )));
        }
        let k = Matrix3::from_row_slice(&nums[0..9]);
        let mut r = Matrix3::zeros();
        let mut t = Vector3::zeros();
        for row in 0..3 {
            for col in 0..3 {
                r[(row, col)] = nums[9 + row * 4 + col];
            }
            t[row] = nums[9 + row * 4 + 3];
        }
        let depth_min = nums[21];
        let depth_max = nums[22];
        let cam = Camera::new(k, r, t, 0, 0)?;
        Ok((cam, depth_min, depth_max))
    }

    pub fn save(&self, path: impl AsRef<Path>, depth_min: f64, depth_max: f64) -> Result<()> {
        std::fs::write(path, self.to_text(depth_min, depth_max))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Camera, f64, f64)> {
        let text = std::fs::read_to_string(path)?;
        Camera::from_text(&text)
    }
}
