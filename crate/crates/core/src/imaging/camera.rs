use nalgebra::{Vector2, Vector3};

use super::ImagingError;

/// Points closer than this (metres, along the optical axis) do not project.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-6;

/// Pinhole intrinsics for an image of `height` x `width` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    pub height: usize,
    pub width: usize,
}

impl Intrinsics {
    pub fn new(
        fu: f64,
        fv: f64,
        cu: f64,
        cv: f64,
        height: usize,
        width: usize,
    ) -> Result<Self, ImagingError> {
        let k = Self {
            fu,
            fv,
            cu,
            cv,
            height,
            width,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        if !(self.fu > 0.0 && self.fv > 0.0 && self.fu.is_finite() && self.fv.is_finite()) {
            return Err(ImagingError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fu, self.fv
            )));
        }
        if !(self.cu >= 0.0 && self.cu < self.width as f64) {
            return Err(ImagingError::InvalidIntrinsics(format!(
                "c_u = {} outside [0, {})",
                self.cu, self.width
            )));
        }
        if !(self.cv >= 0.0 && self.cv < self.height as f64) {
            return Err(ImagingError::InvalidIntrinsics(format!(
                "c_v = {} outside [0, {})",
                self.cv, self.height
            )));
        }
        Ok(())
    }

    /// Symmetric camera with the given horizontal field of view.
    pub fn from_fov(height: usize, width: usize, hfov_rad: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * hfov_rad).tan();
        Self {
            fu: f,
            fv: f,
            cu: 0.5 * (width as f64 - 1.0),
            cv: 0.5 * (height as f64 - 1.0),
            height,
            width,
        }
    }

    /// Intrinsics after resizing the image to `height` x `width`, with pixel
    /// centres aligned the same way as the bilinear resize.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fu: self.fu * sx,
            fv: self.fv * sy,
            cu: (self.cu + 0.5) * sx - 0.5,
            cv: (self.cv + 0.5) * sy - 0.5,
            height,
            width,
        }
    }
}

/// 3D point seen at pixel `u` with the given depth.
pub fn backproject(u: Vector2<f64>, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>, ImagingError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(ImagingError::NonPositiveDepth(depth));
    }
    Ok(Vector3::new(
        depth * (u.x - k.cu) / k.fu,
        depth * (u.y - k.cv) / k.fv,
        depth,
    ))
}

pub fn project(p: Vector3<f64>, k: &Intrinsics) -> Result<Vector2<f64>, ImagingError> {
    if !(p.z > MIN_PROJECTION_DEPTH) {
        return Err(ImagingError::BehindCamera(p.z));
    }
    Ok(Vector2::new(
        k.fu * p.x / p.z + k.cu,
        k.fv * p.y / p.z + k.cv,
    ))
}
