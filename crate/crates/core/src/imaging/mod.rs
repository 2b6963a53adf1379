//! Dense rasters, the pinhole camera model and image-level utilities.
//!
//! All rasters are row-major with channels last: the value of channel `c`
//! at pixel `(x, y)` lives at `(y * width + x) * channels + c`.

mod camera;
mod flow;
pub mod io;
pub(crate) mod sample;

pub use camera::{backproject, project, Intrinsics, MIN_PROJECTION_DEPTH};
pub use flow::{compute_flow, FlowProvider, PrecomputedFlow, PyramidFlow};
pub use sample::{
    bilinear_sample, bilinear_sample_into, image_gradient, preprocess, resize_bilinear, unwhiten,
    whiten, ChannelStats,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image too small for {op}: {height}x{width}")]
    Degenerate {
        op: &'static str,
        height: usize,
        width: usize,
    },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("point at depth {0} is behind the camera or too close to project")]
    BehindCamera(f64),
    #[error("channel {channel} has zero standard deviation")]
    ZeroStd { channel: usize },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("malformed {format} data: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ImagingError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        ImagingError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Real-valued image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImagingError> {
        if channels != 1 && channels != 3 {
            return Err(ImagingError::DimensionMismatch(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(ImagingError::DimensionMismatch(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::Format {
                format: "image",
                reason: "non-finite intensity".into(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Builds an image from `f(x, y, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Channel mean, as a single-channel image.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let c = self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / c)
            .collect();
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Channel-first copy of the data, as consumed by the network.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * n + i] = *v;
            }
        }
        out
    }

    pub fn from_planar(
        height: usize,
        width: usize,
        channels: usize,
        planar: &[f64],
    ) -> Result<Self, ImagingError> {
        let n = height * width;
        if planar.len() != n * channels {
            return Err(ImagingError::DimensionMismatch(format!(
                "planar buffer of {} values for {height}x{width}x{channels}",
                planar.len()
            )));
        }
        let mut data = vec![0.0; n * channels];
        for c in 0..channels {
            for i in 0..n {
                data[i * channels + c] = planar[c * n + i];
            }
        }
        ImageBuffer::new(height, width, channels, data)
    }
}

/// Per-pixel metric depth; every entry is strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImagingError> {
        if data.len() != height * width {
            return Err(ImagingError::DimensionMismatch(format!(
                "{height}x{width} depth map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(d) = data.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(ImagingError::NonPositiveDepth(*d));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self, ImagingError> {
        Self::new(height, width, vec![depth; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Dense displacement field; `(dx, dy)` pairs in row-major order, such that
/// a source pixel `u` is found at `u + flow(u)` in the target image.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImagingError> {
        if data.len() != 2 * height * width {
            return Err(ImagingError::DimensionMismatch(format!(
                "{height}x{width} flow needs {} values, got {}",
                2 * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::Format {
                format: "flow",
                reason: "non-finite displacement".into(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 2 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    /// Channel-first `[dx plane, dy plane]`, each entry clipped to `±clip`.
    pub fn to_planar_clipped(&self, clip: f64) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            out[i] = (self.data[2 * i] as f64).clamp(-clip, clip);
            out[n + i] = (self.data[2 * i + 1] as f64).clamp(-clip, clip);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(ImageBuffer::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageBuffer::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(DepthMap::new(1, 2, vec![1.0, 0.0]).is_err());
        assert!(FlowField::new(1, 1, vec![0.0]).is_err());
    }

    #[test]
    fn planar_round_trip() {
        let img = ImageBuffer::from_fn(3, 4, 3, |x, y, c| (x + 10 * y + 100 * c) as f64);
        let planar = img.to_planar();
        assert_eq!(planar[12], 100.0);
        assert_eq!(ImageBuffer::from_planar(3, 4, 3, &planar).unwrap(), img);
    }
}
