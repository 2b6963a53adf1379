use super::{ImageBuffer, ImagingError};

/// Interpolation cell for continuous coordinates `(x, y)`: the top-left
/// corner, the neighbour indices and the fractional offsets. `None` when
/// the point lies outside `[0, width-1] x [0, height-1]`.
///
/// On the last row/column the cell degenerates so that lattice points are
/// reproduced exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Cell {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
}

#[inline]
pub(crate) fn cell(width: usize, height: usize, x: f64, y: f64) -> Option<Cell> {
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    if !(x >= 0.0 && x <= wmax && y >= 0.0 && y <= hmax) {
        return None;
    }
    let mut x0 = x.floor() as usize;
    let mut y0 = y.floor() as usize;
    // keep the cell inside the image on the far border; derivatives there
    // come from the left/upper cell
    if x0 + 1 >= width && width > 1 {
        x0 = width - 2;
    }
    if y0 + 1 >= height && height > 1 {
        y0 = height - 2;
    }
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Some(Cell {
        x0,
        y0,
        x1,
        y1,
        fx: x - x0 as f64,
        fy: y - y0 as f64,
    })
}

/// Samples every channel at `(x, y)` into `out`. Returns the validity flag;
/// on invalid samples `out` is zeroed.
pub fn bilinear_sample_into(img: &ImageBuffer, x: f64, y: f64, out: &mut [f64]) -> bool {
    let ch = img.channels();
    match cell(img.width(), img.height(), x, y) {
        None => {
            out[..ch].iter_mut().for_each(|v| *v = 0.0);
            false
        }
        Some(c) => {
            let (w00, w10) = ((1.0 - c.fx) * (1.0 - c.fy), c.fx * (1.0 - c.fy));
            let (w01, w11) = ((1.0 - c.fx) * c.fy, c.fx * c.fy);
            for (k, o) in out[..ch].iter_mut().enumerate() {
                *o = w00 * img.get(c.x0, c.y0, k)
                    + w10 * img.get(c.x1, c.y0, k)
                    + w01 * img.get(c.x0, c.y1, k)
                    + w11 * img.get(c.x1, c.y1, k);
            }
            true
        }
    }
}

/// Bilinear interpolation at continuous pixel coordinates `(x, y)`.
pub fn bilinear_sample(img: &ImageBuffer, x: f64, y: f64) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; img.channels()];
    let valid = bilinear_sample_into(img, x, y, &mut out);
    (out, valid)
}

/// Horizontal and vertical derivatives: central differences inside the
/// image, one-sided differences on the border.
pub fn image_gradient(img: &ImageBuffer) -> Result<(ImageBuffer, ImageBuffer), ImagingError> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    if h < 3 || w < 3 {
        return Err(ImagingError::Degenerate {
            op: "image_gradient",
            height: h,
            width: w,
        });
    }
    let mut gx = ImageBuffer::zeros(h, w, ch);
    let mut gy = ImageBuffer::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let dx = if x == 0 {
                    img.get(1, y, c) - img.get(0, y, c)
                } else if x == w - 1 {
                    img.get(w - 1, y, c) - img.get(w - 2, y, c)
                } else {
                    0.5 * (img.get(x + 1, y, c) - img.get(x - 1, y, c))
                };
                let dy = if y == 0 {
                    img.get(x, 1, c) - img.get(x, 0, c)
                } else if y == h - 1 {
                    img.get(x, h - 1, c) - img.get(x, h - 2, c)
                } else {
                    0.5 * (img.get(x, y + 1, c) - img.get(x, y - 1, c))
                };
                gx.set(x, y, c, dx);
                gy.set(x, y, c, dy);
            }
        }
    }
    Ok((gx, gy))
}

/// Per-channel whitening statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// The usual ImageNet RGB statistics.
    pub fn imagenet() -> Self {
        Self {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    /// ImageNet statistics collapsed to one grey channel.
    pub fn imagenet_gray() -> Self {
        Self {
            mean: vec![0.449],
            std: vec![0.226],
        }
    }

    pub fn for_channels(channels: usize) -> Self {
        if channels == 1 {
            Self::imagenet_gray()
        } else {
            Self::imagenet()
        }
    }

    fn check(&self, channels: usize) -> Result<(), ImagingError> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(ImagingError::DimensionMismatch(format!(
                "stats for {} channels applied to a {channels}-channel image",
                self.mean.len()
            )));
        }
        if let Some(c) = self.std.iter().position(|s| *s == 0.0 || !s.is_finite()) {
            return Err(ImagingError::ZeroStd { channel: c });
        }
        Ok(())
    }
}

/// Bilinear resize with pixel-centre alignment.
pub fn resize_bilinear(
    img: &ImageBuffer,
    height: usize,
    width: usize,
) -> Result<ImageBuffer, ImagingError> {
    if height == 0 || width == 0 || img.height() == 0 || img.width() == 0 {
        return Err(ImagingError::Degenerate {
            op: "resize",
            height,
            width,
        });
    }
    if height == img.height() && width == img.width() {
        return Ok(img.clone());
    }
    let sx = img.width() as f64 / width as f64;
    let sy = img.height() as f64 / height as f64;
    let (wmax, hmax) = ((img.width() - 1) as f64, (img.height() - 1) as f64);
    let ch = img.channels();
    let mut out = ImageBuffer::zeros(height, width, ch);
    let mut px = vec![0.0; ch];
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, hmax);
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, wmax);
            bilinear_sample_into(img, fx, fy, &mut px);
            for (c, v) in px.iter().enumerate() {
                out.set(x, y, c, *v);
            }
        }
    }
    Ok(out)
}

pub fn whiten(img: &ImageBuffer, stats: &ChannelStats) -> Result<ImageBuffer, ImagingError> {
    stats.check(img.channels())?;
    let mut out = img.clone();
    let ch = img.channels();
    for px in out.data_mut().chunks_exact_mut(ch) {
        for (c, v) in px.iter_mut().enumerate() {
            *v = (*v - stats.mean[c]) / stats.std[c];
        }
    }
    Ok(out)
}

pub fn unwhiten(img: &ImageBuffer, stats: &ChannelStats) -> Result<ImageBuffer, ImagingError> {
    stats.check(img.channels())?;
    let mut out = img.clone();
    let ch = img.channels();
    for px in out.data_mut().chunks_exact_mut(ch) {
        for (c, v) in px.iter_mut().enumerate() {
            *v = *v * stats.std[c] + stats.mean[c];
        }
    }
    Ok(out)
}

/// Resize to `height` x `width`, then whiten per channel.
pub fn preprocess(
    img: &ImageBuffer,
    height: usize,
    width: usize,
    stats: &ChannelStats,
) -> Result<ImageBuffer, ImagingError> {
    stats.check(img.channels())?;
    whiten(&resize_bilinear(img, height, width)?, stats)
}
