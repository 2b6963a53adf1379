use std::path::PathBuf;

use super::sample::{bilinear_sample_into, image_gradient, resize_bilinear};
use super::{io, FlowField, ImageBuffer, ImagingError};

/// Anything that can produce a dense flow field for an image pair.
pub trait FlowProvider {
    fn compute(&self, src: &ImageBuffer, tgt: &ImageBuffer) -> Result<FlowField, ImagingError>;
}

/// Coarse-to-fine dense Lucas-Kanade: at every pyramid level each pixel
/// solves the 2x2 normal equations accumulated over a square window, with
/// the target re-sampled at the current flow estimate on every iteration.
#[derive(Clone, Debug)]
pub struct PyramidFlow {
    pub levels: usize,
    pub window: usize,
    pub iterations: usize,
}

impl Default for PyramidFlow {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 5,
            iterations: 5,
        }
    }
}

/// Flow loaded from a file in the `FLOW2` format.
#[derive(Clone, Debug)]
pub struct PrecomputedFlow {
    pub path: PathBuf,
}

impl FlowProvider for PrecomputedFlow {
    fn compute(&self, src: &ImageBuffer, tgt: &ImageBuffer) -> Result<FlowField, ImagingError> {
        check_pair(src, tgt)?;
        let flow = io::read_flow(&self.path)?;
        if flow.height() != src.height() || flow.width() != src.width() {
            return Err(ImagingError::DimensionMismatch(format!(
                "{}: flow is {}x{}, images are {}x{}",
                self.path.display(),
                flow.height(),
                flow.width(),
                src.height(),
                src.width()
            )));
        }
        Ok(flow)
    }
}

fn check_pair(src: &ImageBuffer, tgt: &ImageBuffer) -> Result<(), ImagingError> {
    if !src.same_dims(tgt) {
        return Err(ImagingError::DimensionMismatch(format!(
            "flow between {}x{}x{} and {}x{}x{}",
            src.height(),
            src.width(),
            src.channels(),
            tgt.height(),
            tgt.width(),
            tgt.channels()
        )));
    }
    Ok(())
}

/// Dense flow with the built-in estimator.
pub fn compute_flow(src: &ImageBuffer, tgt: &ImageBuffer) -> Result<FlowField, ImagingError> {
    PyramidFlow::default().compute(src, tgt)
}

impl FlowProvider for PyramidFlow {
    fn compute(&self, src: &ImageBuffer, tgt: &ImageBuffer) -> Result<FlowField, ImagingError> {
        check_pair(src, tgt)?;
        let (h, w) = (src.height(), src.width());
        let mut pyramid = vec![(src.to_gray(), tgt.to_gray())];
        for _ in 1..self.levels.max(1) {
            let (s, t) = pyramid.last().unwrap();
            let (nh, nw) = (s.height().div_ceil(2), s.width().div_ceil(2));
            if nh < 3 || nw < 3 {
                break;
            }
            pyramid.push((resize_bilinear(s, nh, nw)?, resize_bilinear(t, nh, nw)?));
        }

        let mut flow: Option<(Vec<f64>, Vec<f64>, usize, usize)> = None;
        for (s, t) in pyramid.iter().rev() {
            let (lh, lw) = (s.height(), s.width());
            let (mut fx, mut fy) = match flow.take() {
                None => (vec![0.0; lh * lw], vec![0.0; lh * lw]),
                Some((px, py, ph, pw)) => upsample_flow(&px, &py, ph, pw, lh, lw),
            };
            if lh >= 3 && lw >= 3 {
                self.refine(s, t, &mut fx, &mut fy)?;
            }
            flow = Some((fx, fy, lh, lw));
        }
        let (fx, fy, _, _) = flow.unwrap();
        let data = fx
            .iter()
            .zip(&fy)
            .flat_map(|(a, b)| [*a as f32, *b as f32])
            .collect();
        FlowField::new(h, w, data)
    }
}

impl PyramidFlow {
    fn refine(
        &self,
        src: &ImageBuffer,
        tgt: &ImageBuffer,
        fx: &mut [f64],
        fy: &mut [f64],
    ) -> Result<(), ImagingError> {
        let (h, w) = (src.height(), src.width());
        let n = h * w;
        let (gx, gy) = image_gradient(src)?;
        let (gx, gy) = (gx.data(), gy.data());
        let radius = self.window / 2;
        let gxx: Vec<f64> = gx.iter().map(|v| v * v).collect();
        let gxy: Vec<f64> = gx.iter().zip(gy).map(|(a, b)| a * b).collect();
        let gyy: Vec<f64> = gy.iter().map(|v| v * v).collect();
        let sxx = box_sum(&gxx, h, w, radius);
        let sxy = box_sum(&gxy, h, w, radius);
        let syy = box_sum(&gyy, h, w, radius);

        let mut px = [0.0];
        let mut bx = vec![0.0; n];
        let mut by = vec![0.0; n];
        for _ in 0..self.iterations {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let valid =
                        bilinear_sample_into(tgt, x as f64 + fx[i], y as f64 + fy[i], &mut px);
                    let err = if valid { px[0] - src.data()[i] } else { 0.0 };
                    bx[i] = gx[i] * err;
                    by[i] = gy[i] * err;
                }
            }
            let sbx = box_sum(&bx, h, w, radius);
            let sby = box_sum(&by, h, w, radius);
            for i in 0..n {
                let (a, b, c) = (sxx[i], sxy[i], syy[i]);
                let det = a * c - b * b;
                let trace = a + c;
                if det <= 1e-9 * trace * trace || trace < 1e-12 {
                    continue;
                }
                let dx = (c * sbx[i] - b * sby[i]) / det;
                let dy = (a * sby[i] - b * sbx[i]) / det;
                fx[i] -= dx.clamp(-1.0, 1.0);
                fy[i] -= dy.clamp(-1.0, 1.0);
            }
        }
        Ok(())
    }
}

fn upsample_flow(
    fx: &[f64],
    fy: &[f64],
    ph: usize,
    pw: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let sx = w as f64 / pw as f64;
    let sy = h as f64 / ph as f64;
    let ux = ImageBuffer::new(ph, pw, 1, fx.to_vec()).expect("flow plane");
    let uy = ImageBuffer::new(ph, pw, 1, fy.to_vec()).expect("flow plane");
    let ux = resize_bilinear(&ux, h, w).expect("resize");
    let uy = resize_bilinear(&uy, h, w).expect("resize");
    (
        ux.data().iter().map(|v| v * sx).collect(),
        uy.data().iter().map(|v| v * sy).collect(),
    )
}

/// Sum over a `(2r+1)^2` window, truncated at the borders.
fn box_sum(v: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let row = &v[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = row[lo..=hi].iter().sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).sum();
        }
    }
    out
}
