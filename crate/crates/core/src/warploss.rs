//! View synthesis by inverse warping and the weighted reconstruction loss.
//!
//! Warping uses gather semantics: for every pixel of the source grid the
//! counterpart image is sampled where that pixel lands after backprojection,
//! rigid transformation and projection. All loss rasters live on the source
//! grid.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::geometry::{rotation_magnitude, Pose};
use crate::imaging::{
    bilinear_sample_into, image_gradient, DepthMap, ImageBuffer, ImagingError, Intrinsics,
    MIN_PROJECTION_DEPTH,
};

#[derive(Debug, Error)]
pub enum WarpLossError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("explainability weights must lie in (0, 1)")]
    MaskRange,
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn mismatch(what: impl Into<String>) -> WarpLossError {
    WarpLossError::DimensionMismatch(what.into())
}

/// Per-pixel explainability weights, strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ExplainabilityMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ExplainabilityMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, WarpLossError> {
        if data.len() != height * width {
            return Err(mismatch(format!(
                "{height}x{width} mask with {} values",
                data.len()
            )));
        }
        if data.iter().any(|w| !(*w > 0.0 && *w < 1.0)) {
            return Err(WarpLossError::MaskRange);
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, w: f64) -> Result<Self, WarpLossError> {
        Self::new(height, width, vec![w; height * width])
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
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_exp: f64,
    pub lambda_rot: f64,
    /// Rotation gate in radians.
    pub gamma_rot: f64,
    /// Intensity-gradient threshold of the gradient criterion.
    pub gamma_grad: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_exp: 0.23,
            lambda_rot: 4.0,
            gamma_rot: 0.005,
            gamma_grad: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), WarpLossError> {
        let fields = [
            ("lambda_exp", self.lambda_exp),
            ("lambda_rot", self.lambda_rot),
            ("gamma_rot", self.gamma_rot),
            ("gamma_grad", self.gamma_grad),
        ];
        for (name, v) in fields {
            if v.is_nan() || v < 0.0 {
                return Err(WarpLossError::Config(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Synthesises the source view from `counterpart`: each source pixel with
/// depth `depth` is moved by `t` (source frame to counterpart frame) and the
/// counterpart is sampled there. Returns the reconstruction and a validity
/// raster that is false where the pixel leaves the frame or lands behind the
/// camera; invalid pixels are zero.
pub fn warp(
    counterpart: &ImageBuffer,
    depth: &DepthMap,
    t: &Pose,
    k: &Intrinsics,
) -> Result<(ImageBuffer, Vec<bool>), WarpLossError> {
    let (h, w, c) = (counterpart.height(), counterpart.width(), counterpart.channels());
    if depth.height() != h || depth.width() != w || k.height != h || k.width != w {
        return Err(mismatch(format!(
            "image {h}x{w}, depth {}x{}, intrinsics {}x{}",
            depth.height(),
            depth.width(),
            k.height,
            k.width
        )));
    }
    let mut recon = ImageBuffer::zeros(h, w, c);
    let mut valid = vec![false; h * w];
    let mut px = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let d = depth.get(x, y);
            let p = Vector3::new((x as f64 - k.cu) / k.fu * d, (y as f64 - k.cv) / k.fv * d, d);
            let q = t.transform_point(&p);
            if q.z <= MIN_PROJECTION_DEPTH {
                continue;
            }
            let uv = Vector2::new(k.fu * q.x / q.z + k.cu, k.fv * q.y / q.z + k.cv)
                .map(snap_to_lattice);
            if bilinear_sample_into(counterpart, uv.x, uv.y, &mut px) {
                valid[y * w + x] = true;
                for (ch, v) in px.iter().enumerate() {
                    recon.set(x, y, ch, *v);
                }
            }
        }
    }
    Ok((recon, valid))
}

/// Removes round-off left by the backproject/project round trip so that
/// lattice points are sampled exactly.
fn snap_to_lattice(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < LATTICE_SNAP {
        r
    } else {
        v
    }
}

const LATTICE_SNAP: f64 = 1e-9;

/// `W(u,v) * |recon - target|` per channel; zero on invalid pixels.
pub fn photometric_loss(
    recon: &ImageBuffer,
    target: &ImageBuffer,
    mask: &ExplainabilityMask,
    validity: &[bool],
) -> Result<ImageBuffer, WarpLossError> {
    let (h, w, c) = (target.height(), target.width(), target.channels());
    if !recon.same_dims(target) || mask.height != h || mask.width != w || validity.len() != h * w {
        return Err(mismatch("photometric_loss inputs"));
    }
    let mut out = ImageBuffer::zeros(h, w, c);
    for i in 0..h * w {
        if !validity[i] {
            continue;
        }
        for ch in 0..c {
            let j = i * c + ch;
            out.data_mut()[j] = mask.data[i] * (recon.data()[j] - target.data()[j]).abs();
        }
    }
    Ok(out)
}

/// Cross-entropy against the constant label 1: `-ln W(u,v)`.
pub fn explainability_loss(mask: &ExplainabilityMask) -> ImageBuffer {
    let data = mask.data.iter().map(|w| -w.ln()).collect();
    ImageBuffer::new(mask.height, mask.width, 1, data).expect("mask dims are consistent")
}

/// Whether the rotation-gated term is active for a prior.
pub fn rotation_gate_open(vo: &Pose, gamma: f64) -> bool {
    rotation_magnitude(vo) >= gamma
}

/// The photometric raster when the prior rotates by at least `gamma`,
/// otherwise zeros.
pub fn rotation_gated_loss(phot: &ImageBuffer, vo: &Pose, gamma: f64) -> ImageBuffer {
    if rotation_gate_open(vo, gamma) {
        phot.clone()
    } else {
        ImageBuffer::zeros(phot.height(), phot.width(), phot.channels())
    }
}

/// Per-pixel loss terms of one sample.
#[derive(Clone, Debug)]
pub struct LossTerms {
    /// `C` channels.
    pub photometric: ImageBuffer,
    /// One channel; replicated over the photometric channels.
    pub explainability: ImageBuffer,
    /// `C` channels.
    pub rotation: ImageBuffer,
}

/// Mean over samples, channels and pixels of
/// `phot + lambda_exp * exp + lambda_rot * rot`.
pub fn total_loss(batch: &[LossTerms], config: &LossConfig) -> Result<f64, WarpLossError> {
    config.validate()?;
    let Some(first) = batch.first() else {
        return Err(WarpLossError::EmptyBatch);
    };
    let (h, w, c) = (
        first.photometric.height(),
        first.photometric.width(),
        first.photometric.channels(),
    );
    let mut sum = 0.0;
    for terms in batch {
        let p = &terms.photometric;
        let e = &terms.explainability;
        if p.height() != h || p.width() != w || p.channels() != c || !terms.rotation.same_dims(p) {
            return Err(mismatch("loss terms differ in shape"));
        }
        if e.height() != h || e.width() != w || e.channels() != 1 {
            return Err(mismatch("explainability raster shape"));
        }
        for i in 0..h * w {
            let ex = config.lambda_exp * e.data()[i];
            for ch in 0..c {
                let j = i * c + ch;
                sum += p.data()[j] + ex + config.lambda_rot * terms.rotation.data()[j];
            }
        }
    }
    Ok(sum / (batch.len() * c * h * w) as f64)
}

/// Result of the gradient-based epoch-selection loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradientCriterion {
    Loss(f64),
    /// No valid pixel passed the gradient threshold.
    NoPixels,
}

impl GradientCriterion {
    pub fn value(self) -> Option<f64> {
        match self {
            GradientCriterion::Loss(v) => Some(v),
            GradientCriterion::NoPixels => None,
        }
    }
}

/// Per-pixel mask of valid pixels whose mean absolute target gradient
/// `(|dI/dx| + |dI/dy|) / 2`, averaged over channels, exceeds `gamma_grad`.
pub fn high_gradient_pixels(
    target: &ImageBuffer,
    validity: &[bool],
    gamma_grad: f64,
) -> Result<Vec<bool>, WarpLossError> {
    let (h, w, c) = (target.height(), target.width(), target.channels());
    if validity.len() != h * w {
        return Err(mismatch("validity raster size"));
    }
    let (gx, gy) = image_gradient(target)?;
    Ok((0..h * w)
        .map(|i| {
            let mag = (0..c)
                .map(|ch| 0.5 * (gx.data()[i * c + ch].abs() + gy.data()[i * c + ch].abs()))
                .sum::<f64>()
                / c as f64;
            validity[i] && mag > gamma_grad
        })
        .collect())
}

/// Unweighted mean `|recon - target|` over high-gradient valid pixels.
pub fn gradient_criterion_loss(
    recon: &ImageBuffer,
    target: &ImageBuffer,
    validity: &[bool],
    gamma_grad: f64,
) -> Result<GradientCriterion, WarpLossError> {
    if !recon.same_dims(target) {
        return Err(mismatch("gradient criterion images"));
    }
    let keep = high_gradient_pixels(target, validity, gamma_grad)?;
    let c = target.channels();
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, k) in keep.iter().enumerate() {
        if *k {
            for ch in 0..c {
                sum += (recon.data()[i * c + ch] - target.data()[i * c + ch]).abs();
            }
            count += c;
        }
    }
    Ok(if count == 0 {
        GradientCriterion::NoPixels
    } else {
        GradientCriterion::Loss(sum / count as f64)
    })
}

/// Graph inputs of the differentiable loss, batch-first and channel-planar.
pub struct LossGraphInputs<'a> {
    /// `[N,C,H,W]` source images (the grid the loss lives on).
    pub source: Var,
    /// `[N,C,H,W]` images that are sampled.
    pub counterpart: Var,
    /// `[N,1,H,W]` source depth.
    pub depth: Var,
    /// `[N,12]` source-to-counterpart transforms.
    pub pose: Var,
    /// `[N,1,H,W]` explainability weights.
    pub mask: Var,
    /// Per-sample rotation gate.
    pub gates: &'a [bool],
    pub intrinsics: &'a Intrinsics,
}

pub struct LossGraph {
    pub total: Var,
    pub reconstruction: Var,
    /// `[N,H,W]` validity.
    pub valid: Vec<bool>,
}

/// Records the total loss on `g`; equal to [`total_loss`] applied to the
/// plain-raster terms of every sample.
pub fn loss_graph(
    g: &mut Graph,
    inp: &LossGraphInputs,
    config: &LossConfig,
) -> Result<LossGraph, WarpLossError> {
    config.validate()?;
    let shape = g.shape(inp.source).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(mismatch(format!("source shape {shape:?}")));
    };
    if n == 0 {
        return Err(WarpLossError::EmptyBatch);
    }
    if inp.gates.len() != n || g.shape(inp.mask) != [n, 1, h, w] {
        return Err(mismatch("mask or gate count"));
    }
    let warp = g.warp_coords(inp.pose, inp.depth, inp.intrinsics)?;
    let (recon, sampled) = g.bilinear_sample(inp.counterpart, warp.coords)?;
    let valid: Vec<bool> = sampled.iter().zip(&warp.valid).map(|(a, b)| *a && *b).collect();
    let diff = g.sub(recon, inp.source)?;
    let absd = g.abs(diff)?;
    let hw = h * w;
    let mut weights = vec![0.0; n * c * hw];
    for i in 0..n {
        let gate = if inp.gates[i] { 1.0 + config.lambda_rot } else { 1.0 };
        for ch in 0..c {
            for p in 0..hw {
                if valid[i * hw + p] {
                    weights[(i * c + ch) * hw + p] = gate;
                }
            }
        }
    }
    let gated = g.mul_const(absd, weights)?;
    let weighted = g.mul_channel(gated, inp.mask)?;
    let phot = g.mean(weighted)?;
    let log_mask = g.log(inp.mask)?;
    let exp = g.mean(log_mask)?;
    let exp = g.scale(exp, -config.lambda_exp)?;
    let total = g.add(phot, exp)?;
    Ok(LossGraph {
        total,
        reconstruction: recon,
        valid,
    })
}

/// Stacks images into a planar `[N,C,H,W]` tensor.
pub fn stack_images(images: &[&ImageBuffer]) -> Result<Tensor, WarpLossError> {
    let first = images.first().ok_or(WarpLossError::EmptyBatch)?;
    let mut data = Vec::with_capacity(images.len() * first.data().len());
    for img in images {
        if !img.same_dims(first) {
            return Err(mismatch("images in a batch differ in size"));
        }
        data.extend(img.to_planar());
    }
    Ok(Tensor::new(
        vec![images.len(), first.channels(), first.height(), first.width()],
        data,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;
    use crate::geometry::Pose;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn textured(h: usize, w: usize, c: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, c, |x, y, ch| {
            0.5 + 0.3 * (0.37 * x as f64 + 0.11 * ch as f64).sin() * (0.23 * y as f64).cos()
        })
    }

    fn intr(h: usize, w: usize) -> Intrinsics {
        Intrinsics::new(20.0, 20.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, h, w).unwrap()
    }

    #[test]
    fn zero_motion_reproduces_the_counterpart() {
        let img = textured(12, 16, 3);
        let depth = DepthMap::constant(12, 16, 3.0).unwrap();
        let (recon, valid) = warp(&img, &depth, &Pose::identity(), &intr(12, 16)).unwrap();
        assert!(valid.iter().all(|v| *v));
        assert_eq!(recon, img);
    }

    #[test]
    fn fronto_parallel_plane_shift() {
        let (h, w) = (16, 24);
        let k = intr(h, w);
        let (d, tx) = (4.0, 0.3);
        let img = ImageBuffer::from_fn(h, w, 1, |x, y, _| {
            (0.3 * x as f64).sin() + 0.2 * (0.5 * y as f64).cos()
        });
        let depth = DepthMap::constant(h, w, d).unwrap();
        let t = Pose::from_translation(Vector3::new(tx, 0.0, 0.0));
        let (recon, valid) = warp(&img, &depth, &t, &k).unwrap();
        let shift = k.fu * tx / d;
        let mut checked = 0;
        for y in 0..h {
            for x in 0..w {
                if !valid[y * w + x] {
                    continue;
                }
                let (v, ok) = crate::imaging::bilinear_sample(&img, x as f64 + shift, y as f64);
                assert!(ok);
                assert!((recon.get(x, y, 0) - v[0]).abs() <= 1e-3);
                checked += 1;
            }
        }
        assert!(checked > h * (w - 3));
    }

    #[test]
    fn large_motion_invalidates_everything() {
        let img = textured(8, 8, 1);
        let depth = DepthMap::constant(8, 8, 2.0).unwrap();
        let t = Pose::from_translation(Vector3::new(50.0, 0.0, 0.0));
        let (_, valid) = warp(&img, &depth, &t, &intr(8, 8)).unwrap();
        assert!(valid.iter().all(|v| !*v));
        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, -10.0));
        let (_, valid) = warp(&img, &depth, &behind, &intr(8, 8)).unwrap();
        assert!(valid.iter().all(|v| !*v));
    }

    #[test]
    fn warp_rejects_mismatched_inputs() {
        let img = textured(8, 8, 1);
        let depth = DepthMap::constant(8, 9, 2.0).unwrap();
        assert!(warp(&img, &depth, &Pose::identity(), &intr(8, 8)).is_err());
    }

    #[test]
    fn validity_is_monotone_in_translation() {
        let img = textured(10, 14, 1);
        let depth = DepthMap::constant(10, 14, 3.0).unwrap();
        let k = intr(10, 14);
        let mut prev = vec![true; 140];
        for step in 0..20 {
            let t = Pose::from_translation(Vector3::new(0.1 * step as f64, 0.0, 0.0));
            let (_, valid) = warp(&img, &depth, &t, &k).unwrap();
            for (a, b) in prev.iter().zip(&valid) {
                assert!(*a || !*b);
            }
            prev = valid;
        }
    }

    #[test]
    fn photometric_cases() {
        let a = ImageBuffer::from_fn(4, 4, 3, |_, _, _| 0.2);
        let b = ImageBuffer::from_fn(4, 4, 3, |_, _, _| 0.7);
        let valid = vec![true; 16];
        let m = ExplainabilityMask::filled(4, 4, 0.3).unwrap();
        let same = photometric_loss(&a, &a, &m, &valid).unwrap();
        assert!(same.data().iter().all(|v| *v == 0.0));
        let one = ExplainabilityMask::filled(4, 4, 1.0 - 1e-12).unwrap();
        let half = photometric_loss(&a, &b, &one, &valid).unwrap();
        assert!(half.data().iter().all(|v| (v - 0.5).abs() < 1e-9));
        let mut data = vec![0.9; 16];
        data[5] = 1e-300;
        let m = ExplainabilityMask::new(4, 4, data).unwrap();
        let low = photometric_loss(&a, &b, &m, &valid).unwrap();
        assert!(low.get(1, 1, 0) < 1e-299);
        let mut valid = valid;
        valid[0] = false;
        let inv = photometric_loss(&a, &b, &one, &valid).unwrap();
        assert_eq!(inv.get(0, 0, 2), 0.0);
    }

    #[test]
    fn explainability_values() {
        let e = 1e-9;
        let m = ExplainabilityMask::new(1, 3, vec![1.0 - e, 0.5, (-2.0f64).exp()]).unwrap();
        let l = explainability_loss(&m);
        assert_abs_diff_eq!(l.data()[0], e, epsilon = 1e-15);
        assert_abs_diff_eq!(l.data()[1], std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(l.data()[2], 2.0, epsilon = 1e-15);
        assert!(ExplainabilityMask::new(1, 1, vec![1.0]).is_err());
        assert!(ExplainabilityMask::new(1, 1, vec![0.0]).is_err());
    }

    #[test]
    fn rotation_gate() {
        let phot = textured(4, 5, 3);
        let y = Vector3::new(0.0, 1.0, 0.0);
        let small = Pose::from_axis_angle(y, 0.004);
        let large = Pose::from_axis_angle(y, 0.01);
        assert!(rotation_gated_loss(&phot, &small, 0.005).data().iter().all(|v| *v == 0.0));
        assert_eq!(rotation_gated_loss(&phot, &large, 0.005), phot);
        assert_eq!(rotation_gated_loss(&phot, &Pose::identity(), 0.0), phot);
    }

    fn terms(diff: f64, w: f64, gate_open: bool) -> LossTerms {
        let a = ImageBuffer::from_fn(4, 6, 3, |_, _, _| 0.1);
        let b = ImageBuffer::from_fn(4, 6, 3, |_, _, _| 0.1 + diff);
        let m = ExplainabilityMask::filled(4, 6, w).unwrap();
        let phot = photometric_loss(&a, &b, &m, &[true; 24]).unwrap();
        let vo = if gate_open {
            Pose::from_axis_angle(Vector3::new(0.0, 1.0, 0.0), 0.02)
        } else {
            Pose::identity()
        };
        LossTerms {
            rotation: rotation_gated_loss(&phot, &vo, 0.005),
            explainability: explainability_loss(&m),
            photometric: phot,
        }
    }

    #[test]
    fn total_loss_cases() {
        let cfg = LossConfig::default();
        let e = 1e-9;
        let perfect = total_loss(&[terms(0.0, 1.0 - e, false)], &cfg).unwrap();
        assert!((perfect - cfg.lambda_exp * e).abs() < 1e-15);
        let uniform = total_loss(&[terms(0.5, 1.0 - 1e-15, false)], &cfg).unwrap();
        assert!((uniform - 0.5).abs() < 1e-9);
        let gated = total_loss(&[terms(0.5, 1.0 - 1e-15, true)], &cfg).unwrap();
        assert!((gated - 0.5 * (1.0 + cfg.lambda_rot)).abs() < 1e-9);
        let a = terms(0.3, 0.6, true);
        let b = terms(0.1, 0.8, false);
        let single = total_loss(&[a.clone(), b.clone()], &cfg).unwrap();
        let doubled = total_loss(&[a.clone(), b.clone(), a, b], &cfg).unwrap();
        assert!((single - doubled).abs() < 1e-15);
        assert!(matches!(total_loss(&[], &cfg), Err(WarpLossError::EmptyBatch)));
        let bad = LossConfig {
            lambda_rot: -1.0,
            ..cfg
        };
        assert!(total_loss(&[terms(0.0, 0.5, false)], &bad).is_err());
    }

    #[test]
    fn total_loss_reduces_to_explainability_term() {
        let cfg = LossConfig::default();
        let t = terms(0.0, 0.37, false);
        let got = total_loss(&[t], &cfg).unwrap();
        assert!((got - cfg.lambda_exp * -(0.37f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_criterion_cases() {
        let flat = ImageBuffer::from_fn(6, 6, 1, |_, _, _| 0.4);
        let other = ImageBuffer::from_fn(6, 6, 1, |_, _, _| 0.1);
        let valid = vec![true; 36];
        assert_eq!(
            gradient_criterion_loss(&other, &flat, &valid, 0.05).unwrap(),
            GradientCriterion::NoPixels
        );
        let ramp = ImageBuffer::from_fn(6, 6, 1, |x, _, _| 0.2 * x as f64);
        let recon = ImageBuffer::from_fn(6, 6, 1, |x, y, _| 0.2 * x as f64 + 0.01 * (x + y) as f64);
        let got = gradient_criterion_loss(&recon, &ramp, &valid, 0.05).unwrap();
        let plain = recon.data().iter().zip(ramp.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 36.0;
        assert!((got.value().unwrap() - plain).abs() < 1e-15);
        assert_eq!(
            gradient_criterion_loss(&recon, &ramp, &valid, f64::INFINITY).unwrap(),
            GradientCriterion::NoPixels
        );
        let mut valid = valid;
        valid[0] = false;
        let partial = gradient_criterion_loss(&recon, &ramp, &valid, 0.05).unwrap();
        assert!((partial.value().unwrap() - (plain * 36.0) / 35.0).abs() < 1e-15);
    }

    #[test]
    fn loss_graph_matches_plain_loss() {
        let (h, w, c) = (10, 12, 3);
        let k = intr(h, w);
        let src = textured(h, w, c);
        let tgt = ImageBuffer::from_fn(h, w, c, |x, y, ch| {
            0.5 + 0.25 * (0.31 * x as f64 + 0.2 * ch as f64).cos() * (0.19 * y as f64).sin()
        });
        let depth_vals: Vec<f64> = (0..h * w).map(|i| 2.0 + 0.01 * i as f64).collect();
        let mask_vals: Vec<f64> = (0..h * w).map(|i| 0.2 + 0.6 * ((i * 7) % 11) as f64 / 11.0).collect();
        let poses = [
            Pose::from_axis_angle(Vector3::new(0.0, 1.0, 0.0), 0.03)
                .with_translation(Vector3::new(0.05, 0.0, 0.2)),
            Pose::from_translation(Vector3::new(-0.1, 0.02, 0.1)),
        ];
        let cfg = LossConfig::default();
        let depth = DepthMap::new(h, w, depth_vals.clone()).unwrap();
        let mask = ExplainabilityMask::new(h, w, mask_vals.clone()).unwrap();
        let mut plain = Vec::new();
        for p in &poses {
            let (recon, valid) = warp(&tgt, &depth, p, &k).unwrap();
            let phot = photometric_loss(&recon, &src, &mask, &valid).unwrap();
            plain.push(LossTerms {
                rotation: rotation_gated_loss(&phot, p, cfg.gamma_rot),
                explainability: explainability_loss(&mask),
                photometric: phot,
            });
        }
        let want = total_loss(&plain, &cfg).unwrap();

        let mut g = Graph::new(Precision::Double);
        let source = g.constant(stack_images(&[&src, &src]).unwrap());
        let counterpart = g.constant(stack_images(&[&tgt, &tgt]).unwrap());
        let mut dv = depth_vals.clone();
        dv.extend(&depth_vals);
        let depth_v = g.param(&Tensor::new(vec![2, 1, h, w], dv).unwrap());
        let mut mv = mask_vals.clone();
        mv.extend(&mask_vals);
        let mask_v = g.param(&Tensor::new(vec![2, 1, h, w], mv).unwrap());
        let rows: Vec<f64> = poses.iter().flat_map(|p| p.to_rows()).collect();
        let pose_v = g.param(&Tensor::new(vec![2, 12], rows).unwrap());
        let gates: Vec<bool> = poses.iter().map(|p| rotation_gate_open(p, cfg.gamma_rot)).collect();
        assert_eq!(gates, vec![true, false]);
        let out = loss_graph(
            &mut g,
            &LossGraphInputs {
                source,
                counterpart,
                depth: depth_v,
                pose: pose_v,
                mask: mask_v,
                gates: &gates,
                intrinsics: &k,
            },
            &cfg,
        )
        .unwrap();
        assert!((g.scalar_value(out.total) - want).abs() < 1e-12);
    }

    #[test]
    fn twist_gradient_matches_finite_differences() {
        use crate::autodiff::{gradcheck, GradcheckOptions};
        let n = 32;
        let k = intr(n, n);
        let src = textured(n, n, 1);
        let depth = DepthMap::constant(n, n, 3.0).unwrap();
        let vo = Pose::from_axis_angle(Vector3::new(0.0, 1.0, 0.0), 0.02)
            .with_translation(Vector3::new(0.05, 0.0, 0.1));
        let (tgt, _) = warp(&src, &depth, &vo.inverse(), &k).unwrap();
        let cfg = LossConfig::default();
        let build = |g: &mut Graph, v: &[Var]| -> Result<Var, AutodiffError> {
            let source = g.constant(stack_images(&[&src]).unwrap());
            let counterpart = g.constant(stack_images(&[&tgt]).unwrap());
            let d = g.constant(Tensor::filled(vec![1, 1, n, n], 2.7));
            let m = g.constant(Tensor::filled(vec![1, 1, n, n], 0.8));
            let corr = g.se3_exp(v[0])?;
            let pose = g.compose_right(corr, &[vo])?;
            let inp = LossGraphInputs {
                source,
                counterpart,
                depth: d,
                pose,
                mask: m,
                gates: &[true],
                intrinsics: &k,
            };
            match loss_graph(g, &inp, &cfg) {
                Ok(out) => Ok(out.total),
                Err(WarpLossError::Autodiff(e)) => Err(e),
                Err(e) => panic!("{e}"),
            }
        };
        let twist = Tensor::new(vec![1, 6], vec![0.01, -0.02, 0.015, 0.003, -0.004, 0.002]).unwrap();
        let report = gradcheck(build, &[twist], &GradcheckOptions::default()).unwrap();
        assert_eq!(report.checked, 6);
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
