//! Pose files, sequence manifests, dataset ingestion and the synthetic
//! scene generator.
//!
//! Pose files hold one world-from-camera pose per line as the 12 row-major
//! entries of the upper 3x4 block. Scripted motions are camera motions
//! `M_t = G_t^-1 * G_{t+1}`; the relative transforms used everywhere else
//! are their inverses (see [`crate::evaluation`]).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::evaluation::{compound, EvalError, Trajectory};
use crate::fsutil::write_atomic;
use crate::geometry::{exp_se3, GeometryError, Pose, Twist};
use crate::imaging::io::{parse_intrinsics, read_flow, read_pnm, write_intrinsics, write_pnm};
use crate::imaging::{
    backproject, compute_flow, preprocess, resize_bilinear, ChannelStats, DepthMap, FlowField, ImageBuffer,
    ImagingError, Intrinsics,
};
use crate::trainer::SequenceData;

/// Rotations read from pose files may deviate this much from orthonormal
/// before they are rejected; smaller deviations are projected onto SO(3).
pub const POSE_FILE_TOL: f64 = 1e-3;
pub const DATA_ROOT_ENV: &str = "DPC_DATA_ROOT";
/// Depth assigned to pixels whose ray leaves the scene.
pub const BACKGROUND_DEPTH: f64 = 1e3;
const IMAGE_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "png"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {reason}")]
    MalformedLine { path: String, line: usize, reason: String },
    #[error("sequence {id}: {what}")]
    CountMismatch { id: String, what: String },
    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error("invalid synthetic scene: {0}")]
    Config(String),
    #[error("frame {0} sees none of the scene")]
    OutOfView(usize),
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Decode { path: String, reason: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses a pose file; `origin` names the source in error messages.
pub fn parse_kitti_poses(text: &str, origin: &str) -> Result<Vec<Pose>, DataError> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| DataError::MalformedLine {
            path: origin.to_string(),
            line: no + 1,
            reason,
        };
        let values = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let rows: [f64; 12] = values
            .as_slice()
            .try_into()
            .map_err(|_| bad(format!("expected 12 numbers, got {}", values.len())))?;
        out.push(Pose::from_rows_projected(&rows, POSE_FILE_TOL).map_err(|e| bad(e.to_string()))?);
    }
    Ok(out)
}

/// 17 significant digits, enough to restore every `f64` exactly.
pub fn format_kitti_poses(poses: &[Pose]) -> String {
    let mut s = String::with_capacity(poses.len() * 12 * 24);
    for p in poses {
        let rows = p.to_rows();
        for (i, v) in rows.iter().enumerate() {
            let sep = if i == 0 { "" } else { " " };
            let _ = write!(s, "{sep}{v:.16e}");
        }
        s.push('\n');
    }
    s
}

pub fn read_kitti_poses(path: &Path) -> Result<Vec<Pose>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_kitti_poses(&text, &path.display().to_string())
}

pub fn write_kitti_poses(path: &Path, poses: &[Pose]) -> Result<(), DataError> {
    write_atomic(path, format_kitti_poses(poses).as_bytes()).map_err(io_err(path))
}

/// Locations of one sequence's files.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceManifest {
    pub id: String,
    pub images: PathBuf,
    pub intrinsics: PathBuf,
    pub gt: Option<PathBuf>,
    pub vo: PathBuf,
    pub flows: Option<PathBuf>,
}

impl SequenceManifest {
    /// Parses `key = value` lines; relative paths are joined to `base`.
    pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Self, DataError> {
        let bad = |reason: String| DataError::Manifest {
            path: origin.to_string(),
            reason,
        };
        let (mut id, mut images, mut intrinsics, mut gt, mut vo, mut flows) = (None, None, None, None, None, None);
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", no + 1)))?;
            let v = v.trim().to_string();
            let path = || Some(base.join(&v));
            match k.trim() {
                "id" => id = Some(v.clone()),
                "images" => images = path(),
                "intrinsics" => intrinsics = path(),
                "gt" => gt = path(),
                "vo" => vo = path(),
                "flows" => flows = path(),
                other => return Err(bad(format!("line {}: unknown key {other:?}", no + 1))),
            }
        }
        let need = |v: Option<PathBuf>, key: &str| v.ok_or_else(|| bad(format!("missing key {key:?}")));
        Ok(Self {
            id: id.ok_or_else(|| bad("missing key \"id\"".into()))?,
            images: need(images, "images")?,
            intrinsics: need(intrinsics, "intrinsics")?,
            vo: need(vo, "vo")?,
            gt,
            flows,
        })
    }

    /// Loads a manifest. Relative entries resolve against `root`, else the
    /// `DPC_DATA_ROOT` directory, else the manifest's own directory.
    pub fn load(path: &Path, root: Option<&Path>) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = match root {
            Some(r) => r.to_path_buf(),
            None => match std::env::var_os(DATA_ROOT_ENV) {
                Some(r) if !r.is_empty() => PathBuf::from(r),
                _ => path.parent().map(Path::to_path_buf).unwrap_or_default(),
            },
        };
        Self::parse(&text, &base, &path.display().to_string())
    }

    /// Manifest text with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut s = format!(
            "id = {}\nimages = {}\nintrinsics = {}\nvo = {}\n",
            self.id,
            rel(&self.images),
            rel(&self.intrinsics),
            rel(&self.vo)
        );
        if let Some(gt) = &self.gt {
            let _ = writeln!(s, "gt = {}", rel(gt));
        }
        if let Some(f) = &self.flows {
            let _ = writeln!(s, "flows = {}", rel(f));
        }
        s
    }
}

/// Files in `dir` with one of `extensions`, sorted by name.
pub fn list_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads a PGM, PPM or PNG image with intensities in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<ImageBuffer, DataError> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if ext.as_deref() != Some("png") {
        return Ok(read_pnm(path)?);
    }
    let decode = |reason: String| DataError::Decode {
        path: path.display().to_string(),
        reason,
    };
    let img = image::open(path).map_err(|e| decode(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = if img.color().has_color() {
        let rgb = img.to_rgb32f();
        (3, rgb.into_raw().into_iter().map(f64::from).collect())
    } else {
        let l = img.to_luma32f();
        (1, l.into_raw().into_iter().map(f64::from).collect())
    };
    Ok(ImageBuffer::new(h, w, channels, data)?)
}

/// Accepts the one-line `f_u f_v c_u c_v H W` format or a KITTI
/// `calib.txt`, whose first projection matrix is used with the size of the
/// first frame.
pub fn parse_calibration(text: &str, frame_size: (usize, usize)) -> Result<Intrinsics, DataError> {
    if let Ok(k) = parse_intrinsics(text) {
        return Ok(k);
    }
    let line = text
        .lines()
        .find_map(|l| l.trim().strip_prefix("P0:").or_else(|| l.trim().strip_prefix("P2:")))
        .ok_or_else(|| ImagingError::Format {
            format: "intrinsics",
            reason: "neither `f_u f_v c_u c_v H W` nor a calib file with P0/P2".into(),
        })?;
    let p = line
        .split_whitespace()
        .map(str::parse::<f64>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ImagingError::Format {
            format: "intrinsics",
            reason: e.to_string(),
        })?;
    if p.len() != 12 {
        return Err(ImagingError::Format {
            format: "intrinsics",
            reason: format!("projection matrix with {} entries", p.len()),
        }
        .into());
    }
    Ok(Intrinsics::new(p[0], p[5], p[2], p[6], frame_size.0, frame_size.1)?)
}

/// Network resolution and channel count applied during ingestion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IngestOptions {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

fn match_channels(img: ImageBuffer, channels: usize) -> ImageBuffer {
    match (img.channels(), channels) {
        (3, 1) => img.to_gray(),
        (1, 3) => ImageBuffer::from_fn(img.height(), img.width(), 3, |x, y, _| img.get(x, y, 0)),
        _ => img,
    }
}

/// Whitens resized frames and attaches flows, priors and ground truth.
/// `raw` frames are at the intrinsics' resolution; without `flows` they are
/// computed on the resized, un-whitened frames.
pub fn assemble_sequence(
    id: &str,
    raw: Vec<ImageBuffer>,
    k: &Intrinsics,
    vo: Vec<Pose>,
    gt: Option<Vec<Pose>>,
    flows: Option<Vec<FlowField>>,
    opts: &IngestOptions,
) -> Result<SequenceData, DataError> {
    let n = raw.len();
    let mismatch = |what: String| DataError::CountMismatch { id: id.into(), what };
    if n < 2 {
        return Err(mismatch(format!("{n} frames")));
    }
    if vo.len() + 1 != n {
        return Err(mismatch(format!("{n} frames but {} prior relatives", vo.len())));
    }
    if let Some(g) = &gt {
        if g.len() + 1 != n {
            return Err(mismatch(format!("{n} frames but {} ground-truth relatives", g.len())));
        }
    }
    let stats = ChannelStats::for_channels(opts.channels);
    let mut resized = Vec::with_capacity(n);
    for img in raw {
        if img.height() != k.height || img.width() != k.width {
            return Err(mismatch(format!(
                "frame is {}x{}, intrinsics are for {}x{}",
                img.height(),
                img.width(),
                k.height,
                k.width
            )));
        }
        resized.push(resize_bilinear(&match_channels(img, opts.channels), opts.height, opts.width)?);
    }
    let flows = match flows {
        Some(f) => {
            if f.len() + 1 != n {
                return Err(mismatch(format!("{n} frames but {} flows", f.len())));
            }
            for fl in &f {
                if fl.height() != opts.height || fl.width() != opts.width {
                    return Err(mismatch(format!(
                        "flow is {}x{}, network input is {}x{}",
                        fl.height(),
                        fl.width(),
                        opts.height,
                        opts.width
                    )));
                }
            }
            f
        }
        None => resized
            .windows(2)
            .map(|w| compute_flow(&w[0], &w[1]))
            .collect::<Result<_, _>>()?,
    };
    let frames = resized
        .iter()
        .map(|img| preprocess(img, opts.height, opts.width, &stats))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SequenceData {
        id: id.into(),
        frames,
        flows,
        vo,
        gt,
        intrinsics: k.resized(opts.height, opts.width),
    })
}

/// Loads a manifest's sequence: frames are resized and whitened, pose files
/// are converted to relatives, and counts are checked.
pub fn ingest_kitti(manifest: &SequenceManifest, opts: &IngestOptions) -> Result<SequenceData, DataError> {
    let paths = list_files(&manifest.images, &IMAGE_EXTENSIONS)?;
    let raw = paths.iter().map(|p| read_image(p)).collect::<Result<Vec<_>, _>>()?;
    let first = raw.first().ok_or_else(|| DataError::CountMismatch {
        id: manifest.id.clone(),
        what: format!("no images in {}", manifest.images.display()),
    })?;
    let text = fs::read_to_string(&manifest.intrinsics).map_err(io_err(&manifest.intrinsics))?;
    let k = parse_calibration(&text, (first.height(), first.width()))?;
    let relatives = |path: &Path| -> Result<Vec<Pose>, DataError> {
        let global = read_kitti_poses(path)?;
        if global.len() != raw.len() {
            return Err(DataError::CountMismatch {
                id: manifest.id.clone(),
                what: format!("{} frames but {} poses in {}", raw.len(), global.len(), path.display()),
            });
        }
        Ok(Trajectory::from_global(global)?.relatives())
    };
    let vo = relatives(&manifest.vo)?;
    let gt = manifest.gt.as_deref().map(relatives).transpose()?;
    let flows = match &manifest.flows {
        Some(dir) => Some(
            list_files(dir, &["flo"])?
                .iter()
                .map(|p| read_flow(p))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    assemble_sequence(&manifest.id, raw, &k, vo, gt, flows, opts)
}

/// World geometry seen by the synthetic camera. The camera starts at the
/// origin looking down `+z` with `+y` pointing down.
#[derive(Clone, Debug, PartialEq)]
pub enum DepthModel {
    /// The plane `z = depth`.
    Plane { depth: f64 },
    /// Planes `z = depths[i]` covering the bands
    /// `x in [x0 + i * band, x0 + (i + 1) * band)`.
    MultiPlane { depths: Vec<f64>, x0: f64, band: f64 },
    /// Interior of the vertical cylinder `x^2 + z^2 = radius^2`, closed by
    /// a floor at `y = floor` and a ceiling at `y = -ceiling`.
    Enclosure { radius: f64, floor: f64, ceiling: f64 },
}

impl DepthModel {
    fn validate(&self) -> Result<(), DataError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let ok = match self {
            DepthModel::Plane { depth } => pos(*depth),
            DepthModel::MultiPlane { depths, x0, band } => {
                !depths.is_empty() && depths.iter().all(|d| pos(*d)) && x0.is_finite() && pos(*band)
            }
            DepthModel::Enclosure {
                radius,
                floor,
                ceiling,
            } => pos(*radius) && pos(*floor) && pos(*ceiling),
        };
        if ok {
            Ok(())
        } else {
            Err(DataError::Config(format!("depths and sizes must be positive: {self:?}")))
        }
    }

    /// Ray parameter of the nearest hit, `origin + t * dir` with `t > 0`.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let plane = |axis: usize, at: f64| -> Option<f64> {
            if d[axis].abs() < 1e-12 {
                return None;
            }
            let t = (at - o[axis]) / d[axis];
            (t > 0.0).then_some(t)
        };
        match self {
            DepthModel::Plane { depth } => plane(2, *depth),
            DepthModel::MultiPlane { depths, x0, band } => depths
                .iter()
                .enumerate()
                .filter_map(|(i, z)| {
                    let t = plane(2, *z)?;
                    let x = o.x + t * d.x;
                    let lo = x0 + i as f64 * band;
                    (x >= lo && x < lo + band).then_some(t)
                })
                .min_by(f64::total_cmp),
            DepthModel::Enclosure {
                radius,
                floor,
                ceiling,
            } => {
                let a = d.x * d.x + d.z * d.z;
                let wall = if a > 1e-12 {
                    let b = o.x * d.x + o.z * d.z;
                    let c = o.x * o.x + o.z * o.z - radius * radius;
                    let disc = b * b - a * c;
                    (disc >= 0.0).then(|| (-b + disc.sqrt()) / a).filter(|t| *t > 0.0)
                } else {
                    None
                };
                [wall, plane(1, *floor), plane(1, -*ceiling)]
                    .into_iter()
                    .flatten()
                    .min_by(f64::total_cmp)
            }
        }
    }
}

/// Smooth random intensity field in `(0, 1)`: a squashed sum of plane
/// waves with wavelengths in `[min_wavelength, max_wavelength]` metres.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    waves: Vec<(Vector3<f64>, f64)>,
    gain: f64,
}

impl Texture {
    pub fn new(seed: u64, components: usize, min_wavelength: f64, max_wavelength: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let waves = (0..components)
            .map(|_| {
                let dir = loop {
                    let v = Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
                    if v.norm() > 1e-6 {
                        break v.normalize();
                    }
                };
                let lambda = min_wavelength * (max_wavelength / min_wavelength).powf(rng.random::<f64>());
                (dir * (std::f64::consts::TAU / lambda), rng.random::<f64>() * std::f64::consts::TAU)
            })
            .collect();
        Self {
            waves,
            gain: (2.0 / components.max(1) as f64).sqrt(),
        }
    }

    pub fn sample(&self, p: &Vector3<f64>) -> f64 {
        let s: f64 = self.waves.iter().map(|(k, phase)| (k.dot(p) + phase).sin()).sum();
        0.5 + 0.5 * (0.8 * self.gain * s).tanh()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneConfig {
    /// Seeds the texture and, offset, the prior noise.
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub hfov_deg: f64,
    pub depth: DepthModel,
    /// Camera motion twists `log(M_t)`, one per frame pair.
    pub motion: Vec<Twist>,
    /// Prior bias per frame pair; a single entry applies to every pair.
    pub bias: Vec<Twist>,
    /// Standard deviation of the Gaussian prior noise per twist component.
    pub noise_std: [f64; 6],
    pub texture_wavelengths: (f64, f64),
    pub texture_components: usize,
    /// Samples per pixel side; 2 renders a 2x2 grid per pixel.
    pub supersample: usize,
}

impl SyntheticSceneConfig {
    /// Straight forward motion in front of a plane.
    pub fn plane(seed: u64, frames: usize, step: f64, depth: f64) -> Self {
        Self {
            seed,
            height: 96,
            width: 128,
            hfov_deg: 90.0,
            depth: DepthModel::Plane { depth },
            motion: vec![Twist::from_array([0.0, 0.0, step, 0.0, 0.0, 0.0]); frames.saturating_sub(1)],
            bias: vec![Twist::zero()],
            noise_std: [0.0; 6],
            texture_wavelengths: (0.5, 4.0),
            texture_components: 32,
            supersample: 2,
        }
    }

    /// `laps` laps of a stadium circuit inside a closed room. Straights
    /// take `straight_steps` steps of `step` metres, each half turn
    /// `turn_steps` steps, so every lap closes exactly.
    pub fn stadium(seed: u64, laps: usize, straight_steps: usize, turn_steps: usize, step: f64) -> Self {
        let turn_radius = turn_steps as f64 * step / std::f64::consts::PI;
        let half = 0.5 * straight_steps as f64 * step;
        let straight = Twist::from_array([0.0, 0.0, step, 0.0, 0.0, 0.0]);
        let turn = Twist::from_array([0.0, 0.0, step, 0.0, step / turn_radius, 0.0]);
        let mut lap = Vec::new();
        for _ in 0..2 {
            lap.extend(std::iter::repeat_n(straight, straight_steps));
            lap.extend(std::iter::repeat_n(turn, turn_steps));
        }
        // start mid-straight so the circuit is centred on the room
        let shift = straight_steps / 2;
        lap.rotate_left(shift);
        let motion: Vec<Twist> = std::iter::repeat_n(lap, laps).flatten().collect();
        Self {
            depth: DepthModel::Enclosure {
                radius: half + turn_radius + 5.0,
                floor: 1.6,
                ceiling: 3.0,
            },
            motion,
            texture_wavelengths: (1.0, 8.0),
            ..Self::plane(seed, 0, 0.0, 1.0)
        }
    }

    /// Circuits start mid-straight; shifting the start sideways by the
    /// turn radius centres them on the room.
    fn start(&self) -> Pose {
        if !matches!(self.depth, DepthModel::Enclosure { .. }) {
            return Pose::identity();
        }
        match self.motion.iter().find(|m| m.rotational.y != 0.0) {
            Some(m) => Pose::from_translation(Vector3::new(-m.translational.z / m.rotational.y, 0.0, 0.0)),
            None => Pose::identity(),
        }
    }

    pub fn with_bias(mut self, bias: Twist, noise_std: [f64; 6]) -> Self {
        self.bias = vec![bias];
        self.noise_std = noise_std;
        self
    }

    pub fn frames(&self) -> usize {
        self.motion.len() + 1
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.height, self.width, self.hfov_deg.to_radians())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.height < 32 || self.width < 32 {
            return Err(DataError::Config(format!(
                "image is {}x{}, need at least 32x32",
                self.height, self.width
            )));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(DataError::Config(format!("field of view {} deg", self.hfov_deg)));
        }
        self.depth.validate()?;
        if self.bias.len() != 1 && self.bias.len() != self.motion.len() {
            return Err(DataError::Config(format!(
                "{} bias twists for {} motions",
                self.bias.len(),
                self.motion.len()
            )));
        }
        if self.noise_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(DataError::Config("noise std must be finite and non-negative".into()));
        }
        let (lo, hi) = self.texture_wavelengths;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) || self.texture_components == 0 || self.supersample == 0 {
            return Err(DataError::Config("texture parameters must be positive".into()));
        }
        if self.motion.iter().chain(&self.bias).any(|t| !t.is_finite()) {
            return Err(DataError::Config("non-finite twist".into()));
        }
        Ok(())
    }
}

/// Rendered sequence with exact ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    /// Intensities in `(0, 1)`.
    pub images: Vec<ImageBuffer>,
    /// Depth along the optical axis at every pixel centre.
    pub depths: Vec<DepthMap>,
    /// World-from-camera poses, the first being the identity.
    pub poses: Vec<Pose>,
    pub gt: Vec<Pose>,
    pub vo: Vec<Pose>,
    pub intrinsics: Intrinsics,
}

/// One frame seen from world-from-camera pose `g`: intensities, depths and
/// the fraction of pixels that hit the scene.
pub fn render_frame(
    cfg: &SyntheticSceneConfig,
    texture: &Texture,
    g: &Pose,
) -> Result<(ImageBuffer, DepthMap, f64), DataError> {
    let k = cfg.intrinsics();
    let (h, w) = (cfg.height, cfg.width);
    let s = cfg.supersample;
    let mut img = Vec::with_capacity(h * w);
    let mut depth = Vec::with_capacity(h * w);
    let mut hits = 0usize;
    let origin = *g.translation();
    let cast = |u: f64, v: f64| -> Result<Option<(f64, Vector3<f64>)>, DataError> {
        let ray = backproject(Vector2::new(u, v), 1.0, &k)?;
        let dir = g.rotation() * ray;
        Ok(cfg.depth.intersect(&origin, &dir).map(|t| (t, origin + dir * t)))
    };
    for y in 0..h {
        for x in 0..w {
            let centre = cast(x as f64, y as f64)?;
            depth.push(centre.map_or(BACKGROUND_DEPTH, |(t, _)| t));
            hits += centre.is_some() as usize;
            let mut acc = 0.0;
            for sy in 0..s {
                for sx in 0..s {
                    let du = (sx as f64 + 0.5) / s as f64 - 0.5;
                    let dv = (sy as f64 + 0.5) / s as f64 - 0.5;
                    acc += cast(x as f64 + du, y as f64 + dv)?.map_or(0.5, |(_, p)| texture.sample(&p));
                }
            }
            img.push(acc / (s * s) as f64);
        }
    }
    Ok((
        ImageBuffer::new(h, w, 1, img)?,
        DepthMap::new(h, w, depth)?,
        hits as f64 / (h * w) as f64,
    ))
}

/// Renders every scripted pose and derives ground-truth and biased prior
/// relatives `T_vo = exp(bias + noise) * T_gt`.
pub fn generate_synthetic(cfg: &SyntheticSceneConfig) -> Result<SyntheticSequence, DataError> {
    cfg.validate()?;
    let (lo, hi) = cfg.texture_wavelengths;
    let texture = Texture::new(cfg.seed, cfg.texture_components, lo, hi);
    let start = cfg.start();
    let mut world = vec![start];
    for m in &cfg.motion {
        let last = *world.last().expect("nonempty");
        world.push(last.compose(&exp_se3(m)));
    }
    let mut images = Vec::with_capacity(world.len());
    let mut depths = Vec::with_capacity(world.len());
    for (i, g) in world.iter().enumerate() {
        let (img, d, coverage) = render_frame(cfg, &texture, g)?;
        if coverage == 0.0 {
            return Err(DataError::OutOfView(i));
        }
        images.push(img);
        depths.push(d);
    }
    let traj = Trajectory::from_global(world)?;
    let gt = traj.relatives();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e_6f69_7365);
    let noise: Vec<Normal<f64>> = cfg
        .noise_std
        .iter()
        .map(|s| Normal::new(0.0, *s).expect("validated std"))
        .collect();
    let vo = gt
        .iter()
        .enumerate()
        .map(|(t, rel)| {
            let b = cfg.bias[if cfg.bias.len() == 1 { 0 } else { t }].to_array();
            let mut xi = [0.0; 6];
            for i in 0..6 {
                xi[i] = b[i] + noise[i].sample(&mut rng);
            }
            exp_se3(&Twist::from_array(xi)).compose(rel)
        })
        .collect();
    Ok(SyntheticSequence {
        images,
        depths,
        poses: traj.poses().to_vec(),
        gt,
        vo,
        intrinsics: cfg.intrinsics(),
    })
}

impl SyntheticSequence {
    /// Training-ready sequence at the rendered resolution.
    pub fn to_sequence_data(&self, id: &str, channels: usize) -> Result<SequenceData, DataError> {
        let k = self.intrinsics;
        assemble_sequence(
            id,
            self.images.clone(),
            &k,
            self.vo.clone(),
            Some(self.gt.clone()),
            None,
            &IngestOptions {
                height: k.height,
                width: k.width,
                channels,
            },
        )
    }

    /// Writes `images/NNNNNN.pgm`, `intrinsics.txt`, `gt.txt`, `vo.txt` and
    /// `manifest.txt` into `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path, id: &str) -> Result<PathBuf, DataError> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(io_err(&images))?;
        for (i, img) in self.images.iter().enumerate() {
            write_pnm(&images.join(format!("{i:06}.pgm")), img)?;
        }
        let intrinsics = dir.join("intrinsics.txt");
        write_intrinsics(&intrinsics, &self.intrinsics)?;
        let gt = dir.join("gt.txt");
        write_kitti_poses(&gt, compound(&self.gt)?.poses())?;
        let vo = dir.join("vo.txt");
        write_kitti_poses(&vo, compound(&self.vo)?.poses())?;
        let manifest = SequenceManifest {
            id: id.into(),
            images,
            intrinsics,
            gt: Some(gt),
            vo,
            flows: None,
        };
        let path = dir.join("manifest.txt");
        write_atomic(&path, manifest.to_text(dir).as_bytes()).map_err(io_err(&path))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::correct_sequence;
    use crate::geometry::log_so3;
    use proptest::prelude::*;

    fn small(motion: Vec<Twist>) -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            height: 32,
            width: 40,
            supersample: 1,
            motion,
            ..SyntheticSceneConfig::plane(3, 0, 0.0, 6.0)
        }
    }

    #[test]
    fn identity_line_parses() {
        let p = parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1 0\n", "x").unwrap();
        assert_eq!(p, vec![Pose::identity()]);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = "1 0 0 0 0 1 0 0 0 0 1 0\n\n1 0 0 0 0 1 0 0 0 0 1 0 5\n";
        match parse_kitti_poses(text, "poses.txt") {
            Err(DataError::MalformedLine { path, line, .. }) => {
                assert_eq!(path, "poses.txt");
                assert_eq!(line, 3);
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1 x", "p").is_err());
        assert!(parse_kitti_poses("2 0 0 0 0 1 0 0 0 0 1 0", "p").is_err());
    }

    #[test]
    fn slightly_off_rotations_are_projected() {
        let p = parse_kitti_poses("1.00001 0 0 0 0 1 0 0 0 0 1 0", "p").unwrap();
        assert!((p[0].rotation() - nalgebra::Matrix3::identity()).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn pose_file_round_trip_is_bit_exact(
            v in proptest::collection::vec(-3.0f64..3.0, 6 * 5),
        ) {
            let poses: Vec<Pose> = v.chunks(6).map(|c| exp_se3(&Twist::from_array(c.try_into().unwrap()))).collect();
            let text = format_kitti_poses(&poses);
            let back = parse_kitti_poses(&text, "mem").unwrap();
            for (a, b) in poses.iter().zip(&back) {
                let (ra, rb) = (a.to_rows(), b.to_rows());
                for i in 0..12 {
                    prop_assert_eq!(ra[i].to_bits(), rb[i].to_bits());
                }
            }
            prop_assert_eq!(format_kitti_poses(&back), text);
        }
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let base = Path::new("/data/seq");
        let m = SequenceManifest::parse(
            "id = 09 # comment\nimages = img\nintrinsics = /abs/k.txt\nvo = vo.txt\ngt = gt.txt\n",
            base,
            "m",
        )
        .unwrap();
        assert_eq!(m.images, base.join("img"));
        assert_eq!(m.intrinsics, PathBuf::from("/abs/k.txt"));
        assert_eq!(m.flows, None);
        assert_eq!(SequenceManifest::parse(&m.to_text(base), base, "m").unwrap(), m);
        assert!(SequenceManifest::parse("id = a\nimages = i\nintrinsics = k\n", base, "m").is_err());
        assert!(SequenceManifest::parse("id = a\ncolour = red\n", base, "m").is_err());
    }

    #[test]
    fn kitti_calibration_is_accepted() {
        let calib = "P0: 718.856 0 607.1928 0 0 718.856 185.2157 0 0 0 1 0\nP1: 1 0 0 0 0 1 0 0 0 0 1 0\n";
        let k = parse_calibration(calib, (376, 1241)).unwrap();
        assert_eq!((k.fu, k.fv, k.cu, k.cv, k.height, k.width), (718.856, 718.856, 607.1928, 185.2157, 376, 1241));
        assert!(parse_calibration("nonsense", (10, 10)).is_err());
    }

    #[test]
    fn zero_motion_frames_are_identical() {
        let seq = generate_synthetic(&small(vec![Twist::zero(); 3])).unwrap();
        assert!(seq.images.windows(2).all(|w| w[0] == w[1]));
        assert!(seq.depths.iter().all(|d| d.data().iter().all(|v| (v - 6.0).abs() < 1e-12)));
    }

    #[test]
    fn unbiased_priors_equal_ground_truth() {
        let motion = vec![Twist::from_array([0.1, 0.0, 0.5, 0.0, 0.02, 0.0]); 4];
        let seq = generate_synthetic(&small(motion)).unwrap();
        assert_eq!(seq.vo, seq.gt);
    }

    #[test]
    fn textures_have_contrast() {
        let seq = generate_synthetic(&small(vec![])).unwrap();
        let d = seq.images[0].data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!(var.sqrt() > 0.05, "std {}", var.sqrt());
        assert!(d.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn out_of_view_is_an_error() {
        // turned around, the camera faces away from the plane
        let motion = vec![Twist::from_array([0.0, 0.0, 0.0, 0.0, std::f64::consts::PI, 0.0])];
        assert!(matches!(generate_synthetic(&small(motion)), Err(DataError::OutOfView(1))));
    }

    #[test]
    fn yaw_bias_accumulates_linearly() {
        let mut cfg = small(vec![Twist::from_array([0.0, 0.0, 0.05, 0.0, 0.0, 0.0]); 100]);
        cfg.bias = vec![Twist::from_array([0.0, 0.0, 0.0, 0.0, 0.3f64.to_radians(), 0.0])];
        let seq = generate_synthetic(&cfg).unwrap();
        let vo = compound(&seq.vo).unwrap();
        let gt = compound(&seq.gt).unwrap();
        let rel = gt.poses()[100].inverse().compose(&vo.poses()[100]);
        let heading = log_so3(rel.rotation()).unwrap().norm().to_degrees();
        assert!((heading - 30.0).abs() < 1e-9, "{heading}");
    }

    #[test]
    fn inverse_bias_correction_restores_ground_truth() {
        let b = Twist::from_array([0.01, -0.02, 0.03, 0.004, -0.005, 0.006]);
        let motion = vec![Twist::from_array([0.0, 0.0, 0.4, 0.0, 0.01, 0.0]); 6];
        let cfg = small(motion).with_bias(b, [0.0; 6]);
        let seq = generate_synthetic(&cfg).unwrap();
        let neg = Twist::from_array(b.to_array().map(|v| -v));
        let fixed = correct_sequence(&seq.vo, &vec![neg; seq.vo.len()], false).unwrap();
        for (a, g) in fixed.iter().zip(&seq.gt) {
            assert!(a.distance(g) < 1e-9);
        }
    }

    #[test]
    fn rendering_agrees_with_reprojection() {
        // a pixel's world point reprojects into the next frame where that
        // frame sees the same depth along its own ray
        let motion = vec![Twist::from_array([0.3, 0.0, 0.5, 0.0, 0.05, 0.0])];
        let seq = generate_synthetic(&small(motion)).unwrap();
        let k = seq.intrinsics;
        let (x, y) = (20usize, 16usize);
        let p = backproject(Vector2::new(x as f64, y as f64), seq.depths[0].get(x, y), &k).unwrap();
        let q = seq.gt[0].transform_point(&p);
        let u = crate::imaging::project(q, &k).unwrap();
        // on a plane, inverse depth is affine in pixel coordinates
        let (x0, y0) = (u.x.floor() as usize, u.y.floor() as usize);
        let (fx, fy) = (u.x - x0 as f64, u.y - y0 as f64);
        let d = &seq.depths[1];
        let inv = |x: usize, y: usize| 1.0 / d.get(x, y);
        let interp = inv(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + inv(x0 + 1, y0) * fx * (1.0 - fy)
            + inv(x0, y0 + 1) * (1.0 - fx) * fy
            + inv(x0 + 1, y0 + 1) * fx * fy;
        assert!((interp - 1.0 / q.z).abs() < 1e-9, "{interp} vs {}", 1.0 / q.z);
    }

    #[test]
    fn stadium_closes_and_stays_in_view() {
        let cfg = SyntheticSceneConfig {
            height: 32,
            width: 40,
            supersample: 1,
            ..SyntheticSceneConfig::stadium(1, 1, 4, 6, 1.5)
        };
        let seq = generate_synthetic(&cfg).unwrap();
        let last = seq.poses.last().unwrap();
        assert!(last.distance(&Pose::identity()) < 1e-9);
        assert!(seq.depths.iter().all(|d| d.data().iter().all(|v| *v < BACKGROUND_DEPTH)));
    }

    #[test]
    fn multi_plane_depth_is_piecewise_constant() {
        let mut cfg = small(vec![]);
        cfg.depth = DepthModel::MultiPlane {
            depths: vec![4.0, 8.0],
            x0: -20.0,
            band: 20.0,
        };
        let seq = generate_synthetic(&cfg).unwrap();
        let row: Vec<f64> = (0..40).map(|x| seq.depths[0].get(x, 10)).collect();
        assert!(row.iter().all(|d| *d == 4.0 || *d == 8.0));
        assert_eq!(row[0], 4.0);
        assert_eq!(row[39], 8.0);
    }

    #[test]
    fn synthetic_files_ingest_back() {
        let dir = tempfile::tempdir().unwrap();
        let motion = vec![Twist::from_array([0.0, 0.0, 0.3, 0.0, 0.01, 0.0]); 3];
        let seq = generate_synthetic(&small(motion)).unwrap();
        let path = seq.write(dir.path(), "s").unwrap();
        let m = SequenceManifest::load(&path, Some(dir.path())).unwrap();
        let data = ingest_kitti(
            &m,
            &IngestOptions {
                height: 32,
                width: 40,
                channels: 1,
            },
        )
        .unwrap();
        assert_eq!(data.frames.len(), 4);
        assert_eq!(data.flows.len(), 3);
        for (a, b) in data.gt.as_ref().unwrap().iter().zip(&seq.gt) {
            assert!(a.distance(b) < 1e-12);
        }
    }
}
