//! Dataset assembly, optimisation and epoch selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::autodiff::{AutodiffError, BatchNormStats, Graph, Precision, Tensor, Var};
use crate::datakit::write_kitti_poses;
use crate::evaluation::{compound, correct_sequence, count_loop_closures, rescale_monocular, LoopClosureConfig, Trajectory};
use crate::fsutil::write_atomic;
use crate::geometry::{log_se3, rotation_magnitude, Pose, Twist};
use crate::imaging::{FlowField, ImageBuffer, Intrinsics};
use crate::model::{
    assemble_input, forward_graph, init_params, predict, save_checkpoint, CorrectorParams, Mode,
    ModelConfig, ModelError, NetInput, ParamVars, SampleInput,
};
use crate::warploss::{
    explainability_loss, gradient_criterion_loss, loss_graph, photometric_loss, rotation_gate_open,
    rotation_gated_loss, stack_images, total_loss, warp, LossConfig, LossGraphInputs, LossTerms,
    WarpLossError,
};
use crate::DepthMap;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence {id}: {what}")]
    CountMismatch { id: String, what: String },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("no epoch has a usable gradient-criterion loss")]
    AllSentinel,
    #[error("i/o error on {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] WarpLossError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Data(#[from] crate::datakit::DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Monocular,
    Stereo,
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "monocular" => Ok(TrainMode::Monocular),
            "stereo" => Ok(TrainMode::Stereo),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Monocular => "monocular",
            TrainMode::Stereo => "stereo",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub dropout_p: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub mode: TrainMode,
    /// Stereo priors have metric scale, so only rotation is corrected.
    pub rotation_only: bool,
    /// Rescale monocular priors to ground-truth displacement before use.
    pub rescale_monocular: bool,
    pub loop_closure: LoopClosureConfig,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn stereo() -> Self {
        Self {
            lr_init: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 4,
            batch_size: 32,
            max_epochs: 30,
            dropout_p: 0.5,
            weight_decay: 4e-6,
            loss: LossConfig::default(),
            seed: 0,
            mode: TrainMode::Stereo,
            rotation_only: true,
            rescale_monocular: false,
            loop_closure: LoopClosureConfig::default(),
            model: ModelConfig::default(),
        }
    }

    pub fn monocular() -> Self {
        Self {
            lr_init: 5e-5,
            lr_decay_every: 10,
            mode: TrainMode::Monocular,
            rotation_only: false,
            rescale_monocular: true,
            ..Self::stereo()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |s: String| Err(TrainError::Config(s));
        if !(self.lr_init > 0.0) || !(self.lr_decay_factor > 0.0) {
            return bad("learning rate and decay factor must be positive".into());
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("lr_decay_every, batch_size and max_epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p = {} outside [0, 1)", self.dropout_p));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        self.loss.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// Learning rate of a 1-based epoch: decayed once per completed
    /// `lr_decay_every` epochs counted from epoch 0.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr_init * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Flat `key = value` text; `#` starts a comment.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let lc = &self.loop_closure;
        let m = &self.model;
        let entries: Vec<(&str, String)> = vec![
            ("mode", self.mode.to_string()),
            ("lr_init", self.lr_init.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("dropout_p", self.dropout_p.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("rotation_only", self.rotation_only.to_string()),
            ("rescale_monocular", self.rescale_monocular.to_string()),
            ("lambda_exp", self.loss.lambda_exp.to_string()),
            ("lambda_rot", self.loss.lambda_rot.to_string()),
            ("gamma_rot", self.loss.gamma_rot.to_string()),
            ("gamma_grad", self.loss.gamma_grad.to_string()),
            ("loop_trans_thresh", lc.trans_thresh.to_string()),
            ("loop_rot_thresh", lc.rot_thresh.to_degrees().to_string()),
            ("loop_forward_min", lc.forward_min.to_string()),
            ("loop_forward_axis", lc.forward_axis.to_string()),
            ("width", m.width.to_string()),
            ("image_channels", m.image_channels.to_string()),
            ("height", m.height.to_string()),
            ("width_px", m.width_px.to_string()),
            ("eps_inv", m.eps_inv.to_string()),
            ("correction_scale", m.correction_scale.to_string()),
            ("inv_depth_bias", m.inv_depth_bias.to_string()),
        ];
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses a run config. A `mode` key selects the defaults; every other
    /// key overrides one field. `loop_rot_thresh` is in degrees.
    pub fn from_config_text(text: &str) -> Result<Self, TrainError> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", no + 1)))?;
            pairs.push((no + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mode = pairs
            .iter()
            .find(|(_, k, _)| k == "mode")
            .map(|(_, _, v)| v.parse::<TrainMode>())
            .transpose()
            .map_err(TrainError::Config)?
            .unwrap_or(TrainMode::Stereo);
        let mut c = match mode {
            TrainMode::Stereo => Self::stereo(),
            TrainMode::Monocular => Self::monocular(),
        };
        for (no, k, v) in pairs {
            let err = |e: String| TrainError::Config(format!("line {no}: {k}: {e}"));
            fn p<T: std::str::FromStr>(v: &str) -> Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                v.parse::<T>().map_err(|e| e.to_string())
            }
            match k.as_str() {
                "mode" => {}
                "lr_init" => c.lr_init = p(&v).map_err(err)?,
                "lr_decay_factor" => c.lr_decay_factor = p(&v).map_err(err)?,
                "lr_decay_every" => c.lr_decay_every = p(&v).map_err(err)?,
                "batch_size" => c.batch_size = p(&v).map_err(err)?,
                "max_epochs" => c.max_epochs = p(&v).map_err(err)?,
                "dropout_p" => c.dropout_p = p(&v).map_err(err)?,
                "weight_decay" => c.weight_decay = p(&v).map_err(err)?,
                "seed" => c.seed = p(&v).map_err(err)?,
                "rotation_only" => c.rotation_only = p(&v).map_err(err)?,
                "rescale_monocular" => c.rescale_monocular = p(&v).map_err(err)?,
                "lambda_exp" => c.loss.lambda_exp = p(&v).map_err(err)?,
                "lambda_rot" => c.loss.lambda_rot = p(&v).map_err(err)?,
                "gamma_rot" => c.loss.gamma_rot = p(&v).map_err(err)?,
                "gamma_grad" => c.loss.gamma_grad = p(&v).map_err(err)?,
                "loop_trans_thresh" => c.loop_closure.trans_thresh = p(&v).map_err(err)?,
                "loop_rot_thresh" => c.loop_closure.rot_thresh = p::<f64>(&v).map_err(err)?.to_radians(),
                "loop_forward_min" => c.loop_closure.forward_min = p(&v).map_err(err)?,
                "loop_forward_axis" => c.loop_closure.forward_axis = p(&v).map_err(err)?,
                "width" => c.model.width = p(&v).map_err(err)?,
                "image_channels" => c.model.image_channels = p(&v).map_err(err)?,
                "height" => c.model.height = p(&v).map_err(err)?,
                "width_px" => c.model.width_px = p(&v).map_err(err)?,
                "eps_inv" => c.model.eps_inv = p(&v).map_err(err)?,
                "correction_scale" => c.model.correction_scale = p(&v).map_err(err)?,
                "inv_depth_bias" => c.model.inv_depth_bias = p(&v).map_err(err)?,
                _ => return Err(TrainError::Config(format!("line {no}: unknown key {k:?}"))),
            }
        }
        if c.loop_closure.forward_axis > 2 {
            return Err(TrainError::Config("loop_forward_axis must be 0, 1 or 2".into()));
        }
        c.validate()?;
        Ok(c)
    }
}

/// Minimum inter-frame motion for a pair to be used in training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionThresholds {
    /// Metres.
    pub translation: f64,
    /// Radians.
    pub rotation: f64,
}

impl Default for MotionThresholds {
    fn default() -> Self {
        Self {
            translation: 1.5,
            rotation: 0.4f64.to_radians(),
        }
    }
}

/// A training pair `(t, t + 1)` of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub sequence: String,
    /// Source frame index; the target is `index + 1`.
    pub index: usize,
    pub vo_prior: Pose,
}

/// Keeps pairs whose prior moves at least `translation` metres or rotates
/// at least `rotation` radians. `sequences` holds `(id, frame count, prior
/// relatives)`.
pub fn build_dataset(
    sequences: &[(String, usize, Vec<Pose>)],
    thresholds: &MotionThresholds,
) -> Result<Vec<SamplePair>, TrainError> {
    let mut out = Vec::new();
    for (id, frames, vo) in sequences {
        if vo.len() + 1 != *frames {
            return Err(TrainError::CountMismatch {
                id: id.clone(),
                what: format!("{frames} frames but {} relative poses", vo.len()),
            });
        }
        for (index, p) in vo.iter().enumerate() {
            if p.translation().norm() >= thresholds.translation || rotation_magnitude(p) >= thresholds.rotation {
                out.push(SamplePair {
                    sequence: id.clone(),
                    index,
                    vo_prior: *p,
                });
            }
        }
    }
    Ok(out)
}

/// One line per pair: sequence id, source index and the 12 pose entries
/// of the prior.
pub fn format_pairs(pairs: &[SamplePair]) -> String {
    let mut s = String::new();
    for p in pairs {
        let _ = write!(s, "{} {}", p.sequence, p.index);
        for v in p.vo_prior.to_rows() {
            let _ = write!(s, " {v:.16e}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_pairs(text: &str) -> Result<Vec<SamplePair>, TrainError> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let err = |why: &str| TrainError::Config(format!("pairs line {}: {why}", no + 1));
        if f.len() != 14 {
            return Err(err("expected id, index and 12 pose entries"));
        }
        let index = f[1].parse().map_err(|_| err("bad index"))?;
        let mut rows = [0.0; 12];
        for (r, v) in rows.iter_mut().zip(&f[2..]) {
            *r = v.parse().map_err(|_| err("bad number"))?;
        }
        out.push(SamplePair {
            sequence: f[0].to_string(),
            index,
            vo_prior: Pose::from_rows_projected(&rows, crate::datakit::POSE_FILE_TOL)?,
        });
    }
    Ok(out)
}

/// First and second moment estimates of every trainable block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &CorrectorParams) -> Self {
        let sizes: Vec<usize> = params
            .blocks()
            .iter()
            .filter(|b| b.trainable)
            .map(|b| b.tensor.len())
            .collect();
        Self {
            step: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update of the trainable blocks. Blocks flagged
/// for decay get `weight_decay * w` added to their gradient. Weights and
/// moments are stored as 32-bit floats, so checkpoints resume exactly.
pub fn adam_step(
    params: &mut CorrectorParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if grads.len() != state.m.len() {
        return Err(TrainError::Config(format!(
            "{} gradient blocks for {} trainable blocks",
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let trainable = params.blocks_mut().iter_mut().filter(|b| b.trainable);
    for (((block, g), m), v) in trainable.zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let decay = if block.decay { weight_decay } else { 0.0 };
        let w = block.tensor.data_mut();
        if g.len() != w.len() {
            return Err(TrainError::Config(format!("gradient size mismatch on {}", block.name)));
        }
        for i in 0..w.len() {
            let gi = g[i] + decay * w[i];
            m[i] = (ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi) as f32 as f64;
            v[i] = (ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi) as f32 as f64;
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            w[i] = (w[i] - update) as f32 as f64;
        }
    }
    Ok(())
}

/// A preprocessed sequence at network resolution.
#[derive(Clone, Debug)]
pub struct SequenceData {
    pub id: String,
    /// Whitened frames.
    pub frames: Vec<ImageBuffer>,
    /// Flow from frame `t` to `t + 1`.
    pub flows: Vec<FlowField>,
    /// Prior relatives `T_t`.
    pub vo: Vec<Pose>,
    /// Ground-truth relatives, when known.
    pub gt: Option<Vec<Pose>>,
    pub intrinsics: Intrinsics,
}

impl SequenceData {
    pub fn validate(&self) -> Result<(), TrainError> {
        let n = self.frames.len();
        let mismatch = |what: String| TrainError::CountMismatch {
            id: self.id.clone(),
            what,
        };
        if n < 2 {
            return Err(mismatch(format!("{n} frames")));
        }
        if self.flows.len() + 1 != n || self.vo.len() + 1 != n {
            return Err(mismatch(format!(
                "{n} frames, {} flows, {} priors",
                self.flows.len(),
                self.vo.len()
            )));
        }
        if let Some(gt) = &self.gt {
            if gt.len() + 1 != n {
                return Err(mismatch(format!("{n} frames, {} ground-truth poses", gt.len())));
            }
        }
        Ok(())
    }

    /// Priors as used for training and correction: rescaled to
    /// ground-truth displacement when requested and possible.
    pub fn priors(&self, rescale: bool) -> Result<Vec<Pose>, TrainError> {
        match (&self.gt, rescale) {
            (Some(gt), true) => Ok(rescale_monocular(&self.vo, &compound(gt)?)?),
            _ => Ok(self.vo.clone()),
        }
    }

    pub fn input(&self, t: usize, prior: &Pose) -> Result<SampleInput<'_>, TrainError> {
        Ok(SampleInput {
            source: &self.frames[t],
            target: &self.frames[t + 1],
            flow: &self.flows[t],
            vo_twist: log_se3(prior)?,
        })
    }
}

/// Per-epoch validation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `None` when no validation pixel passed the gradient threshold.
    pub grad_loss: Option<f64>,
    pub loop_closures: usize,
    pub checkpoint_path: PathBuf,
    /// Corrected validation relatives.
    pub corrected: Vec<Pose>,
}

pub fn records_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,grad_loss,loop_closures,checkpoint_path\n");
    for r in records {
        let grad = r.grad_loss.map(|v| format!("{v:.17e}")).unwrap_or_else(|| "none".into());
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{},{},{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            grad,
            r.loop_closures,
            r.checkpoint_path.display()
        );
    }
    out
}

/// Parses the record CSV back; corrected trajectories are not part of the
/// file.
pub fn parse_records_csv(text: &str) -> Result<Vec<EpochRecord>, TrainError> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(6, ',').collect();
        let err = || TrainError::Config(format!("records line {}: {line:?}", no + 1));
        if f.len() != 6 {
            return Err(err());
        }
        out.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| err())?,
            train_loss: f[1].parse().map_err(|_| err())?,
            val_loss: f[2].parse().map_err(|_| err())?,
            grad_loss: if f[3] == "none" { None } else { Some(f[3].parse().map_err(|_| err())?) },
            loop_closures: f[4].parse().map_err(|_| err())?,
            checkpoint_path: PathBuf::from(f[5]),
            corrected: Vec::new(),
        });
    }
    Ok(out)
}

/// Epoch with the lowest gradient-criterion loss; ties go to the earliest.
pub fn select_epoch_gradient(records: &[EpochRecord]) -> Result<usize, TrainError> {
    let mut best: Option<(usize, f64)> = None;
    for r in records {
        if let Some(v) = r.grad_loss {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((r.epoch, v));
            }
        }
    }
    best.map(|(e, _)| e).ok_or(TrainError::AllSentinel)
}

/// Epoch with the most loop closures; ties go to the earliest. Returns the
/// first epoch with a warning when no epoch closes a loop.
pub fn select_epoch_loopclosure(records: &[EpochRecord]) -> Result<usize, TrainError> {
    let first = records.first().ok_or(TrainError::Empty("records"))?;
    let mut best = first;
    for r in records {
        if r.loop_closures > best.loop_closures {
            best = r;
        }
    }
    if best.loop_closures == 0 {
        warn!("no loop closures in any epoch; selecting epoch {}", first.epoch);
    }
    Ok(best.epoch)
}

/// Network outputs for one validation pair.
struct Prediction {
    correction: Twist,
    depth: DepthMap,
    mask: crate::warploss::ExplainabilityMask,
}

fn predict_sequence(
    params: &CorrectorParams,
    seq: &SequenceData,
    priors: &[Pose],
    batch: usize,
) -> Result<Vec<Prediction>, TrainError> {
    let mut out = Vec::with_capacity(priors.len());
    let indices: Vec<usize> = (0..priors.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let inputs = chunk
            .iter()
            .map(|t| seq.input(*t, &priors[*t]))
            .collect::<Result<Vec<_>, _>>()?;
        let net = assemble_input(&params.config, &inputs)?;
        for o in predict(params, &net)? {
            out.push(Prediction {
                correction: o.correction,
                depth: o.depth,
                mask: o.mask,
            });
        }
    }
    Ok(out)
}

/// Corrected relatives of a whole sequence.
pub fn correct_with_model(
    params: &CorrectorParams,
    seq: &SequenceData,
    rescale: bool,
    rotation_only: bool,
) -> Result<Vec<Pose>, TrainError> {
    seq.validate()?;
    let priors = seq.priors(rescale)?;
    let preds = predict_sequence(params, seq, &priors, 16)?;
    let corr: Vec<Twist> = preds.iter().map(|p| p.correction).collect();
    Ok(correct_sequence(&priors, &corr, rotation_only)?)
}

/// Validation loss, gradient-criterion loss and corrected relatives.
pub fn validate_sequence(
    params: &CorrectorParams,
    seq: &SequenceData,
    cfg: &TrainConfig,
) -> Result<(f64, Option<f64>, Vec<Pose>), TrainError> {
    seq.validate()?;
    let priors = seq.priors(cfg.rescale_monocular && cfg.mode == TrainMode::Monocular)?;
    let preds = predict_sequence(params, seq, &priors, 16)?;
    let corr: Vec<Twist> = preds.iter().map(|p| p.correction).collect();
    let corrected = correct_sequence(&priors, &corr, cfg.rotation_only)?;
    let mut terms = Vec::with_capacity(preds.len());
    let (mut grad_sum, mut grad_n) = (0.0, 0usize);
    for (t, p) in preds.iter().enumerate() {
        let source = &seq.frames[t];
        let (recon, valid) = warp(&seq.frames[t + 1], &p.depth, &corrected[t], &seq.intrinsics)?;
        let phot = photometric_loss(&recon, source, &p.mask, &valid)?;
        terms.push(LossTerms {
            rotation: rotation_gated_loss(&phot, &priors[t], cfg.loss.gamma_rot),
            explainability: explainability_loss(&p.mask),
            photometric: phot,
        });
        if let Some(v) = gradient_criterion_loss(&recon, source, &valid, cfg.loss.gamma_grad)?.value() {
            grad_sum += v;
            grad_n += 1;
        }
    }
    let val = total_loss(&terms, &cfg.loss)?;
    let grad = (grad_n > 0).then(|| grad_sum / grad_n as f64);
    Ok((val, grad, corrected))
}

/// Records the training loss of a minibatch on `g`, with `pv` holding the
/// graph handles of every parameter block.
#[allow(clippy::too_many_arguments)]
pub fn record_loss(
    g: &mut Graph,
    params: &CorrectorParams,
    pv: &ParamVars,
    input: &NetInput,
    images: (&Tensor, &Tensor),
    priors: &[Pose],
    intrinsics: &Intrinsics,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Vec<BatchNormStats>), TrainError> {
    let mode = Mode::Train { dropout: cfg.dropout_p };
    let out = forward_graph(g, params, pv, input, mode, rng)?;
    let mut correction = out.correction;
    if cfg.rotation_only {
        let keep: Vec<f64> = (0..priors.len()).flat_map(|_| [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).collect();
        correction = g.mul_const(correction, keep).map_err(ModelError::from)?;
    }
    let exp = g.se3_exp(correction).map_err(ModelError::from)?;
    let pose = g.compose_right(exp, priors).map_err(ModelError::from)?;
    let source = g.constant(images.0.clone());
    let counterpart = g.constant(images.1.clone());
    let gates: Vec<bool> = priors.iter().map(|p| rotation_gate_open(p, cfg.loss.gamma_rot)).collect();
    let lg = loss_graph(
        g,
        &LossGraphInputs {
            source,
            counterpart,
            depth: out.depth,
            pose,
            mask: out.mask,
            gates: &gates,
            intrinsics,
        },
        &cfg.loss,
    )?;
    Ok((lg.total, out.bn_stats))
}

/// Loss and gradients of one minibatch; gradients are ordered like the
/// trainable blocks.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    params: &CorrectorParams,
    input: &NetInput,
    images: (&Tensor, &Tensor),
    priors: &[Pose],
    intrinsics: &Intrinsics,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    precision: Precision,
) -> Result<(f64, Vec<Vec<f64>>, Vec<BatchNormStats>), TrainError> {
    let mut g = Graph::new(precision);
    let pv = params.register(&mut g);
    let (total, stats) = record_loss(&mut g, params, &pv, input, images, priors, intrinsics, cfg, rng)?;
    let loss = g.scalar_value(total);
    g.backward(total).map_err(ModelError::from)?;
    let grads = params
        .blocks()
        .iter()
        .zip(&pv.vars)
        .filter(|(b, _)| b.trainable)
        .map(|(_, v)| g.grad(*v))
        .collect();
    Ok((loss, grads, stats))
}

/// Finite-difference check of the training loss with respect to every
/// trainable block, `opts.points` coordinates per block, in double
/// precision. Dropout masks are drawn from `seed` on every evaluation.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck_model(
    params: &CorrectorParams,
    input: &NetInput,
    images: (&Tensor, &Tensor),
    priors: &[Pose],
    intrinsics: &Intrinsics,
    cfg: &TrainConfig,
    seed: u64,
    opts: &GradcheckOptions,
) -> Result<Vec<(String, GradcheckReport)>, TrainError> {
    let mut out = Vec::new();
    for (i, block) in params.blocks().iter().enumerate() {
        if !block.trainable {
            continue;
        }
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var, AutodiffError> {
            let vars = params
                .blocks()
                .iter()
                .enumerate()
                .map(|(j, b)| if j == i { v[0] } else { g.constant(b.tensor.clone()) })
                .collect();
            let pv = ParamVars { vars };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            record_loss(g, params, &pv, input, images, priors, intrinsics, cfg, &mut rng)
                .map(|(v, _)| v)
                .map_err(|e| match e {
                    TrainError::Model(ModelError::Autodiff(a)) => a,
                    other => AutodiffError::ShapeMismatch {
                        op: "training loss",
                        detail: other.to_string(),
                    },
                })
        };
        let report = gradcheck(f, std::slice::from_ref(&block.tensor), opts).map_err(ModelError::from)?;
        out.push((block.name.clone(), report));
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub params: CorrectorParams,
    pub records: Vec<EpochRecord>,
    pub records_path: PathBuf,
}

/// Trains on `train` (pairs index into `sequences`) and validates on
/// `validation` after every epoch. Each epoch writes a checkpoint, the
/// corrected validation trajectory and the updated record CSV into
/// `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    sequences: &[SequenceData],
    pairs: &[SamplePair],
    validation: &SequenceData,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::Empty("training set"));
    }
    for s in sequences {
        s.validate()?;
    }
    validation.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let rescale = cfg.rescale_monocular && cfg.mode == TrainMode::Monocular;
    let priors: Vec<Vec<Pose>> = sequences.iter().map(|s| s.priors(rescale)).collect::<Result<_, _>>()?;
    let lookup = |id: &str| sequences.iter().position(|s| s.id == id);

    let mut params = init_params(cfg.seed, &cfg.model)?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut records = Vec::new();
    let records_path = out_dir.join("records.csv");
    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut batch_priors = Vec::with_capacity(chunk.len());
            let mut sources = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            let mut intrinsics = None;
            for &i in chunk {
                let pair = &pairs[i];
                let s = lookup(&pair.sequence).ok_or_else(|| TrainError::CountMismatch {
                    id: pair.sequence.clone(),
                    what: "unknown sequence".into(),
                })?;
                let seq = &sequences[s];
                if pair.index + 1 >= seq.frames.len() {
                    return Err(TrainError::CountMismatch {
                        id: seq.id.clone(),
                        what: format!("pair index {} out of range", pair.index),
                    });
                }
                let prior = priors[s][pair.index];
                inputs.push(seq.input(pair.index, &prior)?);
                batch_priors.push(prior);
                sources.push(&seq.frames[pair.index]);
                targets.push(&seq.frames[pair.index + 1]);
                match intrinsics {
                    None => intrinsics = Some(seq.intrinsics),
                    Some(k) if k != seq.intrinsics => {
                        return Err(TrainError::Config("sequences must share intrinsics".into()))
                    }
                    _ => {}
                }
            }
            let net = assemble_input(&params.config, &inputs)?;
            let images = (stack_images(&sources)?, stack_images(&targets)?);
            let k = intrinsics.expect("nonempty batch");
            let (loss, grads, stats) = batch_gradients(
                &params,
                &net,
                (&images.0, &images.1),
                &batch_priors,
                &k,
                cfg,
                &mut rng,
                Precision::Single,
            )
            .map_err(|e| match e {
                TrainError::Model(ModelError::Autodiff(ad)) => TrainError::NonFinite {
                    epoch,
                    batch: b,
                    detail: ad.to_string(),
                },
                other => other,
            })?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss}"),
                });
            }
            adam_step(&mut params, &grads, &mut adam, lr, cfg.weight_decay)?;
            params.update_running_stats(&stats);
            loss_sum += loss * chunk.len() as f64;
            loss_n += chunk.len();
        }
        let train_loss = loss_sum / loss_n as f64;
        let ckpt = out_dir.join(format!("epoch_{epoch:03}.ckpt"));
        save_checkpoint(&ckpt, &params, Some(&adam))?;
        let (val_loss, grad_loss, corrected) = validate_sequence(&params, validation, cfg)?;
        let traj = compound(&corrected)?;
        let loops = count_loop_closures(&traj, &cfg.loop_closure);
        write_kitti_poses(&out_dir.join(format!("epoch_{epoch:03}_val.txt")), traj.poses())?;
        info!(
            "epoch {epoch}: lr {lr:.3e} train {train_loss:.5} val {val_loss:.5} grad {} loops {loops}",
            grad_loss.map(|v| format!("{v:.5}")).unwrap_or_else(|| "none".into())
        );
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            grad_loss,
            loop_closures: loops,
            checkpoint_path: ckpt,
            corrected,
        });
        write_atomic(&records_path, records_csv(&records).as_bytes()).map_err(|source| TrainError::Io {
            path: records_path.display().to_string(),
            source,
        })?;
    }
    Ok(TrainOutcome {
        params,
        records,
        records_path,
    })
}

/// Trajectory of the validation ground truth, when present.
pub fn ground_truth(seq: &SequenceData) -> Result<Option<Trajectory>, TrainError> {
    seq.gt.as_ref().map(|g| compound(g)).transpose().map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{generate_synthetic, SyntheticSceneConfig};
    use crate::geometry::exp_se3;
    use nalgebra::Vector3;

    fn rel(t: f64, rot_deg: f64) -> Pose {
        exp_se3(&Twist::new(Vector3::new(0.0, 0.0, t), Vector3::new(0.0, rot_deg.to_radians(), 0.0)))
    }

    fn record(epoch: usize, grad: Option<f64>, loops: usize) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: 1.0,
            val_loss: 1.0,
            grad_loss: grad,
            loop_closures: loops,
            checkpoint_path: PathBuf::from(format!("epoch_{epoch:03}.ckpt")),
            corrected: Vec::new(),
        }
    }

    #[test]
    fn motion_thresholds_filter_pairs() {
        let vo = vec![rel(1.0, 0.2), rel(2.0, 0.0), rel(1.5, 0.0), rel(0.0, 0.5)];
        let pairs = build_dataset(&[("s".into(), 5, vo)], &MotionThresholds::default()).unwrap();
        let kept: Vec<usize> = pairs.iter().map(|p| p.index).collect();
        assert_eq!(kept, vec![1, 2, 3]);
        assert!(build_dataset(&[("s".into(), 3, vec![rel(2.0, 0.0)])], &MotionThresholds::default()).is_err());
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let cfg = ModelConfig {
            height: 32,
            width_px: 32,
            ..ModelConfig::default()
        };
        let mut params = init_params(0, &cfg).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let ones: Vec<Vec<f64>> = state.m.iter().map(|m| vec![1.0; m.len()]).collect();
        adam_step(&mut params, &ones, &mut state, 1e-3, 0.0).unwrap();
        for (a, b) in params.blocks().iter().zip(before.blocks()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                let delta = if a.trainable { -1e-3 } else { 0.0 };
                assert!((x - y - delta).abs() < 1e-6, "{}: {}", a.name, x - y);
            }
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_alone() {
        let cfg = ModelConfig {
            height: 32,
            width_px: 32,
            ..ModelConfig::default()
        };
        let mut params = init_params(1, &cfg).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let zeros: Vec<Vec<f64>> = state.m.iter().map(|m| vec![0.0; m.len()]).collect();
        for _ in 0..3 {
            adam_step(&mut params, &zeros, &mut state, 1e-3, 0.0).unwrap();
        }
        assert_eq!(params, before);
        assert!(adam_step(&mut params, &zeros[1..], &mut state, 1e-3, 0.0).is_err());
    }

    #[test]
    fn learning_rate_schedules() {
        assert!((TrainConfig::stereo().lr_at_epoch(8) - 2.5e-4).abs() < 1e-18);
        assert!((TrainConfig::monocular().lr_at_epoch(25) - 1.25e-5).abs() < 1e-18);
        assert_eq!(TrainConfig::stereo().lr_at_epoch(1), 1e-3);
    }

    #[test]
    fn gradient_selection() {
        let rs = |v: &[f64]| v.iter().enumerate().map(|(i, g)| record(i + 1, Some(*g), 0)).collect::<Vec<_>>();
        assert_eq!(select_epoch_gradient(&rs(&[0.5, 0.3, 0.4])).unwrap(), 2);
        assert_eq!(select_epoch_gradient(&rs(&[0.3, 0.3])).unwrap(), 1);
        assert_eq!(select_epoch_gradient(&rs(&[0.7])).unwrap(), 1);
        let with_sentinel = vec![record(1, None, 0), record(2, Some(0.9), 0)];
        assert_eq!(select_epoch_gradient(&with_sentinel).unwrap(), 2);
        assert!(matches!(select_epoch_gradient(&[record(1, None, 0)]), Err(TrainError::AllSentinel)));
    }

    #[test]
    fn loop_closure_selection() {
        let counts = [40, 87, 122, 122, 95];
        let rs: Vec<EpochRecord> = counts.iter().enumerate().map(|(i, c)| record(i + 1, None, *c)).collect();
        assert_eq!(select_epoch_loopclosure(&rs).unwrap(), 3);
        let none: Vec<EpochRecord> = (1..=4).map(|e| record(e, None, 0)).collect();
        assert_eq!(select_epoch_loopclosure(&none).unwrap(), 1);
        assert!(select_epoch_loopclosure(&[]).is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let pairs = vec![
            SamplePair {
                sequence: "09".into(),
                index: 4,
                vo_prior: rel(1.7, 0.3),
            },
            SamplePair {
                sequence: "10".into(),
                index: 0,
                vo_prior: rel(0.2, 2.0),
            },
        ];
        assert_eq!(parse_pairs(&format_pairs(&pairs)).unwrap(), pairs);
        assert!(parse_pairs("09 1 2 3").is_err());
    }

    #[test]
    fn records_round_trip() {
        let rs = vec![record(1, Some(0.125), 3), record(2, None, 0)];
        let back = parse_records_csv(&records_csv(&rs)).unwrap();
        assert_eq!(back, rs);
        assert!(parse_records_csv("header\n1,2\n").is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = TrainConfig::monocular();
        c.seed = 9;
        c.loss.lambda_exp = 0.3;
        c.model.width = 0.5;
        let back = TrainConfig::from_config_text(&c.to_config_text()).unwrap();
        assert!((back.loop_closure.rot_thresh - c.loop_closure.rot_thresh).abs() < 1e-15);
        c.loop_closure.rot_thresh = back.loop_closure.rot_thresh;
        assert_eq!(back, c);
        let partial = TrainConfig::from_config_text("mode = stereo\nbatch_size = 4 # small\n").unwrap();
        assert_eq!(partial.batch_size, 4);
        assert_eq!(partial.lr_init, 1e-3);
        assert!(TrainConfig::from_config_text("colour = red").is_err());
        assert!(TrainConfig::from_config_text("dropout_p = 1.5").is_err());
        assert!(TrainConfig::from_config_text("batch_size = many").is_err());
    }

    fn tiny_sequence(id: &str, seed: u64, frames: usize) -> SequenceData {
        let cfg = SyntheticSceneConfig {
            height: 32,
            width: 48,
            supersample: 1,
            ..SyntheticSceneConfig::plane(seed, frames, 0.4, 5.0)
        }
        .with_bias(Twist::from_array([0.0, 0.0, 0.0, 0.0, 0.3f64.to_radians(), 0.0]), [0.0; 6]);
        generate_synthetic(&cfg).unwrap().to_sequence_data(id, 1).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::stereo();
        c.batch_size = 4;
        c.max_epochs = 5;
        c.dropout_p = 0.0;
        c.model.height = 32;
        c.model.width_px = 48;
        c
    }

    #[test]
    fn overfitting_eight_pairs_lowers_the_loss() {
        let seq = tiny_sequence("a", 2, 9);
        let val = tiny_sequence("v", 3, 5);
        let pairs: Vec<SamplePair> = (0..8)
            .map(|i| SamplePair {
                sequence: "a".into(),
                index: i,
                vo_prior: seq.vo[i],
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.batch_size = 8;
        let out = train(&cfg, &[seq], &pairs, &val, dir.path()).unwrap();
        let losses: Vec<f64> = out.records.iter().map(|r| r.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        assert!(dir.path().join("epoch_005.ckpt").exists());
        assert!(dir.path().join("epoch_005_val.txt").exists());
        let parsed = parse_records_csv(&std::fs::read_to_string(&out.records_path).unwrap()).unwrap();
        assert_eq!(parsed.len(), 5);
        let (p, _) = crate::model::load_checkpoint(&parsed[4].checkpoint_path).unwrap();
        assert_eq!(p, out.params);
    }

    #[test]
    fn training_is_deterministic() {
        let seq = tiny_sequence("a", 4, 5);
        let pairs = build_dataset(&[("a".into(), 5, seq.vo.clone())], &MotionThresholds {
            translation: 0.1,
            rotation: 1.0,
        })
        .unwrap();
        let mut cfg = tiny_config();
        cfg.max_epochs = 2;
        cfg.dropout_p = 0.5;
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let a = train(&cfg, std::slice::from_ref(&seq), &pairs, &seq, d1.path()).unwrap();
        let b = train(&cfg, std::slice::from_ref(&seq), &pairs, &seq, d2.path()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.records[1].corrected, b.records[1].corrected);
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let seq = tiny_sequence("g", 5, 4);
        let mut cfg = tiny_config();
        cfg.model.width_px = 32;
        let seq = SequenceData {
            frames: seq.frames.iter().map(|f| crate::imaging::resize_bilinear(f, 32, 32).unwrap()).collect(),
            flows: vec![FlowField::zeros(32, 32); 3],
            intrinsics: seq.intrinsics.resized(32, 32),
            ..seq
        };
        let params = init_params(3, &cfg.model).unwrap();
        let priors = &seq.vo[..3];
        let inputs: Vec<SampleInput> = (0..3).map(|t| seq.input(t, &priors[t]).unwrap()).collect();
        let net = assemble_input(&cfg.model, &inputs).unwrap();
        let src: Vec<&ImageBuffer> = (0..3).map(|t| &seq.frames[t]).collect();
        let tgt: Vec<&ImageBuffer> = (1..4).map(|t| &seq.frames[t]).collect();
        let images = (stack_images(&src).unwrap(), stack_images(&tgt).unwrap());
        cfg.dropout_p = 0.5;
        let opts = GradcheckOptions {
            points: 3,
            step: 1e-4,
            freeze_branches: true,
            ..GradcheckOptions::default()
        };
        let reports = gradcheck_model(
            &params,
            &net,
            (&images.0, &images.1),
            priors,
            &seq.intrinsics,
            &cfg,
            11,
            &opts,
        )
        .unwrap();
        assert_eq!(reports.len(), params.blocks().iter().filter(|b| b.trainable).count());
        for (name, r) in &reports {
            assert!(r.max_rel_error <= 1e-6, "{name}: {r:?}");
        }
        let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
        assert!(checked >= reports.len(), "only {checked} coordinates checked");
    }

    #[test]
    fn every_parameter_group_gets_gradient() {
        let seq = tiny_sequence("g", 6, 5);
        let cfg = tiny_config();
        let params = init_params(2, &cfg.model).unwrap();
        let priors = &seq.vo[..4];
        let inputs: Vec<SampleInput> = (0..4).map(|t| seq.input(t, &priors[t]).unwrap()).collect();
        let net = assemble_input(&cfg.model, &inputs).unwrap();
        let src: Vec<&ImageBuffer> = (0..4).map(|t| &seq.frames[t]).collect();
        let tgt: Vec<&ImageBuffer> = (1..5).map(|t| &seq.frames[t]).collect();
        let images = (stack_images(&src).unwrap(), stack_images(&tgt).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, grads, stats) = batch_gradients(
            &params,
            &net,
            (&images.0, &images.1),
            priors,
            &seq.intrinsics,
            &cfg,
            &mut rng,
            Precision::Single,
        )
        .unwrap();
        assert!(loss.is_finite());
        assert_eq!(stats.len(), 5);
        let names: Vec<&str> = params.blocks().iter().filter(|b| b.trainable).map(|b| b.name.as_str()).collect();
        for (name, g) in names.iter().zip(&grads) {
            assert!(g.iter().any(|v| *v != 0.0), "{name} has an all-zero gradient");
        }
    }
}
