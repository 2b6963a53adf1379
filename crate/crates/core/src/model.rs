//! The corrector network: a strided convolutional encoder shared by a pose
//! head (which also sees the prior twist), an inverse-depth decoder with
//! per-level predictions fed forward, and an explainability decoder.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, BatchNormStats, Graph, Precision, Tensor, Var};
use crate::fsutil::write_atomic;
use crate::geometry::Twist;
use crate::imaging::{DepthMap, FlowField, ImageBuffer};
use crate::trainer::AdamState;
use crate::warploss::{ExplainabilityMask, WarpLossError};

pub const ENCODER_KERNELS: [usize; 5] = [7, 5, 3, 3, 3];
pub const ENCODER_BASE_CHANNELS: [usize; 5] = [16, 32, 64, 128, 256];
pub const DECODER_BASE_CHANNELS: [usize; 5] = [128, 64, 32, 16, 16];
pub const POSE_HIDDEN: [usize; 2] = [512, 128];
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Flow inputs are clipped to this many pixels.
pub const FLOW_CLIP: f64 = 32.0;
/// The mask is squeezed affinely into `[MASK_MARGIN, 1 - MASK_MARGIN]` so
/// that it stays strictly inside (0, 1) under 32-bit rounding.
pub const MASK_MARGIN: f64 = 1e-6;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DPCCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Loss(#[from] WarpLossError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("i/o error on {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel multiplier applied to every convolutional layer.
    pub width: f64,
    /// Channels per image (1 or 3).
    pub image_channels: usize,
    pub height: usize,
    pub width_px: usize,
    /// Inverse-depth floor: depth = 1 / (inv + eps_inv).
    pub eps_inv: f64,
    /// Multiplier on the raw 6-vector produced by the pose head.
    pub correction_scale: f64,
    /// Initial bias of the inverse-depth prediction layers.
    pub inv_depth_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 0.25,
            image_channels: 1,
            height: 96,
            width_px: 128,
            eps_inv: 0.01,
            correction_scale: 0.01,
            inv_depth_bias: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: &str| Err(ModelError::Config(s.into()));
        if !(self.width > 0.0 && self.width.is_finite()) {
            return bad("width must be positive");
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return bad("image_channels must be 1 or 3");
        }
        if self.height < 32 || self.width_px < 32 {
            return bad("input must be at least 32x32");
        }
        if !(self.eps_inv > 0.0) || !(self.correction_scale > 0.0) || !(self.inv_depth_bias > 0.0) {
            return bad("eps_inv, correction_scale and inv_depth_bias must be positive");
        }
        Ok(())
    }

    pub fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width).round() as usize).max(1)
    }

    pub fn input_channels(&self) -> usize {
        2 * self.image_channels + 2
    }

    /// Spatial sizes from the input (index 0) to the bottleneck (index 5).
    pub fn spatial_sizes(&self) -> [(usize, usize); 6] {
        let mut s = [(self.height, self.width_px); 6];
        for i in 1..6 {
            s[i] = (s[i - 1].0.div_ceil(2), s[i - 1].1.div_ceil(2));
        }
        s
    }
}

/// A named parameter block. Non-trainable blocks hold batch-norm running
/// statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Receives weight decay.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectorParams {
    pub config: ModelConfig,
    blocks: Vec<ParamBlock>,
    index: HashMap<String, usize>,
}

impl CorrectorParams {
    fn from_blocks(config: ModelConfig, blocks: Vec<ParamBlock>) -> Self {
        let index = blocks.iter().enumerate().map(|(i, b)| (b.name.clone(), i)).collect();
        Self {
            config,
            blocks,
            index,
        }
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock> {
        self.index.get(name).map(|i| &self.blocks[*i])
    }

    pub fn num_trainable(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.trainable)
            .map(|b| b.tensor.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.tensor.data().iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest 32-bit float (the storage format).
    pub fn round_to_f32(&mut self) {
        for b in &mut self.blocks {
            for v in b.tensor.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Registers every block on `g`: trainable blocks as gradient leaves,
    /// the rest as constants.
    pub fn register(&self, g: &mut Graph) -> ParamVars {
        let vars = self
            .blocks
            .iter()
            .map(|b| {
                if b.trainable {
                    g.param(&b.tensor)
                } else {
                    g.constant(b.tensor.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }

    /// Moves running statistics towards the batch statistics of a
    /// training-mode forward pass (unbiased variance).
    pub fn update_running_stats(&mut self, stats: &[BatchNormStats]) {
        for (i, s) in stats.iter().enumerate() {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            let mean_idx = self.index[&format!("enc{i}.bn.running_mean")];
            for (r, m) in self.blocks[mean_idx].tensor.data_mut().iter_mut().zip(&s.mean) {
                *r = ((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m) as f32 as f64;
            }
            let var_idx = self.index[&format!("enc{i}.bn.running_var")];
            for (r, v) in self.blocks[var_idx].tensor.data_mut().iter_mut().zip(&s.var) {
                *r = ((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias) as f32 as f64;
            }
        }
    }
}

/// Graph handles of every parameter block, in block order.
pub struct ParamVars {
    pub vars: Vec<Var>,
}

/// Seeded fan-in-scaled uniform initialisation. Layers followed by a ReLU
/// use the bound `sqrt(6 / fan_in)`, output layers `sqrt(1 / fan_in)` and
/// the pose output a tenth of that, so fresh corrections stay near the
/// identity; biases start at zero except the inverse-depth predictions.
pub fn init_params(seed: u64, config: &ModelConfig) -> Result<CorrectorParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    let uniform = |shape: Vec<usize>, fan_in: usize, gain: f64, rng: &mut ChaCha8Rng| {
        let bound = (gain / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    };
    let push = |blocks: &mut Vec<ParamBlock>, name: String, tensor: Tensor, trainable: bool, decay: bool| {
        blocks.push(ParamBlock {
            name,
            tensor,
            trainable,
            decay,
        })
    };

    let mut cin = config.input_channels();
    for i in 0..5 {
        let (c, k) = (config.channels(ENCODER_BASE_CHANNELS[i]), ENCODER_KERNELS[i]);
        let w = uniform(vec![c, cin, k, k], cin * k * k, 6.0, &mut rng);
        push(&mut blocks, format!("enc{i}.w"), w, true, false);
        push(&mut blocks, format!("enc{i}.b"), Tensor::zeros(vec![c]), true, false);
        push(&mut blocks, format!("enc{i}.bn.gamma"), Tensor::filled(vec![c], 1.0), true, false);
        push(&mut blocks, format!("enc{i}.bn.beta"), Tensor::zeros(vec![c]), true, false);
        push(&mut blocks, format!("enc{i}.bn.running_mean"), Tensor::zeros(vec![c]), false, false);
        push(&mut blocks, format!("enc{i}.bn.running_var"), Tensor::filled(vec![c], 1.0), false, false);
        cin = c;
    }
    let bottleneck = cin;
    let (bh, bw) = config.spatial_sizes()[5];
    let mut fin = bottleneck * bh * bw + 6;
    for (i, fout) in POSE_HIDDEN.iter().enumerate() {
        let w = uniform(vec![*fout, fin], fin, 6.0, &mut rng);
        push(&mut blocks, format!("pose.fc{i}.w"), w, true, true);
        push(&mut blocks, format!("pose.fc{i}.b"), Tensor::zeros(vec![*fout]), true, false);
        fin = *fout;
    }
    let w = uniform(vec![6, fin], fin, 0.01, &mut rng);
    push(&mut blocks, "pose.out.w".into(), w, true, true);
    push(&mut blocks, "pose.out.b".into(), Tensor::zeros(vec![6]), true, false);

    for branch in ["depth", "mask"] {
        let mut cin = bottleneck;
        for j in 0..5 {
            let c = config.channels(DECODER_BASE_CHANNELS[j]);
            let w = uniform(vec![cin, c, 3, 3], cin * 9, 6.0, &mut rng);
            push(&mut blocks, format!("{branch}.up{j}.w"), w, true, false);
            push(&mut blocks, format!("{branch}.up{j}.b"), Tensor::zeros(vec![c]), true, false);
            cin = c;
            if branch == "depth" {
                let w = uniform(vec![1, c, 3, 3], c * 9, 1.0, &mut rng);
                push(&mut blocks, format!("depth.pred{j}.w"), w, true, false);
                let b = Tensor::filled(vec![1], config.inv_depth_bias);
                push(&mut blocks, format!("depth.pred{j}.b"), b, true, false);
                cin += 1;
            }
        }
        if branch == "mask" {
            let w = uniform(vec![1, cin, 3, 3], cin * 9, 1.0, &mut rng);
            push(&mut blocks, "mask.out.w".into(), w, true, false);
            push(&mut blocks, "mask.out.b".into(), Tensor::zeros(vec![1]), true, false);
        }
    }
    let mut params = CorrectorParams::from_blocks(config.clone(), blocks);
    params.round_to_f32();
    Ok(params)
}

/// Batch of network inputs.
#[derive(Clone, Debug)]
pub struct NetInput {
    /// `[N, 2C+2, H, W]`: source, target and clipped flow planes.
    pub x: Tensor,
    /// `[N, 6]` prior twists.
    pub vo: Tensor,
}

/// One sample: whitened source and target, flow from source to target and
/// the prior twist.
pub struct SampleInput<'a> {
    pub source: &'a ImageBuffer,
    pub target: &'a ImageBuffer,
    pub flow: &'a FlowField,
    pub vo_twist: Twist,
}

pub fn assemble_input(config: &ModelConfig, samples: &[SampleInput]) -> Result<NetInput, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::Input("empty batch".into()));
    }
    let (h, w, c) = (config.height, config.width_px, config.image_channels);
    let mut x = Vec::with_capacity(samples.len() * config.input_channels() * h * w);
    let mut vo = Vec::with_capacity(samples.len() * 6);
    for s in samples {
        for img in [s.source, s.target] {
            if img.height() != h || img.width() != w || img.channels() != c {
                return Err(ModelError::Input(format!(
                    "image {}x{}x{} for a {h}x{w}x{c} model",
                    img.height(),
                    img.width(),
                    img.channels()
                )));
            }
            x.extend(img.to_planar());
        }
        if s.flow.height() != h || s.flow.width() != w {
            return Err(ModelError::Input("flow size".into()));
        }
        x.extend(s.flow.to_planar_clipped(FLOW_CLIP));
        vo.extend(s.vo_twist.to_array());
    }
    let n = samples.len();
    Ok(NetInput {
        x: Tensor::new(vec![n, config.input_channels(), h, w], x)?,
        vo: Tensor::new(vec![n, 6], vo)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train { dropout: f64 },
    Eval,
}

pub struct ForwardVars {
    /// `[N,6]` correction twists.
    pub correction: Var,
    /// `[N,1,H,W]` inverse depth.
    pub inverse_depth: Var,
    /// `[N,1,H,W]` depth.
    pub depth: Var,
    /// `[N,1,H,W]` explainability weights.
    pub mask: Var,
    /// Batch statistics of each encoder block (training mode only).
    pub bn_stats: Vec<BatchNormStats>,
}

/// Records the network on `g`.
pub fn forward_graph<R: Rng>(
    g: &mut Graph,
    params: &CorrectorParams,
    pv: &ParamVars,
    input: &NetInput,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardVars, ModelError> {
    let cfg = &params.config;
    let p = |name: &str| pv.vars[params.index[name]];
    let sizes = cfg.spatial_sizes();
    let want = [cfg.input_channels(), cfg.height, cfg.width_px];
    if input.x.shape().len() != 4 || input.x.shape()[1..] != want {
        return Err(ModelError::Input(format!("input shape {:?}", input.x.shape())));
    }
    let n = input.x.shape()[0];
    if input.vo.shape() != [n, 6] {
        return Err(ModelError::Input(format!("prior shape {:?}", input.vo.shape())));
    }

    let mut h = g.constant(input.x.clone());
    let mut bn_stats = Vec::new();
    for i in 0..5 {
        let k = ENCODER_KERNELS[i];
        let conv = g.conv2d(h, p(&format!("enc{i}.w")), p(&format!("enc{i}.b")), 2, k / 2)?;
        let act = g.relu(conv)?;
        let (gamma, beta) = (p(&format!("enc{i}.bn.gamma")), p(&format!("enc{i}.bn.beta")));
        h = match mode {
            Mode::Train { .. } => {
                let (out, stats) = g.batch_norm_train(act, gamma, beta, BN_EPS)?;
                bn_stats.push(stats);
                out
            }
            Mode::Eval => {
                let rm = params.get(&format!("enc{i}.bn.running_mean")).expect("block exists");
                let rv = params.get(&format!("enc{i}.bn.running_var")).expect("block exists");
                g.batch_norm_eval(act, gamma, beta, rm.tensor.data(), rv.tensor.data(), BN_EPS)?
            }
        };
    }
    let bottleneck = h;

    let flat_len = g.value(bottleneck).len() / n;
    let flat = g.reshape(bottleneck, vec![n, flat_len])?;
    let vo = g.constant(input.vo.clone());
    let mut z = g.concat(&[flat, vo])?;
    for i in 0..POSE_HIDDEN.len() {
        let l = g.linear(z, p(&format!("pose.fc{i}.w")), p(&format!("pose.fc{i}.b")))?;
        z = g.relu(l)?;
    }
    // dropout only feeds the linear output layer, so the evaluation-mode
    // output is exactly the expected training-mode output
    if let Mode::Train { dropout } = mode {
        z = g.dropout(z, dropout, rng)?;
    }
    let raw = g.linear(z, p("pose.out.w"), p("pose.out.b"))?;
    let correction = g.scale(raw, cfg.correction_scale)?;

    let mut feat = bottleneck;
    let mut inverse_depth = None;
    for j in 0..5 {
        let up = upsample(g, feat, p(&format!("depth.up{j}.w")), p(&format!("depth.up{j}.b")), sizes[4 - j])?;
        let pred = g.conv2d(up, p(&format!("depth.pred{j}.w")), p(&format!("depth.pred{j}.b")), 1, 1)?;
        let pred = g.relu(pred)?;
        feat = g.concat(&[up, pred])?;
        inverse_depth = Some(pred);
    }
    let inverse_depth = inverse_depth.expect("five decoder levels");
    let shifted = g.add_scalar(inverse_depth, cfg.eps_inv)?;
    let depth = g.reciprocal(shifted)?;

    let mut feat = bottleneck;
    for j in 0..5 {
        feat = upsample(g, feat, p(&format!("mask.up{j}.w")), p(&format!("mask.up{j}.b")), sizes[4 - j])?;
    }
    let logits = g.conv2d(feat, p("mask.out.w"), p("mask.out.b"), 1, 1)?;
    let sig = g.sigmoid(logits)?;
    let squeezed = g.scale(sig, 1.0 - 2.0 * MASK_MARGIN)?;
    let mask = g.add_scalar(squeezed, MASK_MARGIN)?;

    Ok(ForwardVars {
        correction,
        inverse_depth,
        depth,
        mask,
        bn_stats,
    })
}

/// Stride-2 transposed convolution to exactly `target` size, then ReLU.
fn upsample(g: &mut Graph, x: Var, w: Var, b: Var, target: (usize, usize)) -> Result<Var, ModelError> {
    let s = g.shape(x);
    let (ih, iw) = (s[2], s[3]);
    let op = (target.0 + 1 - 2 * ih, target.1 + 1 - 2 * iw);
    let up = g.conv_transpose2d(x, w, b, 2, 1, op)?;
    Ok(g.relu(up)?)
}

/// Per-sample outputs of an evaluation-mode forward pass.
#[derive(Clone, Debug)]
pub struct CorrectorOutput {
    pub correction: Twist,
    /// One channel, strictly positive (includes the floor).
    pub inverse_depth: ImageBuffer,
    pub depth: DepthMap,
    pub mask: ExplainabilityMask,
}

/// Evaluation-mode forward pass on a batch.
pub fn predict(params: &CorrectorParams, input: &NetInput) -> Result<Vec<CorrectorOutput>, ModelError> {
    let mut g = Graph::new(Precision::Single);
    let pv = params.register(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward_graph(&mut g, params, &pv, input, Mode::Eval, &mut rng)?;
    let n = input.x.shape()[0];
    let (h, w) = (params.config.height, params.config.width_px);
    let corr = g.value(out.correction).data();
    let inv = g.value(out.inverse_depth).data();
    let mask = g.value(out.mask).data();
    let depth = g.value(out.depth).data();
    let mut res = Vec::with_capacity(n);
    for i in 0..n {
        let c: [f64; 6] = corr[i * 6..i * 6 + 6].try_into().expect("six entries");
        let inv_i: Vec<f64> = inv[i * h * w..(i + 1) * h * w]
            .iter()
            .map(|v| v + params.config.eps_inv)
            .collect();
        res.push(CorrectorOutput {
            correction: Twist::from_array(c),
            inverse_depth: ImageBuffer::new(h, w, 1, inv_i).map_err(|e| ModelError::Input(e.to_string()))?,
            depth: DepthMap::new(h, w, depth[i * h * w..(i + 1) * h * w].to_vec())
                .map_err(|e| ModelError::Input(e.to_string()))?,
            mask: ExplainabilityMask::new(h, w, mask[i * h * w..(i + 1) * h * w].to_vec())?,
        });
    }
    Ok(res)
}

/// `1 / (inv + eps_inv)`; `inv` must be non-negative.
pub fn depth_from_inverse(inv: &[f64], eps_inv: f64) -> Vec<f64> {
    inv.iter().map(|v| 1.0 / (v.max(0.0) + eps_inv)).collect()
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_block(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len() as u32);
    for d in shape {
        put_u32(buf, *d as u32);
    }
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Serialises parameters and, optionally, optimiser state.
pub fn encode_checkpoint(params: &CorrectorParams, adam: Option<&AdamState>) -> Vec<u8> {
    let cfg = &params.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    buf.extend_from_slice(&(cfg.width as f32).to_le_bytes());
    for v in [cfg.image_channels, cfg.height, cfg.width_px] {
        put_u32(&mut buf, v as u32);
    }
    for v in [cfg.eps_inv, cfg.correction_scale, cfg.inv_depth_bias] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    put_u32(&mut buf, params.blocks.len() as u32);
    for b in &params.blocks {
        let flags = format!("{}{}", if b.trainable { "T" } else { "-" }, if b.decay { "D" } else { "-" });
        put_block(&mut buf, &format!("{}:{}", flags, b.name), b.tensor.shape(), b.tensor.data());
    }
    buf.extend_from_slice(&adam.map(|a| a.step).unwrap_or(0).to_le_bytes());
    if let Some(a) = adam {
        for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
            put_block(&mut buf, &format!("adam.m.{i}"), &[m.len()], m);
            put_block(&mut buf, &format!("adam.v.{i}"), &[v.len()], v);
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err("truncated".into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn block(&mut self) -> Result<(String, Vec<usize>, Vec<f64>), String> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| "block name is not utf-8")?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.f32().map(f64::from)).collect::<Result<Vec<_>, _>>()?;
        Ok((name, shape, data))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CorrectorParams, Option<AdamState>), String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let width = c.f32()? as f64;
    let (image_channels, height, width_px) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let config = ModelConfig {
        width,
        image_channels,
        height,
        width_px,
        eps_inv: c.f64()?,
        correction_scale: c.f64()?,
        inv_depth_bias: c.f64()?,
    };
    config.validate().map_err(|e| e.to_string())?;
    let count = c.u32()? as usize;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let (name, shape, data) = c.block()?;
        let (flags, name) = name.split_once(':').ok_or("block name without flags")?;
        let flags = flags.as_bytes();
        if flags.len() != 2 {
            return Err(format!("bad flags on block {name}"));
        }
        blocks.push(ParamBlock {
            name: name.to_string(),
            tensor: Tensor::new(shape, data).map_err(|e| e.to_string())?,
            trainable: flags[0] == b'T',
            decay: flags[1] == b'D',
        });
    }
    let step = c.u64()?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    while c.pos < c.bytes.len() {
        let (_, _, dm) = c.block()?;
        let (_, _, dv) = c.block()?;
        m.push(dm);
        v.push(dv);
    }
    let params = CorrectorParams::from_blocks(config.clone(), blocks);
    let reference = init_params(0, &config).map_err(|e| e.to_string())?;
    if reference.blocks.len() != params.blocks.len()
        || reference
            .blocks
            .iter()
            .zip(&params.blocks)
            .any(|(a, b)| a.name != b.name || a.tensor.shape() != b.tensor.shape())
    {
        return Err("parameter layout does not match the configuration".into());
    }
    let adam = if m.is_empty() && step == 0 {
        None
    } else {
        Some(AdamState { step, m, v })
    };
    Ok((params, adam))
}

pub fn save_checkpoint(path: &Path, params: &CorrectorParams, adam: Option<&AdamState>) -> Result<(), ModelError> {
    write_atomic(path, &encode_checkpoint(params, adam)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(CorrectorParams, Option<AdamState>), ModelError> {
    let io = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    decode_checkpoint(&bytes).map_err(|reason| ModelError::Checkpoint {
        path: path.display().to_string(),
        reason,
    })
}
