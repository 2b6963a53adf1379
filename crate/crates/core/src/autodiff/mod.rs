//! Tape-based reverse-mode differentiation over the fixed set of primitives
//! the corrector network and the loss need.
//!
//! A [`Graph`] records every primitive as it executes. Calling
//! [`Graph::backward`] walks the record in reverse and accumulates gradients
//! into every node that (transitively) depends on a leaf created with
//! `requires_grad`. A graph is single-use: record, backward, read gradients,
//! drop.
//!
//! Values are held as `f64`. In [`Precision::Single`] every primitive output
//! is rounded to the nearest `f32`, emulating 32-bit storage while sums keep
//! 64-bit accumulators. [`Precision::Double`] keeps full precision for
//! gradient checking.

mod dual;
pub mod gradcheck;
pub mod kernels;
mod ops;

pub use dual::Dual6;
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use ops::{BatchNormStats, WarpOutput};

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use thiserror::Error;

use crate::geometry::Pose;
use crate::imaging::Intrinsics;
use kernels::ConvGeom;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward called twice on the same tape")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("replayed branch record does not match {op}")]
    ReplayMismatch { op: &'static str },
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AutodiffError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Single,
    Double,
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulChannel(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Log(Var),
    Reciprocal(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Dropout(Var, Vec<f64>),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BilinearSample {
        img: Var,
        coords: Var,
    },
    Se3Exp {
        twist: Var,
        jacobian: Vec<f64>,
    },
    ComposeRight {
        pose: Var,
        right: Vec<Pose>,
    },
    WarpCoords {
        pose: Var,
        depth: Var,
        intrinsics: Intrinsics,
        valid: Vec<bool>,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Op,
}

/// Discrete decisions of one evaluation (ReLU activity, |.| signs,
/// sampling cells, validity), in execution order. Replaying them evaluates
/// nearby inputs on the same smooth piece of the function.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BranchRecord {
    decisions: Vec<Vec<u32>>,
}

enum BranchMode {
    Free,
    Record(Vec<Vec<u32>>),
    Replay(Vec<Vec<u32>>, usize),
}

/// Recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    consumed: bool,
    signature: DefaultHasher,
    branches: BranchMode,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::default())
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            consumed: false,
            signature: DefaultHasher::new(),
            branches: BranchMode::Free,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        if self.precision == Precision::Single {
            round_f32(&mut t.data);
        }
        self.nodes.push(Node {
            value: t,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Gradient accumulated by [`Graph::backward`]; zeros for nodes the loss
    /// does not depend on.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.data.len()])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every discrete branch taken so far (ReLU and |.| signs,
    /// sampling cells, validity decisions). Two evaluations with equal
    /// signatures ran through the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.signature.finish()
    }

    pub(crate) fn note_branch(&mut self, bits: u64) {
        self.signature.write_u64(bits);
    }

    /// Starts keeping the branch decisions of the following primitives.
    pub fn record_branches(&mut self) {
        self.branches = BranchMode::Record(Vec::new());
    }

    /// Makes the following primitives take their decisions from `record`
    /// instead of their inputs. Meant for forward evaluation only: backward
    /// still derives its masks from the values.
    pub fn replay_branches(&mut self, record: BranchRecord) {
        self.branches = BranchMode::Replay(record.decisions, 0);
    }

    /// Decisions kept since [`Graph::record_branches`].
    pub fn take_branch_record(&mut self) -> BranchRecord {
        match std::mem::replace(&mut self.branches, BranchMode::Free) {
            BranchMode::Record(decisions) => BranchRecord { decisions },
            other => {
                self.branches = other;
                BranchRecord::default()
            }
        }
    }

    /// Passes freshly computed decisions through the record/replay mode and
    /// folds the ones in effect into the branch signature.
    pub(crate) fn decide(&mut self, op: &'static str, fresh: Vec<u32>) -> Result<Vec<u32>, AutodiffError> {
        let used = match &mut self.branches {
            BranchMode::Free => fresh,
            BranchMode::Record(log) => {
                log.push(fresh.clone());
                fresh
            }
            BranchMode::Replay(log, pos) => {
                let d = log.get(*pos).filter(|d| d.len() == fresh.len()).cloned();
                *pos += 1;
                d.ok_or(AutodiffError::ReplayMismatch { op })?
            }
        };
        let h = used
            .iter()
            .fold(0xcbf29ce484222325u64, |h, d| (h ^ *d as u64).wrapping_mul(0x100000001b3));
        self.note_branch(h);
        Ok(used)
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, AutodiffError> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        if self.precision == Precision::Single {
            round_f32(&mut data);
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor { shape, data },
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape.clone();
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NotScalar(shape));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            ops::backward_node(node, g, before);
        }
        Ok(())
    }
}

pub(crate) fn round_f32(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = *x as f32 as f64;
    }
}

#[cfg(test)]
mod tests;
