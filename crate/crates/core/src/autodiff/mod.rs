//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! execution order. [`Graph::backward`] walks that record in reverse from a
//! scalar node and returns the gradient of every registered parameter as a
//! [`GradientMap`]. The record is consumed by the backward pass: handles
//! obtained before it are rejected afterwards.

mod gradcheck;
mod ops;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tensor::Tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport, ParamSet};
pub use ops::{softmax_last_axis as softmax_values, window_output, ConvGeometry, PoolGeometry};

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("node is not part of the active computation record")]
    MissingRecord,
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(AutodiffError::Contract(msg.into()))
}

/// Identifier of a trainable parameter, conventionally `model/param`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub String);

impl ParamId {
    pub fn new(owner: &str, name: &str) -> Self {
        ParamId(format!("{owner}/{name}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    generation: u64,
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone)]
pub struct GradientMap<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> GradientMap<T> {
    pub fn get(&self, id: &ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id)
    }

    pub fn get_str(&self, id: &str) -> Option<&Tensor<T>> {
        self.grads.get(&ParamId(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamId> {
        self.grads.keys()
    }

    pub fn contains(&self, id: &ParamId) -> bool {
        self.grads.contains_key(id)
    }

    pub fn all_zero(&self) -> bool {
        self.grads
            .values()
            .all(|t| t.data().iter().all(|x| x.is_zero()))
    }

    /// Adds `other` entry-wise, inserting parameters missing from `self`.
    pub fn accumulate(&mut self, other: &GradientMap<T>) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(mine) => {
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => {
                    self.grads.insert(id.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            for x in g.data_mut() {
                *x = *x * factor;
            }
        }
    }
}

pub(crate) enum Op<T> {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Softmax(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias { .. } => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Relu(..) => "relu",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Clamp { .. } => "clamp",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
            Op::SliceRows { .. } => "slice_rows",
        }
    }
}

pub(crate) struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// The computation record.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    generation: u64,
    strict: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Strict non-finite checking defaults to on in debug/test builds.
    pub fn new() -> Self {
        Self::with_strict(cfg!(debug_assertions))
    }

    pub fn with_strict(strict: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            generation: next_generation(),
            strict,
        }
    }

    pub fn strict(&self) -> bool {
        self.strict
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.generation != self.generation {
            return Err(AutodiffError::MissingRecord);
        }
        self.nodes.get(v.index).ok_or(AutodiffError::MissingRecord)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    pub(crate) fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        if self.strict && !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(Op::Constant, value)
    }

    /// A trainable leaf. Registering the same id twice is allowed; the
    /// gradients of both uses are summed under that id.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Result<Var> {
        self.push(Op::Param(id), value)
    }

    /// Reverse pass from a scalar node. Consumes the record: every handle
    /// issued before this call becomes invalid.
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap<T>> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.generation = next_generation();

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Param(_) = node.op {
                grads[i] = Some(g);
                continue;
            }
            ops::propagate(&nodes, i, &g, &mut grads);
        }

        let mut out: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Param(id) = &node.op {
                let shape = node.value.shape();
                let contribution = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                match out.get_mut(id) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&contribution) {
                            *a = *a + *b;
                        }
                    }
                    None => {
                        out.insert(id.clone(), Tensor::from_parts(shape.to_vec(), contribution));
                    }
                }
            }
        }
        Ok(GradientMap { grads: out })
    }
}
