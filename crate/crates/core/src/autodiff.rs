//! Reverse-mode automatic differentiation on a scalar Wengert tape.
//!
//! Every value that takes part in a differentiable computation is a [`Var`]:
//! an `f64` plus an optional handle to a node on a [`Tape`]. Constants carry
//! no handle and never receive gradient. Operations on tracked values append
//! a node holding the local partial derivatives with respect to each tracked
//! parent; [`Tape::backward`] sweeps the nodes in reverse order once.
//!
//! Dense layers are recorded as one node per output row that references a
//! shared record of the input vector and the weight block, so an LSTM step
//! costs `O(rows + inputs)` tape memory instead of one node per multiply.
//!
//! A tape created with [`Tape::inert`] records nothing; the same model code
//! then runs as a plain `f64` evaluation.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a learnable parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

impl ParamId {
    /// Reserved for ad-hoc leaves such as gradient-check probes; never handed
    /// out to a model parameter.
    pub const PROBE: ParamId = ParamId(u32::MAX);
}

/// One scalar inside a parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub block: ParamId,
    pub index: u32,
}

impl ParamKey {
    pub fn new(block: ParamId, index: usize) -> Self {
        ParamKey {
            block,
            index: index as u32,
        }
    }
}

/// A named, shaped block of learnable weights.
///
/// The storage is shared with any tape that recorded a dense layer over it,
/// so mutating a block after recording copies it instead of corrupting the
/// backward pass.
#[derive(Debug, Clone)]
pub struct Param {
    id: ParamId,
    name: String,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Param {
    pub fn new(id: ParamId, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter data does not match its shape"
        );
        Param {
            id,
            name: name.into(),
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(id: ParamId, name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(id, name, shape, vec![0.0; n])
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey::new(self.id, index)
    }

    pub(crate) fn shared(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }
}

/// Kind of operation a node came from. Informational only; the backward pass
/// uses the stored partials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    ConstAdd,
    ConstMul,
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Sigmoid,
    Elu,
    Softplus,
    Abs,
    Asin,
    Atan2,
    Powi,
    Affine,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Recording,
    Inert,
    Sealed,
}

#[derive(Debug, Clone, Copy)]
enum NodeKind {
    Leaf(Option<ParamKey>),
    Edges { start: u32, len: u32 },
    AffineRow { record: u32, row: u32 },
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: OpKind,
    kind: NodeKind,
}

#[derive(Debug)]
struct AffineRecord {
    weight: Arc<Vec<f64>>,
    weight_id: ParamId,
    bias_id: Option<ParamId>,
    inputs: Vec<f64>,
    // u32::MAX marks a constant input.
    input_nodes: Vec<u32>,
}

const NO_NODE: u32 = u32::MAX;

#[derive(Debug)]
struct TapeInner {
    mode: Mode,
    nodes: Vec<Node>,
    edges: Vec<(u32, f64)>,
    affine: Vec<AffineRecord>,
    checkpoints: Vec<usize>,
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_mode(Mode::Recording)
    }

    /// A tape that records nothing: every result is a constant.
    pub fn inert() -> Self {
        Tape::with_mode(Mode::Inert)
    }

    fn with_mode(mode: Mode) -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                mode,
                nodes: Vec::new(),
                edges: Vec::new(),
                affine: Vec::new(),
                checkpoints: Vec::new(),
            }),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().mode == Mode::Recording
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Close the tape for recording. Further `record` calls fail.
    pub fn seal(&self) {
        let mut inner = self.inner.borrow_mut();
        if inner.mode == Mode::Recording {
            inner.mode = Mode::Sealed;
        }
    }

    /// Remember the current tape position (e.g. a frame boundary).
    pub fn checkpoint(&self) -> usize {
        let mut inner = self.inner.borrow_mut();
        let mark = inner.nodes.len();
        inner.checkpoints.push(mark);
        mark
    }

    pub fn checkpoints(&self) -> Vec<usize> {
        self.inner.borrow().checkpoints.clone()
    }

    /// Operation that produced node `index`.
    pub fn op_kind(&self, index: usize) -> Option<OpKind> {
        self.inner.borrow().nodes.get(index).map(|n| n.op)
    }

    pub fn constant<'t>(&'t self, value: f64) -> Var<'t> {
        Var::constant(value)
    }

    /// A leaf whose gradient is reported under `key`.
    pub fn leaf(&self, value: f64, key: ParamKey) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        match inner.mode {
            Mode::Inert => Var::constant(value),
            Mode::Sealed => panic!("tape sealed"),
            Mode::Recording => {
                let idx = inner.nodes.len() as u32;
                inner.nodes.push(Node {
                    op: OpKind::Leaf,
                    kind: NodeKind::Leaf(Some(key)),
                });
                Var {
                    value,
                    node: Some((self, idx)),
                }
            }
        }
    }

    /// Leaf for element `index` of a parameter block.
    pub fn param(&self, param: &Param, index: usize) -> Var<'_> {
        self.leaf(param.values()[index], param.key(index))
    }

    /// All elements of a parameter block as leaves.
    pub fn params(&self, param: &Param) -> Vec<Var<'_>> {
        (0..param.len()).map(|i| self.param(param, i)).collect()
    }

    /// Record a node with explicit local partials.
    pub fn record<'t>(
        &'t self,
        op: OpKind,
        inputs: &[Var<'t>],
        value: f64,
        partials: &[f64],
    ) -> Result<Var<'t>> {
        if inputs.len() != partials.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} partials",
                inputs.len(),
                partials.len()
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{op:?} result")));
        }
        let mode = self.inner.borrow().mode;
        match mode {
            Mode::Sealed => Err(Error::TapeSealed),
            Mode::Inert => Ok(Var::constant(value)),
            Mode::Recording => {
                for v in inputs {
                    if let Some((t, _)) = v.node {
                        if !std::ptr::eq(t, self) {
                            return Err(Error::NotOnTape(v.node_index().unwrap_or(0)));
                        }
                    }
                }
                Ok(self.push_edges(
                    op,
                    value,
                    inputs.iter().zip(partials).map(|(v, &d)| (*v, d)),
                ))
            }
        }
    }

    fn push_edges<'t>(
        &'t self,
        op: OpKind,
        value: f64,
        parents: impl Iterator<Item = (Var<'t>, f64)>,
    ) -> Var<'t> {
        let mut inner = self.inner.borrow_mut();
        match inner.mode {
            Mode::Inert => return Var::constant(value),
            Mode::Sealed => panic!("tape sealed"),
            Mode::Recording => {}
        }
        let start = inner.edges.len() as u32;
        for (v, d) in parents {
            if let Some((_, idx)) = v.node {
                inner.edges.push((idx, d));
            }
        }
        let len = inner.edges.len() as u32 - start;
        if len == 0 {
            return Var::constant(value);
        }
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node {
            op,
            kind: NodeKind::Edges { start, len },
        });
        Var {
            value,
            node: Some((self, idx)),
        }
    }

    /// Dense layer `weight · x + bias`, with `weight` shaped `[out, in]`.
    pub fn affine<'t>(
        &'t self,
        weight: &Param,
        bias: Option<&Param>,
        x: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>> {
        let (rows, cols) = match weight.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Shape(format!(
                    "{}: weight shape {s:?} is not 2-D",
                    weight.name()
                )))
            }
        };
        if cols != x.len() {
            return Err(Error::Shape(format!(
                "{}: expects {cols} inputs, got {}",
                weight.name(),
                x.len()
            )));
        }
        if let Some(b) = bias {
            if b.len() != rows {
                return Err(Error::Shape(format!(
                    "{}: bias length {} != {rows}",
                    b.name(),
                    b.len()
                )));
            }
        }
        let w = weight.values();
        let inputs: Vec<f64> = x.iter().map(|v| v.value).collect();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            let mut acc = bias.map_or(0.0, |b| b.values()[r]);
            for (wi, xi) in row.iter().zip(&inputs) {
                acc += wi * xi;
            }
            out.push(acc);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} output", weight.name())));
        }
        let mut inner = self.inner.borrow_mut();
        match inner.mode {
            Mode::Inert => return Ok(out.into_iter().map(Var::constant).collect()),
            Mode::Sealed => return Err(Error::TapeSealed),
            Mode::Recording => {}
        }
        let record = inner.affine.len() as u32;
        inner.affine.push(AffineRecord {
            weight: weight.shared(),
            weight_id: weight.id(),
            bias_id: bias.map(Param::id),
            inputs,
            input_nodes: x
                .iter()
                .map(|v| v.node_index().map_or(NO_NODE, |i| i as u32))
                .collect(),
        });
        let first = inner.nodes.len() as u32;
        for row in 0..rows as u32 {
            inner.nodes.push(Node {
                op: OpKind::Affine,
                kind: NodeKind::AffineRow { record, row },
            });
        }
        drop(inner);
        Ok(out
            .into_iter()
            .enumerate()
            .map(|(r, value)| Var {
                value,
                node: Some((self, first + r as u32)),
            })
            .collect())
    }

    /// Gradient of `seed` with respect to every parameter leaf it depends on.
    pub fn backward(&self, seed: Var<'_>) -> Result<Gradients> {
        let seed_idx = match seed.node {
            None => return Ok(Gradients::default()),
            Some((t, idx)) => {
                if !std::ptr::eq(t, self) {
                    return Err(Error::NotOnTape(idx as usize));
                }
                idx as usize
            }
        };
        let inner = self.inner.borrow();
        if seed_idx >= inner.nodes.len() {
            return Err(Error::NotOnTape(seed_idx));
        }
        let mut adj = vec![0.0f64; seed_idx + 1];
        adj[seed_idx] = 1.0;
        let mut grads = Gradients::default();
        for i in (0..=seed_idx).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match inner.nodes[i].kind {
                NodeKind::Leaf(Some(key)) => grads.accumulate(key, g),
                NodeKind::Leaf(None) => {}
                NodeKind::Edges { start, len } => {
                    for &(parent, d) in &inner.edges[start as usize..(start + len) as usize] {
                        adj[parent as usize] += g * d;
                    }
                }
                NodeKind::AffineRow { record, row } => {
                    let rec = &inner.affine[record as usize];
                    let cols = rec.inputs.len();
                    let row = row as usize;
                    let w = &rec.weight[row * cols..(row + 1) * cols];
                    for (k, &node) in rec.input_nodes.iter().enumerate() {
                        if node != NO_NODE {
                            adj[node as usize] += g * w[k];
                        }
                    }
                    let total = rec.weight.len();
                    let dw = grads.block_mut(rec.weight_id, total);
                    for (k, x) in rec.inputs.iter().enumerate() {
                        dw[row * cols + k] += g * x;
                    }
                    if let Some(b) = rec.bias_id {
                        grads.accumulate_sized(ParamKey::new(b, row), g, total / cols);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Gradient map from parameter element to derivative.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    blocks: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    fn block_mut(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        let b = self.blocks.entry(id).or_default();
        if b.len() < len {
            b.resize(len, 0.0);
        }
        b
    }

    fn accumulate(&mut self, key: ParamKey, g: f64) {
        self.accumulate_sized(key, g, key.index as usize + 1);
    }

    fn accumulate_sized(&mut self, key: ParamKey, g: f64, len: usize) {
        let b = self.block_mut(key.block, len.max(key.index as usize + 1));
        b[key.index as usize] += g;
    }

    /// Derivative for one element; zero if the element did not take part.
    pub fn get(&self, key: ParamKey) -> f64 {
        self.blocks
            .get(&key.block)
            .and_then(|b| b.get(key.index as usize))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn block(&self, id: ParamId) -> Option<&[f64]> {
        self.blocks.get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.blocks.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.blocks.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Element-wise sum, in place.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (id, g) in &other.blocks {
            let b = self.block_mut(*id, g.len());
            for (a, x) in b.iter_mut().zip(g) {
                *a += x;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in self.blocks.values_mut() {
            b.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        self.blocks.retain(|id, _| keep(*id));
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks
            .values()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// A real value, optionally tracked on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    value: f64,
    node: Option<(&'t Tape, u32)>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some((_, idx)) => write!(f, "Var({} @{idx})", self.value),
            None => write!(f, "Var({})", self.value),
        }
    }
}

impl From<f64> for Var<'_> {
    fn from(value: f64) -> Self {
        Var::constant(value)
    }
}

impl<'t> Var<'t> {
    pub const ZERO: Var<'static> = Var {
        value: 0.0,
        node: None,
    };

    pub fn constant(value: f64) -> Self {
        Var { value, node: None }
    }

    pub fn value(self) -> f64 {
        self.value
    }

    pub fn is_constant(self) -> bool {
        self.node.is_none()
    }

    pub fn node_index(self) -> Option<usize> {
        self.node.map(|(_, i)| i as usize)
    }

    /// Same value with no gradient path.
    pub fn detach(self) -> Var<'t> {
        Var::constant(self.value)
    }

    fn unary(self, op: OpKind, value: f64, d: f64) -> Var<'t> {
        match self.node {
            None => Var::constant(value),
            Some((tape, _)) => tape.push_edges(op, value, std::iter::once((self, d))),
        }
    }

    fn binary(self, other: Var<'t>, op: OpKind, value: f64, da: f64, db: f64) -> Var<'t> {
        match self.node.or(other.node) {
            None => Var::constant(value),
            Some((tape, _)) => {
                debug_assert!(
                    match (self.node, other.node) {
                        (Some((a, _)), Some((b, _))) => std::ptr::eq(a, b),
                        _ => true,
                    },
                    "operands live on different tapes"
                );
                tape.push_edges(op, value, [(self, da), (other, db)].into_iter())
            }
        }
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(OpKind::Sin, self.value.sin(), self.value.cos())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(OpKind::Cos, self.value.cos(), -self.value.sin())
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(OpKind::Exp, e, e)
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value.tanh();
        self.unary(OpKind::Tanh, t, 1.0 - t * t)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = if self.value >= 0.0 {
            1.0 / (1.0 + (-self.value).exp())
        } else {
            let e = self.value.exp();
            e / (1.0 + e)
        };
        self.unary(OpKind::Sigmoid, s, s * (1.0 - s))
    }

    /// ELU with unit scale.
    pub fn elu(self) -> Var<'t> {
        if self.value > 0.0 {
            self.unary(OpKind::Elu, self.value, 1.0)
        } else {
            let e = self.value.exp();
            self.unary(OpKind::Elu, e - 1.0, e)
        }
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        let x = self.value;
        let v = if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        };
        let s = 1.0 / (1.0 + (-x).exp());
        self.unary(OpKind::Softplus, v, s)
    }

    /// `|x|`, with subgradient 0 at the kink.
    pub fn abs(self) -> Var<'t> {
        let d = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(OpKind::Abs, self.value.abs(), d)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(OpKind::Powi, self.value * self.value, 2.0 * self.value)
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        let d = if n == 0 {
            0.0
        } else {
            f64::from(n) * self.value.powi(n - 1)
        };
        self.unary(OpKind::Powi, self.value.powi(n), d)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.value <= 0.0 {
            return Err(Error::Domain {
                op: "sqrt",
                value: self.value,
            });
        }
        let s = self.value.sqrt();
        Ok(self.unary(OpKind::Sqrt, s, 0.5 / s))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        if self.value <= 0.0 {
            return Err(Error::Domain {
                op: "ln",
                value: self.value,
            });
        }
        Ok(self.unary(OpKind::Ln, self.value.ln(), 1.0 / self.value))
    }

    pub fn asin(self) -> Result<Var<'t>> {
        if self.value.abs() >= 1.0 {
            return Err(Error::Domain {
                op: "asin",
                value: self.value,
            });
        }
        let d = 1.0 / (1.0 - self.value * self.value).sqrt();
        Ok(self.unary(OpKind::Asin, self.value.asin(), d))
    }

    /// `atan2(self, x)`.
    pub fn atan2(self, x: Var<'t>) -> Result<Var<'t>> {
        let (y0, x0) = (self.value, x.value);
        let r2 = x0 * x0 + y0 * y0;
        if r2 == 0.0 {
            return Err(Error::Domain {
                op: "atan2",
                value: 0.0,
            });
        }
        Ok(self.binary(x, OpKind::Atan2, y0.atan2(x0), x0 / r2, -y0 / r2))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, OpKind::Add, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, OpKind::Sub, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(
            rhs,
            OpKind::Mul,
            self.value * rhs.value,
            rhs.value,
            self.value,
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self.value / rhs.value;
        self.binary(rhs, OpKind::Div, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(OpKind::Neg, -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(OpKind::ConstAdd, self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(OpKind::ConstAdd, self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(OpKind::ConstMul, self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary(OpKind::ConstMul, self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.unary(OpKind::ConstAdd, self - rhs.value, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> AddAssign for Var<'t> {
    fn add_assign(&mut self, rhs: Var<'t>) {
        *self = *self + rhs;
    }
}

/// Sum of a sequence of values; constant zero for an empty sequence.
pub fn sum<'t>(values: impl IntoIterator<Item = Var<'t>>) -> Var<'t> {
    let mut acc: Option<Var<'t>> = None;
    for v in values {
        acc = Some(match acc {
            None => v,
            Some(a) => a + v,
        });
    }
    acc.unwrap_or(Var::constant(0.0))
}

/// Result of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// `max_i |g_ad - g_fd| / max(1, |g_fd|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub ad: Vec<f64>,
    pub fd: Vec<f64>,
    /// Parameters where forward and backward one-sided differences disagree:
    /// the function has a kink there and the comparison is not meaningful.
    pub non_smooth: Vec<usize>,
}

impl GradCheckReport {
    pub fn is_smooth(&self) -> bool {
        self.non_smooth.is_empty()
    }
}

/// Compare AD against central finite differences for `f` at `params`.
///
/// `f` receives the tape and one leaf per parameter; it is evaluated once on
/// a recording tape and `2n + 1` times on inert tapes.
pub fn grad_check<F, E>(f: F, params: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> std::result::Result<Var<'t>, E>,
    E: fmt::Display,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::validation("h", "step must be positive"));
    }
    let block = ParamId::PROBE;
    let eval = |p: &[f64], index: usize| -> Result<f64> {
        let tape = Tape::inert();
        let leaves: Vec<Var> = p.iter().map(|&v| Var::constant(v)).collect();
        match f(&tape, &leaves) {
            Ok(v) if v.value().is_finite() => Ok(v.value()),
            _ => Err(Error::NonFiniteProbe { index }),
        }
    };

    let tape = Tape::new();
    let leaves: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, &p)| tape.leaf(p, ParamKey::new(block, i)))
        .collect();
    let out = f(&tape, &leaves).map_err(|e| Error::NonFinite(format!("objective: {e}")))?;
    if !out.value().is_finite() {
        return Err(Error::NonFiniteProbe { index: 0 });
    }
    let grads = tape.backward(out)?;
    let ad: Vec<f64> = (0..params.len())
        .map(|i| grads.get(ParamKey::new(block, i)))
        .collect();

    let center = eval(params, 0)?;
    let mut fd = Vec::with_capacity(params.len());
    let mut non_smooth = Vec::new();
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let plus = eval(&probe, i)?;
        probe[i] = params[i] - h;
        let minus = eval(&probe, i)?;
        probe[i] = params[i];
        let central = (plus - minus) / (2.0 * h);
        let forward = (plus - center) / h;
        let backward = (center - minus) / h;
        if (forward - backward).abs() > 1e-2 * central.abs().max(1.0) {
            non_smooth.push(i);
        }
        fd.push(central);
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in ad.iter().zip(&fd).enumerate() {
        let e = (a - n).abs() / n.abs().max(1.0);
        if e > max_rel_error {
            max_rel_error = e;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        ad,
        fd,
        non_smooth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: usize) -> ParamKey {
        ParamKey::new(ParamId(0), i)
    }

    #[test]
    fn record_examples() {
        let tape = Tape::new();
        let x = tape.leaf(2.0, key(0));
        let y = tape.leaf(3.0, key(1));
        let p = tape.record(OpKind::Mul, &[x, y], 6.0, &[3.0, 2.0]).unwrap();
        assert_eq!(p.value(), 6.0);
        let z = tape.leaf(0.0, key(2));
        let s = tape.record(OpKind::Sin, &[z], 0.0, &[1.0]).unwrap();
        assert_eq!(s.value(), 0.0);
        let w = tape.leaf(5.0, key(3));
        let c = tape.record(OpKind::ConstAdd, &[w], 7.0, &[1.0]).unwrap();
        assert_eq!(c.value(), 7.0);
        assert!(!p.is_constant());
    }

    #[test]
    fn record_rejects_bad_input() {
        let tape = Tape::new();
        let x = tape.leaf(1.0, key(0));
        assert!(matches!(
            tape.record(OpKind::Custom, &[x], 1.0, &[]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            tape.record(OpKind::Custom, &[x], f64::NAN, &[1.0]),
            Err(Error::NonFinite(_))
        ));
        tape.seal();
        assert!(matches!(
            tape.record(OpKind::Custom, &[x], 1.0, &[1.0]),
            Err(Error::TapeSealed)
        ));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(2.0, key(0));
        let y = tape.leaf(3.0, key(1));
        let g = tape.backward(x * y).unwrap();
        assert_eq!((g.get(key(0)), g.get(key(1))), (3.0, 2.0));

        let tape = Tape::new();
        let x = tape.leaf(0.0, key(0));
        assert_eq!(tape.backward(x.sin()).unwrap().get(key(0)), 1.0);

        let tape = Tape::new();
        let x = tape.leaf(1.0, key(0));
        let y = tape.leaf(2.0, key(1));
        let g = tape.backward((x + y) * x).unwrap();
        assert_eq!((g.get(key(0)), g.get(key(1))), (4.0, 1.0));
    }

    #[test]
    fn backward_rejects_foreign_seed() {
        let a = Tape::new();
        let b = Tape::new();
        let x = b.leaf(1.0, key(0));
        assert!(matches!(a.backward(x * x), Err(Error::NotOnTape(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(2.0, key(0));
        let c = Var::constant(5.0);
        let g = tape.backward(x * c + c.sin()).unwrap();
        assert_eq!(g.get(key(0)), 5.0);
        assert_eq!(g.iter().count(), 1);
        // Unregistered leaves are omitted.
        let u = tape.record(OpKind::Custom, &[x], 2.0, &[1.0]).unwrap();
        let g = tape.backward(u * u).unwrap();
        assert_eq!(g.iter().count(), 1);
    }

    #[test]
    fn shared_ancestor_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(3.0, key(0));
        let a = x * x;
        let b = a + a + x;
        // d/dx (2x^2 + x) = 4x + 1
        assert_eq!(tape.backward(b).unwrap().get(key(0)), 13.0);
    }

    #[test]
    fn inert_tape_records_nothing() {
        let tape = Tape::inert();
        let x = tape.leaf(2.0, key(0));
        let y = (x * x).sin();
        assert!(y.is_constant());
        assert_eq!(tape.len(), 0);
        assert_eq!(y.value(), 4.0f64.sin());
    }

    #[test]
    fn domain_errors() {
        assert!(Var::constant(-1.0).sqrt().is_err());
        assert!(Var::constant(0.0).ln().is_err());
        assert!(Var::constant(1.5).asin().is_err());
        assert!(Var::constant(0.0).atan2(Var::constant(0.0)).is_err());
    }

    #[test]
    fn affine_gradients() {
        let tape = Tape::new();
        let w = Param::new(
            ParamId(7),
            "w",
            vec![2, 3],
            vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0],
        );
        let b = Param::new(ParamId(8), "b", vec![2], vec![0.1, 0.2]);
        let x: Vec<Var> = [1.0, -2.0, 4.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| tape.leaf(v, key(i)))
            .collect();
        let y = tape.affine(&w, Some(&b), &x).unwrap();
        assert_eq!(y[0].value(), 1.0 - 4.0 + 12.0 + 0.1);
        assert_eq!(y[1].value(), -1.0 - 1.0 + 0.2);
        // loss = 2*y0 + 3*y1
        let loss = y[0] * 2.0 + y[1] * 3.0;
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(key(0)), 2.0 * 1.0 + 3.0 * -1.0);
        assert_eq!(g.get(key(1)), 2.0 * 2.0 + 3.0 * 0.5);
        assert_eq!(g.get(key(2)), 2.0 * 3.0);
        assert_eq!(
            g.block(ParamId(7)).unwrap(),
            &[2.0, -4.0, 8.0, 3.0, -6.0, 12.0]
        );
        assert_eq!(g.block(ParamId(8)).unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let tape = Tape::new();
        let w = Param::zeros(ParamId(1), "w", vec![2, 3]);
        assert!(matches!(
            tape.affine(&w, None, &[Var::constant(1.0)]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grad_check_quadratic() {
        let r = grad_check(|_t, p| Ok::<_, Error>(p[0] * p[0]), &[3.0], 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        assert!(r.is_smooth());
    }

    #[test]
    fn grad_check_flags_kink() {
        let r = grad_check(|_t, p| Ok::<_, Error>(p[0].abs()), &[0.0], 1e-5).unwrap();
        assert_eq!(r.non_smooth, vec![0]);
        assert_eq!(r.ad[0], 0.0);
    }

    #[test]
    fn grad_check_reports_non_finite_probe() {
        let r = grad_check(
            |_t, p| {
                if p[1].value() > 1.0 {
                    Ok(Var::constant(f64::INFINITY))
                } else {
                    Ok::<_, Error>(p[0] * p[1])
                }
            },
            &[1.0, 1.0],
            1e-3,
        );
        assert!(matches!(r, Err(Error::NonFiniteProbe { index: 1 })));
    }
}
