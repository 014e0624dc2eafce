//! Dense layers, an LSTM cell and Adam, all over the autodiff carrier.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Param, ParamId, Tape, Var};
use crate::error::{Error, Result};

/// Hands out parameter ids in creation order.
#[derive(Debug, Default)]
pub struct ParamIds {
    next: u32,
}

impl ParamIds {
    pub fn next_id(&mut self) -> ParamId {
        let id = ParamId(self.next);
        self.next += 1;
        id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Identity,
}

impl Activation {
    fn apply<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Elu => v.elu(),
            Activation::Identity => v,
        }
    }
}

/// How a layer's weights start out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`, bias zero.
    FanIn,
    /// Uniform in `[-a, a]`, bias zero.
    Uniform(f64),
    Zero,
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        ids: &mut ParamIds,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = match init {
            Init::FanIn => 1.0 / (inputs as f64).sqrt(),
            Init::Uniform(a) => a,
            Init::Zero => 0.0,
        };
        let data = (0..inputs * outputs)
            .map(|_| {
                if bound > 0.0 {
                    rng.gen_range(-bound..=bound)
                } else {
                    0.0
                }
            })
            .collect();
        DenseLayer {
            weight: Param::new(
                ids.next_id(),
                format!("{name}.weight"),
                vec![outputs, inputs],
                data,
            ),
            bias: Param::zeros(ids.next_id(), format!("{name}.bias"), vec![outputs]),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let pre = tape.affine(&self.weight, Some(&self.bias), x)?;
        Ok(pre.into_iter().map(|v| self.activation.apply(v)).collect())
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    /// Every weight and bias is exactly zero, so the output is too.
    pub fn is_zero(&self) -> bool {
        self.weight
            .values()
            .iter()
            .chain(self.bias.values())
            .all(|v| *v == 0.0)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// ELU hidden layers followed by a linear output head.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `sizes` lists the input width, each hidden width and the output width.
    /// Hidden layers use fan-in initialization; the head starts at zero.
    pub fn new(ids: &mut ParamIds, name: &str, sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let head = i + 1 == n;
                DenseLayer::new(
                    ids,
                    &format!("{name}.{i}"),
                    sizes[i],
                    sizes[i + 1],
                    if head {
                        Activation::Identity
                    } else {
                        Activation::Elu
                    },
                    if head { Init::Zero } else { Init::FanIn },
                    rng,
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, input: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if input.len() != self.inputs() {
            return Err(Error::Shape(format!(
                "MLP expects {} inputs, got {}",
                self.inputs(),
                input.len()
            )));
        }
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = layer.forward(tape, &x)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn head_is_zero(&self) -> bool {
        self.layers.last().is_some_and(DenseLayer::is_zero)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }
}

/// Recurrent state of one LSTM sequence.
#[derive(Debug, Clone)]
pub struct LstmState<'t> {
    pub hidden: Vec<Var<'t>>,
    pub cell: Vec<Var<'t>>,
}

impl<'t> LstmState<'t> {
    pub fn zeros(size: usize) -> Self {
        LstmState {
            hidden: vec![Var::constant(0.0); size],
            cell: vec![Var::constant(0.0); size],
        }
    }

    pub fn values(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.hidden.iter().map(|v| v.value()).collect(),
            self.cell.iter().map(|v| v.value()).collect(),
        )
    }

    pub fn from_values(hidden: &[f64], cell: &[f64]) -> Self {
        LstmState {
            hidden: hidden.iter().copied().map(Var::constant).collect(),
            cell: cell.iter().copied().map(Var::constant).collect(),
        }
    }
}

/// Single-layer LSTM with a linear output head over the hidden state.
///
/// The four gate pre-activations come from one dense layer over `[x; h]`,
/// stacked as input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub gates: DenseLayer,
    pub head: DenseLayer,
    hidden: usize,
}

impl LstmCell {
    pub fn new(
        ids: &mut ParamIds,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        gate_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        LstmCell {
            gates: DenseLayer::new(
                ids,
                &format!("{name}.gates"),
                inputs + hidden,
                4 * hidden,
                Activation::Identity,
                gate_init,
                rng,
            ),
            head: DenseLayer::new(
                ids,
                &format!("{name}.head"),
                hidden,
                outputs,
                Activation::Identity,
                Init::Zero,
                rng,
            ),
            hidden,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn input_size(&self) -> usize {
        self.gates.inputs() - self.hidden
    }

    pub fn head_is_zero(&self) -> bool {
        self.head.is_zero()
    }

    pub fn step<'t>(
        &self,
        tape: &'t Tape,
        input: &[Var<'t>],
        state: &LstmState<'t>,
    ) -> Result<(Vec<Var<'t>>, LstmState<'t>)> {
        let h = self.hidden;
        if input.len() != self.input_size() {
            return Err(Error::Shape(format!(
                "LSTM expects {} inputs, got {}",
                self.input_size(),
                input.len()
            )));
        }
        if state.hidden.len() != h || state.cell.len() != h {
            return Err(Error::Shape(format!("LSTM state must have size {h}")));
        }
        let mut x = Vec::with_capacity(input.len() + h);
        x.extend_from_slice(input);
        x.extend_from_slice(&state.hidden);
        let z = self.gates.forward(tape, &x)?;
        let mut hidden = Vec::with_capacity(h);
        let mut cell = Vec::with_capacity(h);
        for k in 0..h {
            let i = z[k].sigmoid();
            let f = z[h + k].sigmoid();
            let g = z[2 * h + k].tanh();
            let o = z[3 * h + k].sigmoid();
            let c = f * state.cell[k] + i * g;
            hidden.push(o * c.tanh());
            cell.push(c);
        }
        let out = self.head.forward(tape, &hidden)?;
        Ok((out, LstmState { hidden, cell }))
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.gates.params().into_iter().chain(self.head.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.gates
            .params_mut()
            .into_iter()
            .chain(self.head.params_mut())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(&id)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update of every parameter in `params`. A parameter without an
    /// entry in `grads` sees a zero gradient.
    pub fn update<'p>(
        &mut self,
        params: impl IntoIterator<Item = &'p mut Param>,
        grads: &Gradients,
    ) -> Result<()> {
        let params: Vec<&mut Param> = params.into_iter().collect();
        for p in &params {
            if let Some(g) = grads.block(p.id()) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name())));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            let n = p.len();
            let g = grads.block(p.id());
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let w = p.values_mut();
            for i in 0..n {
                let gi = g.and_then(|g| g.get(i)).copied().unwrap_or(0.0);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LDPCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    meta: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form metadata.
///
/// On disk: 8-byte magic, little-endian `u64` header length, a JSON header
/// listing names, shapes and byte offsets, then the payload as
/// little-endian `f64`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.push((name.into(), shape, data));
    }

    pub fn push_param(&mut self, p: &Param) {
        self.push(p.name(), p.shape().to_vec(), p.values().to_vec());
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Copy the stored tensor with the parameter's name into it.
    pub fn load_param(&self, p: &mut Param) -> Result<()> {
        let (shape, data) = self
            .get(p.name())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name())))?;
        if shape != p.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {shape:?} does not match {:?}",
                p.name(),
                p.shape()
            )));
        }
        p.values_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += 8 * data.len() as u64;
                e
            })
            .collect();
        let header = CheckpointHeader {
            format: "ldp-checkpoint".into(),
            version: 1,
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, _, data) in &self.tensors {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| bad("truncated header length"))?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)
            .map_err(|_| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)
            .map_err(|_| bad("unreadable payload"))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let end = start + 8 * n;
            let bytes = payload
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("{}: payload out of range", t.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.push((t.name, t.shape, data));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read_from(bytes.as_slice())
    }
}
