//! Parameter storage, layers and the Adam optimizer shared by all networks.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::{DiffError, Gradients, Var};
use crate::{Tape, Tensor};

/// Which learner owns a parameter. Optimizers and freezing work per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    World,
    Encoder,
    Actor,
    Critic,
    /// Lagged critic copy; never optimised.
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.groups.push(group);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    /// Total number of scalar parameters in `group` (all groups when `None`).
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.ids()
            .filter(|&id| group.is_none_or(|g| self.group(id) == g))
            .map(|id| self.get(id).len())
            .sum()
    }

    /// Hex SHA-256 over the exact bits of every parameter in `group`.
    pub fn fingerprint(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for id in self.ids_in(group) {
            h.update(self.name(id).as_bytes());
            for v in self.get(id).values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Gradients keyed by parameter.
pub type ParamGrads = HashMap<ParamId, Tensor>;

/// A tape plus lazily bound parameters for one forward/backward pass.
///
/// Parameters outside the trainable groups are bound as constants, so
/// gradients still flow *through* frozen networks without being collected
/// for them.
pub struct Graph<'a> {
    tape: Tape,
    store: &'a ParamStore,
    trainable: Vec<ParamGroup>,
    bound: HashMap<ParamId, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, trainable: &[ParamGroup]) -> Self {
        Self { tape: Tape::new(), store, trainable: trainable.to_vec(), bound: HashMap::new() }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(store: &'a ParamStore, trainable: &[ParamGroup], tape: Tape) -> Self {
        Self { tape, store, trainable: trainable.to_vec(), bound: HashMap::new() }
    }

    /// Graph in which every parameter is frozen.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var, DiffError> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let trainable = self.trainable.contains(&self.store.group(id));
        let v = self.tape.leaf(self.store.get(id).clone(), trainable)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    /// Binds `id` to an existing variable (used by gradient checks to
    /// differentiate with respect to one parameter tensor).
    pub fn override_param(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    pub fn backward(self, loss: Var) -> Result<ParamGrads, DiffError> {
        Ok(self.backward_with_leaves(loss)?.0)
    }

    /// Parameter gradients plus the raw per-variable gradients.
    pub fn backward_with_leaves(mut self, loss: Var) -> Result<(ParamGrads, Gradients<f64>), DiffError> {
        let grads = self.tape.backward(loss)?;
        let params = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        Ok((params, grads))
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(fan_in, fan_out, values).expect("consistent shape")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), group, glorot(rng, input, output));
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[output]));
        Self { w, b, input, output }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        let w = g.param(self.w)?;
        let b = g.param(self.b)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.input * self.output + self.output
    }
}

/// `layers` ELU hidden layers of width `hidden`, then a linear read-out.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Vec<Linear>,
    pub out: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        hidden: usize,
        layers: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut hs = Vec::with_capacity(layers);
        let mut width = input;
        for i in 0..layers {
            hs.push(Linear::new(store, &format!("{name}.h{i}"), group, width, hidden, rng));
            width = hidden;
        }
        let out = Linear::new(store, &format!("{name}.out"), group, width, output, rng);
        Self { hidden: hs, out }
    }

    pub fn trunk(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        for layer in &self.hidden {
            let z = layer.forward(g, h)?;
            h = g.elu(z)?;
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        let h = self.trunk(g, x)?;
        self.out.forward(g, h)
    }

    pub fn param_count(&self) -> usize {
        self.hidden.iter().map(Linear::param_count).sum::<usize>() + self.out.param_count()
    }
}

/// Logistic sigmoid built from the tape primitives: `½·tanh(x/2) + ½`.
pub fn sigmoid(g: &mut Graph, x: Var) -> Result<Var, DiffError> {
    let half = g.scale(x, 0.5)?;
    let t = g.tanh(half)?;
    let s = g.scale(t, 0.5)?;
    let width = g.value(x).cols();
    let c = g.constant(Tensor::full(&[width], 0.5))?;
    g.add(s, c)
}

/// `softplus(x) + floor`, the positivity transform for predicted scales.
pub fn positive(g: &mut Graph, x: Var, floor: f64) -> Result<Var, DiffError> {
    let s = g.softplus(x)?;
    let width = g.value(x).cols();
    let c = g.constant(Tensor::full(&[width], floor))?;
    g.add(s, c)
}

/// Gated recurrent unit with separate gate matrices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GruCell {
    reset: Linear,
    update: Linear,
    cand_x: Linear,
    cand_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let reset = Linear::new(store, &format!("{name}.reset"), group, input + hidden, hidden, rng);
        let update = Linear::new(store, &format!("{name}.update"), group, input + hidden, hidden, rng);
        let cand_x = Linear::new(store, &format!("{name}.cand_x"), group, input, hidden, rng);
        let cand_h = store.add(format!("{name}.cand_h"), group, glorot(rng, hidden, hidden));
        Self { reset, update, cand_x, cand_h, input, hidden }
    }

    pub fn forward(&self, g: &mut Graph, h: Var, x: Var) -> Result<Var, DiffError> {
        let xh = g.concat(&[x, h])?;
        let rp = self.reset.forward(g, xh)?;
        let r = sigmoid(g, rp)?;
        let zp = self.update.forward(g, xh)?;
        let z = sigmoid(g, zp)?;
        let u = g.param(self.cand_h)?;
        let hu = g.matmul(h, u)?;
        let gated = g.mul(r, hu)?;
        let xn = self.cand_x.forward(g, x)?;
        let np = g.add(xn, gated)?;
        let n = g.tanh(np)?;
        let d = g.sub(h, n)?;
        let zd = g.mul(z, d)?;
        g.add(n, zd)
    }

    pub fn param_count(&self) -> usize {
        self.reset.param_count() + self.update.param_count() + self.cand_x.param_count() + self.hidden * self.hidden
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    params: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, lr: f64, clip_norm: Option<f64>) -> Self {
        let m: Vec<Tensor> = params.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm, step: 0, params, v: m.clone(), m }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies one update from `grads`; returns the pre-clipping global norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> f64 {
        let norm = self
            .params
            .iter()
            .filter_map(|id| grads.get(id))
            .flat_map(|g| g.values().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, id) in self.params.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (self.m[k].values_mut(), self.v[k].values_mut());
            let p = store.get_mut(*id).values_mut();
            for j in 0..p.len() {
                let gj = g.values()[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        norm
    }
}
