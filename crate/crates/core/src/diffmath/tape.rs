//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value; inputs always
//! have smaller indices than outputs, so walking the node list backwards is a
//! reverse topological order. [`Tape::backward`] consumes the recording: the
//! tape is cleared afterwards and variables from the old recording become
//! stale.

use std::collections::HashMap;

use super::{DiffError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    generation: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a `[cols]` row repeated over the lhs batch
    RhsRow,
    /// lhs is a `[cols]` row repeated over the rhs batch
    LhsRow,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Div(usize, usize, Bcast),
    MatMul(usize, usize),
    Concat(Vec<usize>),
    Tanh(usize),
    Elu(usize),
    Softplus(usize),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    Scale(usize, T),
    KlDiag([usize; 4]),
    LogProb([usize; 3]),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of one backward pass, keyed by the leaves that requested them.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    generation: u64,
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf of the recording this came from; `None` when the
    /// leaf did not request gradients or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(&v.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    generation: u64,
}

fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), generation: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops the recording; outstanding [`Var`]s become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    fn index(&self, v: Var) -> Result<usize, DiffError> {
        if v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(DiffError::Usage("variable belongs to a cleared recording"));
        }
        Ok(v.index)
    }

    /// Forward value of `v`.
    ///
    /// # Panics
    /// If `v` is stale.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.index(v).expect("stale variable");
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.index(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { index: self.nodes.len() - 1, generation: self.generation })
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var, DiffError> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var, DiffError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, DiffError> {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Result<Var, DiffError> {
        let i = self.index(v)?;
        let value = self.nodes[i].value.clone();
        self.constant(value)
    }

    fn bcast(&self, op: &'static str, a: usize, b: usize) -> Result<(Bcast, Vec<usize>), DiffError> {
        let sa = self.nodes[a].value.shape();
        let sb = self.nodes[b].value.shape();
        if sa == sb {
            return Ok((Bcast::Same, sa.to_vec()));
        }
        if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            return Ok((Bcast::RhsRow, sa.to_vec()));
        }
        if sb.len() == 2 && sa.len() == 1 && sa[0] == sb[1] {
            return Ok((Bcast::LhsRow, sb.to_vec()));
        }
        Err(DiffError::Shape { op, lhs: sa.to_vec(), rhs: sb.to_vec() })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(usize, usize, Bcast) -> Op<T>,
    ) -> Result<Var, DiffError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (mode, shape) = self.bcast(name, ia, ib)?;
        let va = self.nodes[ia].value.values();
        let vb = self.nodes[ib].value.values();
        let out: Vec<T> = match mode {
            Bcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::RhsRow => {
                let c = vb.len();
                va.iter().enumerate().map(|(i, &x)| f(x, vb[i % c])).collect()
            }
            Bcast::LhsRow => {
                let c = va.len();
                vb.iter().enumerate().map(|(i, &y)| f(va[i % c], y)).collect()
            }
        };
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        self.push(Tensor::new(out, &shape)?, mk(ia, ib, mode), rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(DiffError::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, ta.values(), (k as isize, 1), tb.values(), (n as isize, 1), &mut out, false);
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(ia, ib), rg, "matmul")
    }

    /// Concatenation along the last dimension; all parts share the batch size.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let idx = parts.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>, _>>()?;
        let first = idx.first().ok_or(DiffError::Usage("concat of nothing"))?;
        let lead = self.nodes[*first].value.shape().to_vec();
        let rows = self.nodes[*first].value.rows();
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != lead.len() || (s.len() == 2 && s[0] != rows) || s.is_empty() {
                return Err(DiffError::Shape { op: "concat", lhs: lead, rhs: s.to_vec() });
            }
        }
        let width: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &i in &idx {
                out.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let shape = if lead.len() == 2 { vec![rows, width] } else { vec![width] };
        let rg = idx.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(Tensor::new(out, &shape)?, Op::Concat(idx), rg, "concat")
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, DiffError> {
        let ia = self.index(a)?;
        let out = self.nodes[ia].value.map(f);
        let rg = self.nodes[ia].requires_grad;
        self.push(out, op, rg, name)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        let i = self.index(a)?;
        self.unary("tanh", a, T::tanh, Op::Tanh(i))
    }

    pub fn elu(&mut self, a: Var) -> Result<Var, DiffError> {
        let i = self.index(a)?;
        self.unary("elu", a, elu, Op::Elu(i))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, DiffError> {
        let i = self.index(a)?;
        self.unary("softplus", a, softplus, Op::Softplus(i))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        let i = self.index(a)?;
        if self.nodes[i].value.values().iter().any(|&x| x <= T::zero()) {
            return Err(DiffError::Domain { op: "sqrt", what: "non-positive input" });
        }
        self.unary("sqrt", a, T::sqrt, Op::Sqrt(i))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        let i = self.index(a)?;
        self.unary("square", a, |x| x * x, Op::Square(i))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, DiffError> {
        let i = self.index(a)?;
        self.unary("scale", a, |x| x * c, Op::Scale(i, c))
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let i = self.index(a)?;
        let s: T = self.nodes[i].value.values().iter().copied().sum();
        let rg = self.nodes[i].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(i), rg, "sum")
    }

    /// Mean of all elements, shape `[]`.
    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let i = self.index(a)?;
        let t = &self.nodes[i].value;
        if t.is_empty() {
            return Err(DiffError::Usage("mean of an empty tensor"));
        }
        let s: T = t.values().iter().copied().sum::<T>() / T::from_usize(t.len()).unwrap();
        let rg = self.nodes[i].requires_grad;
        self.push(Tensor::scalar(s), Op::Mean(i), rg, "mean")
    }

    fn rowwise_shape(&self, op: &'static str, idx: &[usize], positive: &[(usize, &'static str)]) -> Result<Vec<usize>, DiffError> {
        let lead = self.nodes[idx[0]].value.shape();
        for &i in &idx[1..] {
            if self.nodes[i].value.shape() != lead {
                return Err(DiffError::Shape {
                    op,
                    lhs: lead.to_vec(),
                    rhs: self.nodes[i].value.shape().to_vec(),
                });
            }
        }
        for &(slot, what) in positive {
            if self.nodes[idx[slot]].value.values().iter().any(|&s| s <= T::zero()) {
                return Err(DiffError::Domain { op, what });
            }
        }
        Ok(match lead.len() {
            2 => vec![lead[0]],
            _ => Vec::new(),
        })
    }

    /// KL(N(mean_q, diag std_q²) ‖ N(mean_p, diag std_p²)) summed over the
    /// last dimension; one value per batch row.
    pub fn gaussian_kl_diag(&mut self, mean_q: Var, std_q: Var, mean_p: Var, std_p: Var) -> Result<Var, DiffError> {
        let idx = [self.index(mean_q)?, self.index(std_q)?, self.index(mean_p)?, self.index(std_p)?];
        let shape = self.rowwise_shape("gaussian_kl_diag", &idx, &[(1, "std_q"), (3, "std_p")])?;
        let t = &self.nodes[idx[0]].value;
        let (rows, cols) = (t.rows(), t.cols());
        let [mq, sq, mp, sp] = idx.map(|i| self.nodes[i].value.values());
        let half = T::lit(0.5);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = T::zero();
            for j in r * cols..(r + 1) * cols {
                let d = mq[j] - mp[j];
                acc = acc + (sp[j] / sq[j]).ln() + (sq[j] * sq[j] + d * d) / (T::lit(2.0) * sp[j] * sp[j]) - half;
            }
            out.push(acc);
        }
        let rg = idx.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(Tensor::new(out, &shape)?, Op::KlDiag(idx), rg, "gaussian_kl_diag")
    }

    /// Diagonal Gaussian log-density of `x`, summed over the last dimension.
    pub fn gaussian_log_prob(&mut self, x: Var, mean: Var, std: Var) -> Result<Var, DiffError> {
        let idx = [self.index(x)?, self.index(mean)?, self.index(std)?];
        let shape = self.rowwise_shape("gaussian_log_prob", &idx, &[(2, "std")])?;
        let t = &self.nodes[idx[0]].value;
        let (rows, cols) = (t.rows(), t.cols());
        let [xv, mv, sv] = idx.map(|i| self.nodes[i].value.values());
        let half_log_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = T::zero();
            for j in r * cols..(r + 1) * cols {
                let z = (xv[j] - mv[j]) / sv[j];
                acc = acc - half_log_2pi - sv[j].ln() - T::lit(0.5) * z * z;
            }
            out.push(acc);
        }
        let rg = idx.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(Tensor::new(out, &shape)?, Op::LogProb(idx), rg, "gaussian_log_prob")
    }

    /// Back-propagates from the scalar `loss`, returning the gradients of
    /// every gradient-requesting leaf it depends on. Clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, DiffError> {
        let root = self.index(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(DiffError::Usage("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root + 1];
        grads[root] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaves.insert(i, Tensor::new(g, node.value.shape())?);
            }
        }

        let out = Gradients { generation: self.generation, grads: leaves };
        self.clear();
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |k: usize| nodes[k].value.values();
        let wants = |k: usize| nodes[k].requires_grad;
        let y = nodes[i].value.values();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b, m) => {
                accum_bcast(grads, nodes, *a, *m, true, g, |gi, _| gi);
                accum_bcast(grads, nodes, *b, *m, false, g, |gi, _| gi);
            }
            Op::Sub(a, b, m) => {
                accum_bcast(grads, nodes, *a, *m, true, g, |gi, _| gi);
                accum_bcast(grads, nodes, *b, *m, false, g, |gi, _| -gi);
            }
            Op::Mul(a, b, m) => {
                let (va, vb) = (val(*a), val(*b));
                accum_bcast(grads, nodes, *a, *m, true, g, |gi, o| gi * vb[other_idx(*m, false, o, vb.len())]);
                accum_bcast(grads, nodes, *b, *m, false, g, |gi, o| gi * va[other_idx(*m, true, o, va.len())]);
            }
            Op::Div(a, b, m) => {
                let (va, vb) = (val(*a), val(*b));
                accum_bcast(grads, nodes, *a, *m, true, g, |gi, o| gi / vb[other_idx(*m, false, o, vb.len())]);
                accum_bcast(grads, nodes, *b, *m, false, g, |gi, o| {
                    let bv = vb[other_idx(*m, false, o, vb.len())];
                    -gi * va[other_idx(*m, true, o, va.len())] / (bv * bv)
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let ga = grads[*a].get_or_insert_with(|| vec![T::zero(); m * k]);
                    T::gemm(m, n, k, g, (n as isize, 1), val(*b), (1, n as isize), ga, true);
                }
                if wants(*b) {
                    let gb = grads[*b].get_or_insert_with(|| vec![T::zero(); k * n]);
                    T::gemm(k, m, n, val(*a), (1, k as isize), g, (n as isize, 1), gb, true);
                }
            }
            Op::Concat(parts) => {
                let rows = nodes[i].value.rows();
                let width = nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p].value.cols();
                    if wants(p) {
                        let gp = grads[p].get_or_insert_with(|| vec![T::zero(); rows * c]);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] = gp[r * c + j] + g[r * width + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Tanh(a) => accum(grads, nodes, *a, |j| g[j] * (T::one() - y[j] * y[j])),
            Op::Elu(a) => {
                let x = val(*a);
                accum(grads, nodes, *a, |j| if x[j] > T::zero() { g[j] } else { g[j] * (y[j] + T::one()) })
            }
            Op::Softplus(a) => {
                let x = val(*a);
                accum(grads, nodes, *a, |j| g[j] * sigmoid(x[j]))
            }
            Op::Square(a) => {
                let x = val(*a);
                accum(grads, nodes, *a, |j| g[j] * T::lit(2.0) * x[j])
            }
            Op::Sqrt(a) => accum(grads, nodes, *a, |j| g[j] / (T::lit(2.0) * y[j])),
            Op::Scale(a, c) => accum(grads, nodes, *a, |j| g[j] * *c),
            Op::Sum(a) => accum(grads, nodes, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = T::from_usize(nodes[*a].value.len()).unwrap();
                accum(grads, nodes, *a, |_| g[0] / n)
            }
            Op::KlDiag([mq, sq, mp, sp]) => {
                let cols = nodes[*mq].value.cols();
                let (vmq, vsq, vmp, vsp) = (val(*mq), val(*sq), val(*mp), val(*sp));
                let d = |j: usize| vmq[j] - vmp[j];
                accum(grads, nodes, *mq, |j| g[j / cols] * d(j) / (vsp[j] * vsp[j]));
                accum(grads, nodes, *mp, |j| -g[j / cols] * d(j) / (vsp[j] * vsp[j]));
                accum(grads, nodes, *sq, |j| g[j / cols] * (vsq[j] / (vsp[j] * vsp[j]) - T::one() / vsq[j]));
                accum(grads, nodes, *sp, |j| {
                    let p2 = vsp[j] * vsp[j];
                    g[j / cols] * (T::one() / vsp[j] - (vsq[j] * vsq[j] + d(j) * d(j)) / (p2 * vsp[j]))
                });
            }
            Op::LogProb([x, mean, std]) => {
                let cols = nodes[*x].value.cols();
                let (vx, vm, vs) = (val(*x), val(*mean), val(*std));
                let z = |j: usize| (vx[j] - vm[j]) / vs[j];
                accum(grads, nodes, *x, |j| -g[j / cols] * z(j) / vs[j]);
                accum(grads, nodes, *mean, |j| g[j / cols] * z(j) / vs[j]);
                accum(grads, nodes, *std, |j| g[j / cols] * (z(j) * z(j) - T::one()) / vs[j]);
            }
        }
    }
}

fn accum<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], target: usize, f: impl Fn(usize) -> T) {
    if !nodes[target].requires_grad {
        return;
    }
    let n = nodes[target].value.len();
    let gt = grads[target].get_or_insert_with(|| vec![T::zero(); n]);
    for (j, slot) in gt.iter_mut().enumerate() {
        *slot = *slot + f(j);
    }
}

/// Index into the other operand of a broadcast binary op for output position `o`.
fn other_idx(mode: Bcast, other_is_lhs: bool, o: usize, other_len: usize) -> usize {
    match (mode, other_is_lhs) {
        (Bcast::RhsRow, false) | (Bcast::LhsRow, true) => o % other_len,
        _ => o,
    }
}

/// Accumulates `f(g[o], o)` into operand `target` (lhs when `is_lhs`), summing
/// over the batch when that operand was broadcast.
fn accum_bcast<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    target: usize,
    mode: Bcast,
    is_lhs: bool,
    g: &[T],
    f: impl Fn(T, usize) -> T,
) {
    if !nodes[target].requires_grad {
        return;
    }
    let n = nodes[target].value.len();
    let gt = grads[target].get_or_insert_with(|| vec![T::zero(); n]);
    let broadcast = matches!((mode, is_lhs), (Bcast::RhsRow, false) | (Bcast::LhsRow, true));
    for (o, &gi) in g.iter().enumerate() {
        let j = if broadcast { o % n } else { o };
        gt[j] = gt[j] + f(gi, o);
    }
}
