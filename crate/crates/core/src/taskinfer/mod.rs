//! Permutation-invariant task inference: a shared set encoder maps each
//! context transition to a Gaussian observation of the task, and the
//! observations are fused with a Gaussian prior in closed form.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::{reparam_sample, DiffError, NoiseSource, Scalar, Var};
use crate::nn::{positive, Graph, Linear, ParamGroup, ParamStore};
use crate::{Tape, Tensor};

/// Lower bound on encoder variances.
pub const VARIANCE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPrior<T> {
    pub mu_0: Vec<T>,
    pub sigma_0_sq: Vec<T>,
}

impl<T: Scalar> TaskPrior<T> {
    pub fn standard(dim: usize) -> Self {
        Self { mu_0: vec![T::zero(); dim], sigma_0_sq: vec![T::one(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.mu_0.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentObservation<T> {
    pub x: Vec<T>,
    pub sigma_sq: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBelief<T> {
    pub mu_l: Vec<T>,
    pub sigma_l_sq: Vec<T>,
}

impl<T: Scalar> TaskBelief<T> {
    /// `μ + σ ⊙ ε`; zero variance yields `μ` exactly.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<T> {
        self.mu_l
            .iter()
            .zip(&self.sigma_l_sq)
            .map(|(&m, &v)| m + v.sqrt() * T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    pub fn mean(&self) -> &[T] {
        &self.mu_l
    }
}

impl<T: Scalar> From<TaskPrior<T>> for TaskBelief<T> {
    fn from(p: TaskPrior<T>) -> Self {
        Self { mu_l: p.mu_0, sigma_l_sq: p.sigma_0_sq }
    }
}

/// Order-independent sum: terms are added in a canonical order so any
/// permutation of the input gives the same bits.
fn canonical_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_by(|a, b| a.partial_cmp(b).expect("finite terms"));
    terms.iter().fold(T::zero(), |acc, &t| acc + t)
}

/// Closed-form posterior of `N(prior)·Π N(x_n | l, σ_n²)` per dimension.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn aggregate<T: Scalar>(prior: &TaskPrior<T>, obs: &[LatentObservation<T>]) -> Result<TaskBelief<T>, DiffError> {
    if prior.sigma_0_sq.iter().any(|&v| !(v > T::zero())) {
        return Err(DiffError::Domain { op: "aggregate", what: "non-positive prior variance" });
    }
    for o in obs {
        if o.x.len() != prior.dim() || o.sigma_sq.len() != prior.dim() {
            return Err(DiffError::Shape { op: "aggregate", lhs: vec![prior.dim()], rhs: vec![o.x.len()] });
        }
        if o.sigma_sq.iter().any(|&v| !(v > T::zero())) {
            return Err(DiffError::Domain { op: "aggregate", what: "non-positive observation variance" });
        }
    }
    let mut prec = vec![T::zero(); obs.len()];
    let mut weighted = vec![T::zero(); obs.len()];
    let mut mu_l = Vec::with_capacity(prior.dim());
    let mut sigma_l_sq = Vec::with_capacity(prior.dim());
    for j in 0..prior.dim() {
        for (n, o) in obs.iter().enumerate() {
            prec[n] = o.sigma_sq[j].recip();
            weighted[n] = (o.x[j] - prior.mu_0[j]) / o.sigma_sq[j];
        }
        let var = (prior.sigma_0_sq[j].recip() + canonical_sum(&mut prec)).recip();
        sigma_l_sq.push(var);
        mu_l.push(prior.mu_0[j] + var * canonical_sum(&mut weighted));
    }
    Ok(TaskBelief { mu_l, sigma_l_sq })
}

/// Shared trunk followed by separate mean and variance heads.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SetEncoder {
    trunk: Linear,
    mean_hidden: Linear,
    mean_out: Linear,
    var_hidden: Linear,
    var_out: Linear,
}

/// Belief variables on a tape, one row per context set.
#[derive(Clone, Copy, Debug)]
pub struct BeliefVars {
    pub mu: Var,
    pub var: Var,
}

impl SetEncoder {
    pub fn new(store: &mut ParamStore, input: usize, units: usize, latent: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Encoder;
        Self {
            trunk: Linear::new(store, "enc.trunk", g, input, units, rng),
            mean_hidden: Linear::new(store, "enc.mean.h", g, units, units, rng),
            mean_out: Linear::new(store, "enc.mean.out", g, units, latent, rng),
            var_hidden: Linear::new(store, "enc.var.h", g, units, units, rng),
            var_out: Linear::new(store, "enc.var.out", g, units, latent, rng),
        }
    }

    pub fn input_width(&self) -> usize {
        self.trunk.input
    }

    pub fn latent_dim(&self) -> usize {
        self.mean_out.output
    }

    pub fn param_count(&self) -> usize {
        [&self.trunk, &self.mean_hidden, &self.mean_out, &self.var_hidden, &self.var_out]
            .iter()
            .map(|l| l.param_count())
            .sum()
    }

    /// Row-wise `(x_n, σ_n²)` for a `[M, W]` batch of flattened transitions.
    pub fn encode(&self, g: &mut Graph, rows: Var) -> Result<(Var, Var), DiffError> {
        let width = g.value(rows).cols();
        if width != self.input_width() {
            return Err(DiffError::Shape { op: "encode", lhs: vec![self.input_width()], rhs: vec![width] });
        }
        let z = self.trunk.forward(g, rows)?;
        let h = g.elu(z)?;
        let m = self.mean_hidden.forward(g, h)?;
        let m = g.elu(m)?;
        let x = self.mean_out.forward(g, m)?;
        let v = self.var_hidden.forward(g, h)?;
        let v = g.elu(v)?;
        let v = self.var_out.forward(g, v)?;
        let var = positive(g, v, VARIANCE_FLOOR)?;
        Ok((x, var))
    }

    /// Latent observations of the rows whose mask entry is set.
    pub fn encode_set(&self, store: &ParamStore, rows: &Tensor, mask: &[bool]) -> Result<Vec<LatentObservation<f64>>, DiffError> {
        if rows.cols() != self.input_width() {
            return Err(DiffError::Shape { op: "encode_set", lhs: vec![self.input_width()], rhs: rows.shape().to_vec() });
        }
        let keep: Vec<usize> = (0..rows.rows()).filter(|&i| mask[i]).collect();
        if keep.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference(store);
        let input = g.constant(rows.gather_rows(&keep))?;
        let (x, var) = self.encode(&mut g, input)?;
        let (x, var) = (g.value(x), g.value(var));
        Ok((0..keep.len())
            .map(|i| LatentObservation { x: x.row(i).to_vec(), sigma_sq: var.row(i).to_vec() })
            .collect())
    }

    /// Belief for one context set, outside any training graph.
    pub fn belief(&self, store: &ParamStore, rows: &Tensor, mask: &[bool], prior: &TaskPrior<f64>) -> Result<TaskBelief<f64>, DiffError> {
        aggregate(prior, &self.encode_set(store, rows, mask)?)
    }

    /// Beliefs for `sets` stacked context sets of equal size: `rows` is
    /// `[sets·N, W]` and `weights` holds one 0/1 entry per row.
    pub fn infer(
        &self,
        g: &mut Graph,
        rows: &Tensor,
        weights: &[f64],
        sets: usize,
        prior: &TaskPrior<f64>,
    ) -> Result<BeliefVars, DiffError> {
        let input = g.constant(rows.clone())?;
        let (x, var) = self.encode(g, input)?;
        aggregate_on_tape(g, x, var, weights, sets, prior)
    }
}

/// Tape version of [`aggregate`] for `sets` groups of consecutive rows;
/// rows with weight 0 drop out of their group's sums.
pub fn aggregate_on_tape(
    g: &mut Tape,
    x: Var,
    var: Var,
    weights: &[f64],
    sets: usize,
    prior: &TaskPrior<f64>,
) -> Result<BeliefVars, DiffError> {
    let rows = g.value(x).rows();
    let dim = g.value(x).cols();
    if sets == 0 || !rows.is_multiple_of(sets) || weights.len() != rows || dim != prior.dim() {
        return Err(DiffError::Shape { op: "aggregate_on_tape", lhs: vec![rows, dim], rhs: vec![sets, weights.len()] });
    }
    let per_set = rows / sets;
    let mut select = vec![0.0; sets * rows];
    for (r, &w) in weights.iter().enumerate() {
        select[(r / per_set) * rows + r] = w;
    }
    let select = g.constant(Tensor::matrix(sets, rows, select)?)?;

    let ones = g.constant(Tensor::ones(&[rows, dim]))?;
    let prec = g.div(ones, var)?;
    let prec_sum = g.matmul(select, prec)?;
    let prior_prec = g.constant(Tensor::vector(prior.sigma_0_sq.iter().map(|v| v.recip()).collect()))?;
    let total = g.add(prec_sum, prior_prec)?;
    let ones = g.constant(Tensor::ones(&[sets, dim]))?;
    let var_l = g.div(ones, total)?;

    let mu_0 = g.constant(Tensor::vector(prior.mu_0.clone()))?;
    let centred = g.sub(x, mu_0)?;
    let weighted = g.mul(centred, prec)?;
    let weighted_sum = g.matmul(select, weighted)?;
    let shift = g.mul(var_l, weighted_sum)?;
    let mu_l = g.add(shift, mu_0)?;
    Ok(BeliefVars { mu: mu_l, var: var_l })
}

/// Reparameterised draw `μ_l + σ_l ⊙ ε`.
pub fn sample_task(g: &mut Tape, belief: BeliefVars, noise: &mut NoiseSource) -> Result<Var, DiffError> {
    let std = g.sqrt(belief.var)?;
    reparam_sample(g, belief.mu, std, noise)
}

/// The belief mean, used for deterministic evaluation.
pub fn mean_task(belief: BeliefVars) -> Var {
    belief.mu
}

#[cfg(test)]
mod tests;
