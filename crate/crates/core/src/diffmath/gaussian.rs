use super::{DiffError, NoiseSource, Scalar, Tape, Var};

/// Closed-form KL(N(mq, diag sq²) ‖ N(mp, diag sp²)).
pub fn kl_diag<T: Scalar>(mq: &[T], sq: &[T], mp: &[T], sp: &[T]) -> T {
    let half = T::lit(0.5);
    (0..mq.len())
        .map(|j| {
            let d = mq[j] - mp[j];
            (sp[j] / sq[j]).ln() + (sq[j] * sq[j] + d * d) / (T::lit(2.0) * sp[j] * sp[j]) - half
        })
        .sum()
}

/// Diagonal Gaussian log-density, summed over dimensions.
pub fn log_prob_diag<T: Scalar>(x: &[T], mean: &[T], std: &[T]) -> T {
    let c = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    (0..x.len())
        .map(|j| {
            let z = (x[j] - mean[j]) / std[j];
            -c - std[j].ln() - T::lit(0.5) * z * z
        })
        .sum()
}

/// `mean + std ⊙ ε` with ε drawn from `noise` and recorded as a constant, so
/// gradients reach `mean` and `std` but not the draw.
pub fn reparam_sample<T: Scalar>(
    tape: &mut Tape<T>,
    mean: Var,
    std: Var,
    noise: &mut NoiseSource,
) -> Result<Var, DiffError> {
    let shape = tape.value(mean).shape().to_vec();
    if tape.value(std).shape() != shape.as_slice() {
        return Err(DiffError::Shape {
            op: "reparam_sample",
            lhs: shape,
            rhs: tape.value(std).shape().to_vec(),
        });
    }
    let eps = tape.constant(noise.normal(&shape))?;
    let spread = tape.mul(std, eps)?;
    tape.add(mean, spread)
}
