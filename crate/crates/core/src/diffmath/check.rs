use super::{DiffError, Scalar, Tape, Tensor, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck<T> {
    pub analytic: Tensor<T>,
    pub numeric: Tensor<T>,
    pub max_rel_error: T,
}

/// Worst relative discrepancy between the tape gradient of the scalar
/// function `f` at `point` and central finite differences with step `eps`.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`, so components where
/// both gradients are essentially zero are compared absolutely.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: T) -> Result<T, DiffError>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var, DiffError>,
{
    grad_check_with(f, point, eps).map(|c| c.max_rel_error)
}

pub fn grad_check_with<T, F>(mut f: F, point: &Tensor<T>, eps: T) -> Result<GradCheck<T>, DiffError>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone())?;
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut eval = |p: Tensor<T>| -> Result<T, DiffError> {
        let mut tape = Tape::new();
        let x = tape.constant(p)?;
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };

    let mut numeric = Tensor::zeros(point.shape());
    for j in 0..point.len() {
        let mut plus = point.clone();
        plus.values_mut()[j] = plus.values()[j] + eps;
        let mut minus = point.clone();
        minus.values_mut()[j] = minus.values()[j] - eps;
        let d = (eval(plus)? - eval(minus)?) / (eps + eps);
        numeric.values_mut()[j] = d;
    }

    let floor = T::lit(1e-6);
    let max_rel_error = analytic
        .values()
        .iter()
        .zip(numeric.values())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(T::zero(), T::max);
    Ok(GradCheck { analytic, numeric, max_rel_error })
}
