//! Central-difference gradient estimates, used as the oracle for the tape.

use super::tensor::{relative_error, Tensor};
use crate::error::{Error, Result};

/// Estimates `df/dθ` for every coordinate of every tensor in `params` with
/// `(f(θ + εe) - f(θ - εe)) / 2ε`. The output is aligned with `params`.
pub fn finite_diff<F>(f: F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("finite_diff needs eps > 0, got {eps}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut grad = vec![0.0; params[t].len()];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = params[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = f(&work);
            work[t].data_mut()[i] = orig - eps;
            let minus = f(&work);
            work[t].data_mut()[i] = orig;
            *g = (plus - minus) / (2.0 * eps);
        }
        out.push(Tensor::new(params[t].shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Largest componentwise [`relative_error`] between two aligned gradient sets.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract("gradient sets differ in length"));
    }
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op: "max_relative_error",
                detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
            });
        }
        for (p, q) in x.data().iter().zip(y.data()) {
            worst = worst.max(relative_error(*p, *q));
        }
    }
    Ok(worst)
}

/// Largest per-tensor relative error in max-norm:
/// `max|a-b| / max(1e-8, max|a|, max|b|)` over each tensor pair. Unlike the
/// componentwise metric this is insensitive to finite-difference noise on
/// components that are zero or far below the tensor's scale.
pub fn max_tensor_relative_error(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract("gradient sets differ in length"));
    }
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op: "max_tensor_relative_error",
                detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
            });
        }
        let norm = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = x
            .data()
            .iter()
            .zip(y.data())
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        worst = worst.max(diff / norm(x).max(norm(y)).max(1e-8));
    }
    Ok(worst)
}
