//! Finite-difference checking of backward implementations.
//!
//! `central_diff` treats the computation as a black box from parameter
//! values to a scalar and estimates each partial derivative with a central
//! difference. Tests rebuild the graph inside the closure so no state
//! leaks between evaluations.

use crate::tensor::Tensor;

/// Numerically estimate `d f / d params` by central differences with step `h`.
///
/// `f` must be a pure function of the parameter values it is handed.
pub fn central_diff<F>(params: &[Tensor], mut f: F, h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = f(&work);
            work[p].data_mut()[i] = orig - h;
            let down = f(&work);
            work[p].data_mut()[i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        grads.push(Tensor::new(params[p].shape().to_vec(), g).expect("grad shape"));
    }
    grads
}

/// Largest elementwise relative error between two gradients.
///
/// The denominator is floored at 0.01 so near-zero gradients are compared
/// absolutely (central differences carry ~1e-9 of truncation noise).
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-2))
        .fold(0.0, f64::max)
}
