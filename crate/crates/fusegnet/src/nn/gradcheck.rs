//! Central finite-difference gradient checking, shared by the unit tests.

use super::tensor::Tensor;

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Verifies analytic gradients of the scalar expression built by `f` against
/// central finite differences for every element of `tensors`. Panics with the
/// offending coordinate when the relative error exceeds `tol`.
pub fn check_gradients_tol(tensors: &[Tensor], f: impl Fn() -> Tensor, tol: f64) {
    for t in tensors {
        t.zero_grad();
    }
    let loss = f();
    loss.backward();
    let grads: Vec<_> = tensors
        .iter()
        .map(|t| t.grad().expect("parameter received no gradient"))
        .collect();

    let h = 1e-5;
    for (ti, t) in tensors.iter().enumerate() {
        let base = t.to_data();
        for (idx, _) in base.indexed_iter() {
            let mut plus = base.clone();
            plus[&idx] += h;
            t.set_data(plus);
            let fp = crate::nn::tensor::no_grad(&f).scalar();

            let mut minus = base.clone();
            minus[&idx] -= h;
            t.set_data(minus);
            let fm = crate::nn::tensor::no_grad(&f).scalar();

            t.set_data(base.clone());
            let fd = (fp - fm) / (2.0 * h);
            let analytic = grads[ti][&idx];
            let err = relative_error(analytic, fd);
            assert!(
                err <= tol,
                "gradient mismatch at tensor {ti} index {idx:?}: analytic {analytic}, finite-diff {fd}, rel err {err}"
            );
        }
        t.zero_grad();
    }
}

pub fn check_gradients(tensors: &[Tensor], f: impl Fn() -> Tensor) {
    check_gradients_tol(tensors, f, 1e-4);
}
