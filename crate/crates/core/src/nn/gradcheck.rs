//! Central finite-difference reference gradients.

use super::{Module, Scalar};

/// Central differences of `loss` with respect to every parameter element,
/// grouped per parameter tensor in traversal order.
pub fn param_fd<T, M, F>(module: &M, eps: f64, loss: F) -> Vec<(String, Vec<f64>)>
where
    T: Scalar,
    M: Module<T>,
    F: Fn(&M) -> f64,
{
    let named = module.named_params();
    let mut out = Vec::with_capacity(named.len());
    for (k, (name, tensor)) in named.iter().enumerate() {
        let mut fd = Vec::with_capacity(tensor.len());
        for i in 0..tensor.len() {
            let plus = perturbed(module, k, i, eps);
            let minus = perturbed(module, k, i, -eps);
            fd.push((loss(&plus) - loss(&minus)) / (2.0 * eps));
        }
        out.push((name.clone(), fd));
    }
    out
}

fn perturbed<T: Scalar, M: Module<T>>(module: &M, k: usize, i: usize, delta: f64) -> M {
    let mut m = module.clone();
    let mut j = 0;
    m.visit_mut("", &mut |_, t| {
        if j == k {
            t.data[i] = T::of(t.data[i].f64() + delta);
        }
        j += 1;
    });
    m
}

/// Central differences of `f` with respect to each entry of `x`.
pub fn input_fd<F: Fn(&[f64]) -> f64>(x: &[f64], eps: f64, f: F) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + eps;
            let fp = f(&xp);
            xp[i] = orig - eps;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, 1e-4)`. The floor keeps gradients that
/// vanish analytically (such as key biases under softmax shift invariance)
/// from turning finite-difference round-off into a relative error of one.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    diff / scale.max(1e-4)
}

/// Worst per-tensor relative error between a gradient module and FD values.
pub fn worst_rel_error<T: Scalar, M: Module<T>>(grad: &M, fd: &[(String, Vec<f64>)]) -> (String, f64) {
    let analytic = grad.named_params();
    assert_eq!(analytic.len(), fd.len());
    let mut worst = (String::new(), 0.0);
    for ((name, t), (_, numeric)) in analytic.iter().zip(fd) {
        let a: Vec<f64> = t.data.iter().map(|x| x.f64()).collect();
        let e = rel_error(&a, numeric);
        if e > worst.1 || worst.0.is_empty() {
            worst = (name.clone(), e);
        }
    }
    worst
}
