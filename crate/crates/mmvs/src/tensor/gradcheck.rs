//! Central finite-difference gradient oracle.
//!
//! Test support: compares gradients from the backward pass against an
//! independent difference quotient computed from forward evaluations only.
//! All oracle evaluations run under [`Precision::F64`] so the quotient is
//! not polluted by 32-bit rounding of the forward pass.

use super::{with_precision, ParamSet, Precision, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn from_pairs(pairs: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        let mut checked = 0;
        for (analytic, numeric) in pairs {
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
            checked += 1;
        }
        GradCheckReport {
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            checked,
        }
    }
}

/// Central finite differences of a scalar-valued function of one tensor.
pub fn finite_diff_grad(
    shape: &[usize],
    values: &[f64],
    f: &dyn Fn(&Tensor) -> f64,
    h: f64,
) -> Vec<f64> {
    with_precision(Precision::F64, || {
        (0..values.len())
            .map(|i| {
                let mut vp = values.to_vec();
                vp[i] += h;
                let mut vm = values.to_vec();
                vm[i] -= h;
                let fp = f(&Tensor::from_vec(shape, vp));
                let fm = f(&Tensor::from_vec(shape, vm));
                (fp - fm) / (2.0 * h)
            })
            .collect()
    })
}

/// Backward-pass gradient of `loss_fn` w.r.t. one input tensor, compared
/// against central finite differences over every element.
pub fn check_tensor_grad(
    shape: &[usize],
    values: &[f64],
    loss_fn: &dyn Fn(&Tensor) -> Tensor,
    h: f64,
) -> GradCheckReport {
    with_precision(Precision::F64, || {
        let x = Tensor::param(shape, values.to_vec());
        let loss = loss_fn(&x);
        loss.backward();
        let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.len()]);
        let numeric = finite_diff_grad(shape, values, &|t| loss_fn(t).value(), h);
        GradCheckReport::from_pairs(analytic.into_iter().zip(numeric))
    })
}

/// Gradient check for selected entries of a parameter set.
///
/// `entries` lists `(parameter name, flat index)` pairs to perturb. The
/// analytic side comes from one backward pass of `loss_fn`; the numeric side
/// re-evaluates the loss on perturbed copies of the set.
pub fn gradcheck_params(
    params: &ParamSet,
    loss_fn: &dyn Fn(&ParamSet) -> Tensor,
    entries: &[(String, usize)],
    h: f64,
) -> GradCheckReport {
    with_precision(Precision::F64, || {
        let base = params.clone_params();
        base.zero_grads();
        let loss = loss_fn(&base);
        loss.backward();
        let pairs: Vec<(f64, f64)> = entries
            .iter()
            .map(|(name, idx)| {
                let p = base.get(name).unwrap_or_else(|| panic!("no param {name}"));
                let analytic = p.grad().map(|g| g[*idx]).unwrap_or(0.0);
                let eval = |delta: f64| -> f64 {
                    let mut perturbed = ParamSet::new();
                    for (n, t) in params.iter() {
                        let mut vals = t.values().to_vec();
                        if n == name {
                            vals[*idx] += delta;
                        }
                        perturbed.insert(n.clone(), Tensor::param(t.shape(), vals));
                    }
                    loss_fn(&perturbed).value()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                (analytic, numeric)
            })
            .collect();
        GradCheckReport::from_pairs(pairs.into_iter())
    })
}
