//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    /// Largest relative error seen in each parameter tensor.
    pub per_tensor: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with a unit floor on the denominator, so entries whose
/// true gradient is near zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares the reverse-mode gradient of the scalar built by `f` with central
/// differences `(f(x+h) − f(x−h)) / 2h` for every entry of every tensor in
/// `params`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], step: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.input(p.clone())).collect();
        let out = f(&mut g, &ids)?;
        if g.value(out).numel() != 1 {
            return Err(Error::InvalidInput("checked function must return a scalar".into()));
        }
        Ok(g.scalar(out))
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| g.grad(id).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut per_tensor = Vec::with_capacity(params.len());
    for (t, grads) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for (i, &a) in grads.iter().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
        per_tensor.push(worst);
    }
    let max_rel_err = per_tensor.iter().copied().fold(0.0, f64::max);
    Ok(CheckReport {
        per_tensor,
        max_rel_err,
        tol,
        passed: max_rel_err <= tol,
    })
}

/// [`finite_diff_check`] over named tensors of a parameter store: `f` builds
/// the loss from `store`, and the tensors listed in `names` are perturbed.
pub fn check_params<F>(f: F, store: &ParamStore<f64>, names: &[&str], step: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let params = names
        .iter()
        .map(|n| store.require(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    finite_diff_check(
        |g, ids| {
            for (n, &id) in names.iter().zip(ids) {
                g.bind_param(n, id);
            }
            f(g, store)
        },
        &params,
        step,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::numerics::Activation;

    fn x123() -> Tensor<f64> {
        Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        let report = finite_diff_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                Ok(g.sum(sq))
            },
            &[x123()],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-8, "{report:?}");

        let mut g = Graph::new();
        let x = g.leaf(x123());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn linear_function_is_exact() {
        let report = finite_diff_check(|g, p| Ok(g.sum(p[0])), &[x123()], 1e-5, 1e-4).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-10);
    }

    #[test]
    fn tight_tolerance_on_gelu_chain_fails() {
        let f = |g: &mut Graph<f64>, p: &[NodeId]| {
            let a = g.activation(p[0], Activation::Gelu);
            let b = g.activation(a, Activation::Gelu);
            let c = g.mul(b, b)?;
            Ok(g.sum(c))
        };
        let x = Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let loose = finite_diff_check(f, &[x.clone()], 1e-5, 1e-4).unwrap();
        assert!(loose.passed);
        let tight = finite_diff_check(f, &[x], 1e-5, 1e-12).unwrap();
        assert!(!tight.passed);
        assert!(tight.max_rel_err > 1e-12);
    }

    #[test]
    fn non_deterministic_function_is_detected() {
        let calls = Cell::new(0u32);
        let err = finite_diff_check(
            |g, p| {
                calls.set(calls.get() + 1);
                let s = g.sum(p[0]);
                Ok(g.scale_shift(s, 1.0, calls.get() as f64))
            },
            &[x123()],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(x123());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));
    }
}
