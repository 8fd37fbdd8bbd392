//! Central-difference gradient verification.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_element: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Relative error with a `1e-8` floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Param(format!("eps must be in (0, 1e-3], got {eps}")));
    }
    Ok(())
}

/// Central-difference gradient of `f` with respect to every element of every parameter.
pub fn finite_difference_gradient<F>(f: &F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = evaluate(f, &work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = evaluate(f, &work)?;
            work[p].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Reverse-mode gradient of `f` at `params`, plus its value.
pub fn analytic_gradient<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok((
        g.value(out).item(),
        vars.iter().map(|&v| grads.get(v)).collect(),
    ))
}

/// Compares a supplied gradient against central differences.
pub fn compare_with_finite_differences<F>(
    f: &F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let numeric = finite_difference_gradient(f, params, eps)?;
    let mut checks = Vec::with_capacity(params.len());
    for (index, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        if a.shape() != n.shape() {
            return Err(Error::Shape(format!(
                "analytic gradient {:?} vs parameter {:?}",
                a.shape(),
                n.shape()
            )));
        }
        let (worst_element, max_rel_err) = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(&x, &y)| relative_error(x, y))
            .enumerate()
            .fold(
                (0, 0.0),
                |best, (i, e)| if e > best.1 { (i, e) } else { best },
            );
        checks.push(ParamCheck {
            index,
            max_rel_err,
            worst_element,
            passed: max_rel_err <= tol,
        });
    }
    Ok(GradCheckReport {
        params: checks,
        tol,
    })
}

/// Checks the reverse-mode gradient of a scalar function against central
/// differences, element by element.
///
/// `f` is evaluated twice up front; differing results are reported as
/// [`Error::NonDeterministic`].
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "repeated evaluation gave {first} then {second}"
        )));
    }
    let (_, analytic) = analytic_gradient(&f, params)?;
    compare_with_finite_differences(&f, params, &analytic, eps, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn square(g: &mut Graph, v: &[Var]) -> Result<Var> {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum_all(sq))
    }

    #[test]
    fn square_passes() {
        let rep = grad_check(square, &[Tensor::scalar(3.0)], 1e-5, 1e-4).unwrap();
        assert!(rep.passed(), "{rep:?}");
        let (_, g) = analytic_gradient(&square, &[Tensor::scalar(3.0)]).unwrap();
        assert!((g[0].item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let params = [Tensor::scalar(3.0)];
        let doubled = [Tensor::scalar(12.0)];
        let rep = compare_with_finite_differences(&square, &params, &doubled, 1e-5, 1e-4).unwrap();
        assert!(!rep.passed());
        assert!(rep.max_rel_err() > 0.4);
    }

    #[test]
    fn nondeterminism_is_detected() {
        let calls = Cell::new(0u32);
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            calls.set(calls.get() + 1);
            let s = g.scale(v[0], calls.get() as f64);
            Ok(g.sum_all(s))
        };
        let err = grad_check(f, &[Tensor::scalar(1.0)], 1e-5, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(_)));
    }

    #[test]
    fn eps_range_is_enforced() {
        assert!(grad_check(square, &[Tensor::scalar(1.0)], 0.0, 1e-4).is_err());
        assert!(grad_check(square, &[Tensor::scalar(1.0)], 1e-2, 1e-4).is_err());
    }
}
