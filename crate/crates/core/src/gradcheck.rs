//! Central finite-difference verification of tape gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Worst element found by [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn eval<T, F>(f: &F, params: &[Tensor<T>]) -> Result<(Graph<T>, Vec<Var>, Var)>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.input(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::invalid(
            "grad_check",
            "function must return a scalar",
        ));
    }
    v.check_finite("grad_check forward")?;
    Ok((g, vars, out))
}

/// Compares the tape gradient of a scalar function of `params` against
/// central differences with step `eps`.
///
/// The error per element is `|a − n| / max(|a|, |n|, τ)` with
/// `τ = 1e-5·max(1, |f|)`: components smaller than `τ` are compared in
/// absolute terms, since a central difference cannot resolve them from
/// rounding noise. The maximum over all elements of all parameters is
/// reported.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = eval(&f, params)?;
    let floor = 1e-5 * g.value(out).data()[0].as_f64().abs().max(1.0);
    let grads = g.backward(out)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let h = T::from_f64_lossy(eps);
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![T::zero(); params[pi].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let (gp, _, op) = eval(&f, &work)?;
            let plus = gp.value(op).data()[0].as_f64();
            work[pi].data_mut()[i] = orig - h;
            let (gm, _, om) = eval(&f, &work)?;
            let minus = gm.value(om).data()[0].as_f64();
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = a.as_f64();
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check param {pi} element {i}"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    param: pi,
                    element: i,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let w = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let r = grad_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                Ok(g.sum(sq))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let w = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        assert!(grad_check(|g, p| Ok(g.sum(p[0])), &[w], 1e-5).is_err());
    }
}
