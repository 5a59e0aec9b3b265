//! Central finite-difference verification of graph gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::error::{usage_err, Result};
use crate::tensor::{Real, Tensor};

/// Finite-difference step.
pub const FD_STEP: Real = 1e-5;
/// Smaller steps tried for elements that fail at [`FD_STEP`]. A ReLU or
/// bilinear kink inside `[x - h, x + h]` spoils the central difference
/// even when the analytic derivative is exact; a wrong gradient disagrees
/// at every step.
pub const REFINED_STEPS: [Real; 2] = [1e-6, 1e-7];
/// Denominator floor of the relative error. Central differences carry a
/// rounding error near `eps * |f| / h`, about 1e-10 for unit-sized losses,
/// which swamps gradients much smaller than this.
pub const ABS_FLOOR: Real = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: Real,
    /// Parameter name and flat element index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Elements that only agreed at a smaller step (a kink inside the
    /// wider stencil).
    pub refined: usize,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn forward<F>(build: &F, values: &[Tensor]) -> Result<Real>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    g.value(root).item()
}

/// Analytic gradients of the scalar built by `build` with respect to each
/// parameter, in order.
pub fn analytic_gradients<F>(build: &F, params: &[(&str, Tensor)]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    g.backward(root)?;
    Ok(ids
        .iter()
        .zip(params)
        .map(|(&id, (_, t))| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Compares supplied analytic gradients against central differences of
/// `build`, element by element.
pub fn compare_gradients<F>(build: &F, params: &[(&str, Tensor)], analytic: &[Tensor], tol: Real) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(tol > 0.0) {
        return Err(usage_err!("tolerance must be positive, got {}", tol));
    }
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0, refined: 0, pass: true };
    for (p, (name, _)) in params.iter().enumerate() {
        for e in 0..values[p].len() {
            let orig = values[p].data()[e];
            let mut central = |h: Real| -> Result<Real> {
                values[p].data_mut()[e] = orig + h;
                let up = forward(build, &values)?;
                values[p].data_mut()[e] = orig - h;
                let down = forward(build, &values)?;
                values[p].data_mut()[e] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let a = analytic[p].data()[e];
            let mut err = relative_error(a, central(FD_STEP)?);
            if err > tol {
                for h in REFINED_STEPS {
                    err = err.min(relative_error(a, central(h)?));
                }
                if err <= tol {
                    report.refined += 1;
                }
            }
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.to_string(), e));
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

/// Checks the graph's gradients of `build` against central differences.
/// Passes iff the largest relative error is at most `tol`.
pub fn grad_check<F>(build: F, params: &[(&str, Tensor)], tol: Real) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let analytic = analytic_gradients(&build, params)?;
    compare_gradients(&build, params, &analytic, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let coeffs = Tensor::from_fn(&[5], |i| i as Real * 0.5 - 1.0);
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let c = g.constant(coeffs.clone());
            let m = g.mul(ids[0], c)?;
            g.sum(m)
        };
        let x = Tensor::from_fn(&[5], |i| i as Real);
        let r = grad_check(build, &[("x", x)], 1e-6).unwrap();
        assert!(r.pass && r.max_rel_err < 1e-10, "{:?}", r);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let s = g.sigmoid(ids[0]);
            g.sum(s)
        };
        let params = [("x", Tensor::from_fn(&[4], |i| i as Real * 0.3 - 0.5))];
        let mut analytic = analytic_gradients(&build, &params).unwrap();
        analytic[0] = analytic[0].map(|v| 2.0 * v);
        let r = compare_gradients(&build, &params, &analytic, 1e-4).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn rejects_nonpositive_tolerance() {
        let build = |g: &mut Graph, ids: &[NodeId]| g.sum(ids[0]);
        assert!(grad_check(build, &[("x", Tensor::zeros(&[1]))], 0.0).is_err());
    }
}
