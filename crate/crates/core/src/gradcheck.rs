//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`]; `worst_*` identify the coordinate with the
/// largest relative error.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(loss_fn: &mut F, params: &[Tensor], trainable: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.clone(), trainable))
        .collect();
    let loss = loss_fn(&mut g, &vars)?;
    if !g.value(loss).all_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok((g, vars, loss))
}

/// Compares the analytic gradient of `loss_fn` with central differences of
/// step `h` at every coordinate of every parameter.
///
/// `loss_fn` receives a fresh graph and one leaf per entry of `params` and
/// must return a scalar node.
pub fn grad_check<F>(mut loss_fn: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let (g, vars, loss) = evaluate(&mut loss_fn, params, true)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaf gradient"))
        .collect();

    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for p in 0..probe.len() {
        for i in 0..probe[p].len() {
            let orig = probe[p].data()[i];
            probe[p].data_mut()[i] = orig + h;
            let (g, _, l) = evaluate(&mut loss_fn, &probe, false)?;
            let plus = g.value(l).item()?;
            probe[p].data_mut()[i] = orig - h;
            let (g, _, l) = evaluate(&mut loss_fn, &probe, false)?;
            let minus = g.value(l).item()?;
            probe[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[i];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst_param = p;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
