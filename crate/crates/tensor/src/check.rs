use crate::graph::{Graph, NodeId};
use crate::param::ParamSet;
use crate::{Result, TensorError};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Parameter and flat coordinate where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares analytic gradients against central differences for every
/// coordinate of every parameter in `params`.
///
/// `build` must construct a fresh graph from the current parameter values and
/// return it with its scalar loss node. Relative error uses the denominator
/// `max(1, |analytic|, |numeric|)` so near-zero gradients are compared
/// absolutely. Graphs containing a non-smooth operation (dropout) are
/// rejected: a two-sided difference across a kink says nothing about the
/// one-sided derivatives actually used.
pub fn grad_check<F>(params: &mut ParamSet, h: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(Graph, NodeId)>,
{
    if h <= 0.0 {
        return Err(TensorError::Invalid { op: "grad_check", msg: format!("step {h} must be positive") });
    }
    let (mut graph, loss) = build(params)?;
    if let Some(op) = graph.non_smooth_op() {
        return Err(TensorError::NotCheckable(op));
    }
    let loss_value = graph.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(TensorError::NonFinite("grad_check loss".into()));
    }
    let grads = graph.backward(loss)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, coords_checked: 0 };
    for id in params.ids().collect::<Vec<_>>() {
        let n_coords = params.get(id)?.value.len();
        for i in 0..n_coords {
            let orig = params.get(id)?.value.data()[i];

            params.get_mut(id)?.value.data_mut()[i] = orig + h;
            let (g_plus, l_plus) = build(params)?;
            let f_plus = g_plus.value(l_plus).item()?;

            params.get_mut(id)?.value.data_mut()[i] = orig - h;
            let (g_minus, l_minus) = build(params)?;
            let f_minus = g_minus.value(l_minus).item()?;

            params.get_mut(id)?.value.data_mut()[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let analytic = grads.get(id).map(|g| g.data()[i]).unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((params.get(id)?.name.clone(), i));
            }
        }
    }
    Ok(report)
}
