use std::fmt::Display;

use crate::error::{NnError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `loss_fn` rebuilds the loss graph from the given parameters; it must be
/// deterministic (fix any RNG inside it). Every scalar of every trainable
/// parameter is perturbed by `±h`. The reported error per scalar is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_difference_check<L, E>(
    mut loss_fn: L,
    params: &mut ParamStore<f64>,
    h: f64,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, NodeId), E>,
    E: Display,
{
    let mut eval = |p: &ParamStore<f64>| -> Result<(Graph<f64>, NodeId)> {
        loss_fn(p).map_err(|e| NnError::LossFn(e.to_string()))
    };
    let (g, loss) = eval(params)?;
    let base = g.scalar(loss)?;
    let grads = g.backward(loss)?;
    drop(g);
    let (g2, loss2) = eval(params)?;
    let again = g2.scalar(loss2)?;
    if base.to_bits() != again.to_bits() {
        return Err(NnError::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = params.ids().filter(|&id| !params.is_frozen(id)).collect();
    for id in ids {
        let n = params.get(id).numel();
        for i in 0..n {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let up = {
                let (g, l) = eval(params)?;
                g.scalar(l)?
            };
            params.get_mut(id).data_mut()[i] = orig - h;
            let down = {
                let (g, l) = eval(params)?;
                g.scalar(l)?
            };
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
