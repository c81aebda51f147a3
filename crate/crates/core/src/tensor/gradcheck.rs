//! Central finite-difference verification of gradient rules.

use super::tape::{Tape, TensorId};
use super::{Tensor, TensorError};

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    /// Flat element index (across all inputs, in order) of the worst error.
    pub worst_index: usize,
}

/// Compare analytic gradients of a scalar-valued graph against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` at every input element.
///
/// `build` must construct the same graph for any values of the inputs; the
/// relative error is `|a - n| / max(1e-8, |a| + |n|)`. Kinked inputs produce
/// large errors, not failures.
pub fn finite_diff_check<F>(
    op_name: &str,
    inputs: &[Tensor],
    eps: f64,
    build: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    debug_assert!((1e-7..=1e-3).contains(&eps), "eps {eps} outside sane range");

    let eval = |vals: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids = insert_all(&mut tape, vals)?;
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar_value(loss))
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids = insert_all(&mut tape, inputs)?;
    let loss = build(&mut tape, &ids)?;
    if tape.data(loss).len() != 1 {
        return Err(TensorError::Graph("gradcheck needs a scalar loss".into()));
    }
    let store = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| store.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    let mut flat = 0;
    for (pi, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[pi].data[ei] += eps;
            let mut minus = inputs.to_vec();
            minus[pi].data[ei] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_index = flat;
            }
            flat += 1;
        }
    }
    Ok(GradCheckReport { op_name: op_name.to_string(), max_rel_err, worst_index })
}

fn insert_all(tape: &mut Tape, vals: &[Tensor]) -> Result<Vec<TensorId>, TensorError> {
    vals.iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(t)
        })
        .collect()
}
