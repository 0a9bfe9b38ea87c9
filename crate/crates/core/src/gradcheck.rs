//! Central finite-difference check of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{build_objective, LossWeights, ObjectiveBatch, ObjectiveTerm};
use crate::model::ModelState;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over the checked coordinates.
    pub max_rel_error: f64,
    /// Flat index of the coordinate attaining `max_rel_error`.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose ±step perturbation crossed a non-differentiable
    /// point (relu/abs kink or a changed top-k selection).
    pub excluded: Vec<usize>,
    pub tol: f64,
    pub passed: bool,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Relative error after discounting `resolution`, the part of `|a − b|`
/// that the finite-difference estimate cannot resolve.
pub fn resolved_relative_error(a: f64, b: f64, resolution: f64) -> f64 {
    ((a - b).abs() - resolution).max(0.0) / a.abs().max(b.abs()).max(1e-8)
}

struct Estimate {
    value: f64,
    /// Floating-point rounding bound of `value`.
    rounding: f64,
}

fn evaluate<F>(builder: &F, leaf: &Tensor) -> Result<(f64, u64, Graph, NodeId, NodeId)>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::with_kink_tracking();
    let id = g.param(leaf.clone())?;
    let loss = builder(&mut g, id)?;
    let value = g.value(loss).item()?;
    let sig = g.kink_signature().unwrap_or(0);
    Ok((value, sig, g, id, loss))
}

/// Compares the analytic gradient of `builder`'s scalar loss with respect to
/// `leaf` against fourth-order central differences (points `±h`, `±2h`).
///
/// Each coordinate is differenced at `h = step`; when that estimate misses
/// `tol` or crosses a non-differentiable point, it is differenced again at
/// `h = step / 10` and the closer of the two estimates counts. Differences
/// below the stencil's rounding bound, taken relative to the largest value
/// in the loss graph, are not counted. A
/// coordinate is excluded when both steps cross a non-differentiable point.
///
/// `builder` receives a fresh graph and the node holding `leaf`, and must
/// rebuild the loss deterministically from it.
pub fn check_gradient<F>(builder: F, leaf: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let (base, base_sig, mut g, id, loss) = evaluate(&builder, leaf)?;
    let (again, again_sig, ..) = evaluate(&builder, leaf)?;
    if base.to_bits() != again.to_bits() || base_sig != again_sig {
        return Err(Error::InvalidArgument(format!(
            "loss builder is not deterministic: {base} then {again}"
        )));
    }
    // Rounding in the loss is relative to its largest intermediate value.
    let scale = g.value_scale().max(base.abs());
    g.backward(loss)?;
    let analytic = g
        .grad(id)
        .unwrap_or_else(|| Tensor::zeros(leaf.shape()));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        excluded: Vec::new(),
        tol,
        passed: true,
    };
    let mut probe = leaf.clone();
    for i in 0..leaf.numel() {
        let x0 = leaf.data()[i];
        let mut stencil = |h: f64| -> Result<Option<Estimate>> {
            let mut at = |offset: f64| -> Result<(f64, u64)> {
                probe.data_mut()[i] = x0 + offset;
                let (v, sig, ..) = evaluate(&builder, &probe)?;
                Ok((v, sig))
            };
            let (p1, s1) = at(h)?;
            let (m1, s2) = at(-h)?;
            let (p2, s3) = at(2.0 * h)?;
            let (m2, s4) = at(-2.0 * h)?;
            probe.data_mut()[i] = x0;
            if [s1, s2, s3, s4].iter().any(|&s| s != base_sig) {
                return Ok(None);
            }
            Ok(Some(Estimate {
                value: (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h),
                rounding: 18.0 * f64::EPSILON * scale / (12.0 * h),
            }))
        };
        let a = analytic.data()[i];
        let err_of = |d: &Estimate| resolved_relative_error(a, d.value, d.rounding);
        let err = match stencil(step)? {
            Some(d0) if err_of(&d0) <= tol => err_of(&d0),
            first => match (first, stencil(step / 10.0)?) {
                (Some(d0), Some(d1)) => err_of(&d0).min(err_of(&d1)),
                (Some(d), None) | (None, Some(d)) => err_of(&d),
                (None, None) => {
                    report.excluded.push(i);
                    continue;
                }
            },
        };
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// Checks one objective term against every model parameter in turn; one
/// report per parameter tensor, in [`ModelState::params`] order.
pub fn check_objective_term(
    model: &ModelState,
    batch: &ObjectiveBatch<'_>,
    weights: &LossWeights,
    term: ObjectiveTerm,
    step: f64,
    tol: f64,
) -> Result<Vec<GradCheckReport>> {
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    params
        .iter()
        .enumerate()
        .map(|(p, value)| {
            let builder = |g: &mut Graph, leaf: NodeId| -> Result<NodeId> {
                let mut m = model.clone();
                *m.params_mut()[p] = g.value(leaf).clone();
                let mut vars = m.bind(g, false)?;
                vars.set_param(p, leaf)?;
                let nodes = build_objective(g, &mut vars, &m, batch, weights)?;
                term.node(&nodes)
                    .ok_or_else(|| Error::InvalidArgument(format!("{term:?} has zero weight")))
            };
            check_gradient(builder, value, step, tol)
        })
        .collect()
}
