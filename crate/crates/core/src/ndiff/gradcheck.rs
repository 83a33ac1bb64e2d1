//! Central-finite-difference gradient oracle.
//!
//! The oracle perturbs each parameter entry and re-evaluates the forward
//! closure; it never inspects the tape, so it stays independent of the
//! reverse-mode path it checks.

use super::params::ParamStore;
use super::tape::{NodeId, Tape};
use super::NdiffError;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub tolerance: f64,
    pub step: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Relative error with a floor so that near-zero gradient pairs (where the
/// central difference itself is noise-dominated) do not blow up the ratio.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients against central differences with step `h`.
///
/// `forward` must be deterministic in the parameter values (dropout off or
/// seed-pinned) and return the scalar loss node on the provided tape.
pub fn grad_check<F>(
    params: &mut ParamStore,
    mut forward: F,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, NdiffError>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<NodeId, NdiffError>,
{
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = forward(params, &mut tape)?;
    tape.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = (0..params.len())
        .map(|i| params.grad(i).data().to_vec())
        .collect();

    let mut per_param = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let n = params.value(i).numel();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..n {
            let orig = params.value(i).data()[j];
            params.value_mut(i).data_mut()[j] = orig + h;
            let f_plus = {
                let mut t = Tape::new();
                let l = forward(params, &mut t)?;
                t.value(l).item()
            };
            params.value_mut(i).data_mut()[j] = orig - h;
            let f_minus = {
                let mut t = Tape::new();
                let l = forward(params, &mut t)?;
                t.value(l).item()
            };
            params.value_mut(i).data_mut()[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[i][j];
            max_rel = max_rel.max(rel_err(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        per_param.push(ParamCheck {
            name: params.name(i).to_string(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let passed = per_param.iter().all(|p| p.max_rel_err < tolerance);
    Ok(GradCheckReport {
        per_param,
        tolerance,
        step: h,
        passed,
    })
}
