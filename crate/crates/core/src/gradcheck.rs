//! Central finite-difference checks of autograd gradients.

use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::nn::{scalar_f64, to_vec_f64};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Relative error with an absolute floor, so entries whose true gradient is
/// (numerically) zero do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare `d loss / d var` from backprop against central differences for up
/// to `max_entries` evenly spaced entries of each variable.
pub fn check_vars(
    vars: &[(String, Var)],
    loss_fn: &dyn Fn() -> Result<Tensor>,
    eps: f64,
    max_entries: usize,
) -> Result<Vec<GradCheckReport>> {
    let loss = loss_fn()?;
    let grads = loss.backward()?;
    let mut reports = Vec::with_capacity(vars.len());
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec_f64(g)?,
            None => vec![0.0; var.elem_count()],
        };
        let original = var.as_tensor().copy()?;
        let base = to_vec_f64(&original)?;
        let n = base.len();
        let stride = (n / max_entries.max(1)).max(1);
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        for idx in (0..n).step_by(stride).take(max_entries) {
            let mut values = base.clone();
            values[idx] = base[idx] + eps;
            var.set(&Tensor::from_vec(values.clone(), var.shape(), var.device())?.to_dtype(var.dtype())?)?;
            let plus = scalar_f64(&loss_fn()?)?;
            values[idx] = base[idx] - eps;
            var.set(&Tensor::from_vec(values, var.shape(), var.device())?.to_dtype(var.dtype())?)?;
            let minus = scalar_f64(&loss_fn()?)?;
            var.set(&original)?;
            let numeric = (plus - minus) / (2.0 * eps);
            max_rel = max_rel.max(rel_err(analytic[idx], numeric));
            checked += 1;
        }
        reports.push(GradCheckReport {
            name: name.clone(),
            checked,
            max_rel_err: max_rel,
        });
    }
    Ok(reports)
}

/// Worst relative error across a set of reports.
pub fn worst(reports: &[GradCheckReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}
