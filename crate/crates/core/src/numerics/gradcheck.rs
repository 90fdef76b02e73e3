//! Central finite-difference oracle for reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::{lit, Scalar};

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub perturbation: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            perturbation: 1e-6,
            max_coords_per_param: None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn eval<T: Scalar, F>(f: &F, params: &ParamStore<T>) -> Result<f64>
where
    F: Fn(&mut Graph<T>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let out = f(&mut g)?;
    if g.data(out).len() != 1 {
        return Err(Error::Oracle("function under check must return a scalar".into()));
    }
    Ok(g.scalar(out).to_f64().unwrap_or(f64::NAN))
}

/// Compares the reverse-mode gradient of `f` with central finite
/// differences for every trainable coordinate of `params`.
///
/// The store is perturbed in place and restored before returning.
pub fn grad_check<T: Scalar, F>(
    f: F,
    params: &mut ParamStore<T>,
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>) -> Result<Var>,
{
    let h = options.perturbation;
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::Parameter(format!(
            "perturbation {h} outside [1e-6, 1e-2]"
        )));
    }
    let base = eval(&f, params)?;
    let again = eval(&f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::new(&*params);
        let out = f(&mut g)?;
        let grads = g.backward(out)?;
        grads
            .params()
            .map(|(id, gr)| (id, gr.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()))
            .collect()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let step: T = lit(h);
    for (id, grad) in analytic {
        let n = grad.len();
        let coords: Vec<usize> = match options.max_coords_per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params.get(id).data()[c];
            params.get_mut(id).data_mut()[c] = orig + step;
            let plus = eval(&f, params);
            params.get_mut(id).data_mut()[c] = orig - step;
            let minus = eval(&f, params);
            params.get_mut(id).data_mut()[c] = orig;
            let (plus, minus) = (plus?, minus?);
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(grad[c], numeric);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((grad[c] - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((params.name(id).to_string(), c));
            }
        }
    }
    Ok(report)
}
