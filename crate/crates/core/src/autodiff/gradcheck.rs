//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Negates the analytic gradient before comparing. Fault injection for
    /// testing the checker itself.
    pub flip_sign: bool,
}

impl GradCheckOptions {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            flip_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose probes crossed a rectifier kink.
    pub skipped_kinks: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(loss_fn: &F, params: &ParamSet) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let value = g.scalar_value(loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {} while probing", value)));
    }
    Ok((value, g.kink_signature().to_vec()))
}

pub fn grad_check<F>(loss_fn: F, params: &ParamSet, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    grad_check_with(loss_fn, params, GradCheckOptions::new(eps))
}

/// Compares analytic gradients against central differences coordinate by
/// coordinate. A coordinate whose `+eps` or `-eps` probe changes the sign
/// pattern of any rectifier input straddles a kink and is skipped.
pub fn grad_check_with<F>(loss_fn: F, params: &ParamSet, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::config("eps", format!("{} must be positive", opts.eps)));
    }
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    if !g.scalar_value(loss)?.is_finite() {
        return Err(Error::NonFinite("loss at the base point".into()));
    }
    let base_kinks = g.kink_signature().to_vec();
    let analytic = g.backward(loss, params)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let grad = &analytic[name];
        for i in 0..tensor.len() {
            let original = tensor.data()[i];
            probe.get_mut(name).expect("cloned set").data_mut()[i] = original + opts.eps;
            let (plus, kinks_plus) = evaluate(&loss_fn, &probe)?;
            probe.get_mut(name).expect("cloned set").data_mut()[i] = original - opts.eps;
            let (minus, kinks_minus) = evaluate(&loss_fn, &probe)?;
            probe.get_mut(name).expect("cloned set").data_mut()[i] = original;

            if kinks_plus != base_kinks || kinks_minus != base_kinks {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let mut a = grad.data()[i];
            if opts.flip_sign {
                a = -a;
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
