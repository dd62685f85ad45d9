use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Gradients smaller than this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the backward pass of `f` with central differences on every
/// coordinate of every parameter in `store` (or only those in `only`).
///
/// `f` builds a scalar on an inference graph, so dropout is inactive.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, only: Option<&[ParamId]>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Argument(format!("finite-difference step must be in [1e-6, 1e-4], got {h}")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::Dimension(format!("grad_check closure must return a scalar, got {:?}", v.shape())));
        }
        let v = v.data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check objective is not finite".into()));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in ids {
        let n = store.value(id).numel();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[i]);
            let rel = relative_error(a, numeric);
            let abs = (a - numeric).abs();
            report.coordinates += 1;
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
