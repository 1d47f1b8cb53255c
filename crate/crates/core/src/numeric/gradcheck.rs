//! Central finite-difference verification of analytic gradients.

use std::fmt;

use super::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative error. Gradient entries smaller than
    /// this are judged on absolute error scaled by the floor.
    pub floor: f64,
    /// Check at most this many coordinates per parameter, evenly strided.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<28} coords={:<5} max_rel_err={:.3e} (index {}: analytic {:.6e}, numeric {:.6e})",
                p.name, p.coords, p.max_rel_error, p.worst_index, p.analytic, p.numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient returned by `f` against central
/// differences `(f(p+ε) − f(p−ε)) / 2ε` for every listed parameter.
///
/// `f` must be deterministic in the parameters (fixed noise seeds).
pub fn grad_check<F>(store: &ParamStore, params: &[ParamId], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Grads)>,
{
    let (base, grads) = f(store)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("objective at base point".into()));
    }
    let mut work = store.clone();
    let mut report = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.value(id).len();
        let stride = match opts.max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            coords: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for index in (0..n).step_by(stride) {
            let original = store.value(id).data()[index];
            let eval = |work: &mut ParamStore, x: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[index] = x;
                let (v, _) = f(work)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "objective with {}[{index}] = {x}",
                        store.name(id)
                    )));
                }
                Ok(v)
            };
            let plus = eval(&mut work, original + opts.step)?;
            let minus = eval(&mut work, original - opts.step)?;
            work.value_mut(id).data_mut()[index] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads.entry(id, index);
            let err = relative_error(analytic, numeric, opts.floor);
            check.coords += 1;
            if err > check.max_rel_error || check.coords == 1 {
                check.max_rel_error = err;
                check.worst_index = index;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tol: opts.tol,
    })
}
