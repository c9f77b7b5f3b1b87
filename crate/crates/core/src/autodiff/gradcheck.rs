//! Central finite-difference verification of analytic gradients.

use super::params::{ParamStore, Precision};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that entries whose true
/// gradient is essentially zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| !b.passed)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient written by `loss_fn` against central
/// differences `(f(p+h) − f(p−h)) / 2h` for every parameter value.
///
/// `loss_fn` receives a store whose gradients are zero, must return the loss
/// and accumulate its analytic gradient into the store.
pub fn gradient_check<F>(
    mut loss_fn: F,
    store: &ParamStore,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    if store.precision() != Precision::Double {
        return Err(Error::InvalidArgument(
            "gradient checks need a double-precision store".into(),
        ));
    }
    let mut analytic = store.clone();
    analytic.zero_grads();
    let f0 = loss_fn(&mut analytic)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("loss at the base point".into()));
    }

    let mut scratch = store.clone();
    let mut blocks = Vec::with_capacity(store.blocks().len());
    for (bi, block) in store.blocks().iter().enumerate() {
        let mut report = BlockReport {
            name: block.name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            passed: true,
        };
        for i in 0..block.len() {
            let p = block.value[i];
            let mut eval = |x: f64, s: &mut ParamStore| -> Result<f64> {
                s.blocks_mut()[bi].value[i] = x;
                s.zero_grads();
                let f = loss_fn(s)?;
                if !f.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss with `{}`[{i}] perturbed",
                        block.name
                    )));
                }
                Ok(f)
            };
            let fp = eval(p + h, &mut scratch)?;
            let fm = eval(p - h, &mut scratch)?;
            scratch.blocks_mut()[bi].value[i] = p;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.blocks()[bi].grad[i];
            let rel = relative_error(a, numeric);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = i;
            }
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        }
        report.passed = report.max_rel_error <= tolerance;
        blocks.push(report);
    }
    Ok(GradCheckReport { tolerance, blocks })
}
