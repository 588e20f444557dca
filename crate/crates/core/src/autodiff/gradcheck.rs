use crate::scalar::Real;

use super::{AutodiffError, ParamId, ParamStore, Tape, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Options for [`gradient_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Cap on entries checked per parameter; evenly spaced when exceeded.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_param: None,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn entries(numel: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < numel && c > 0 => (0..c).map(|i| i * numel / c).collect(),
        _ => (0..numel).collect(),
    }
}

/// Checks `d f / d params` from one backward pass against central
/// differences of the scalar function `f`. Parameter values are restored
/// before returning; grad slots are left zeroed.
pub fn gradient_check<T, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    opts: GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport, AutodiffError>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var, AutodiffError>,
{
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(AutodiffError::InvalidArgument(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.step
        )));
    }
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| store.grad(id).data().iter().map(|g| g.as_f64()).collect())
        .collect();
    store.zero_grad();

    let mut eval = |store: &ParamStore<T>| -> Result<f64, AutodiffError> {
        let mut tape = Tape::no_grad();
        let out = f(&mut tape, store)?;
        Ok(tape.value(out).item().as_f64())
    };

    let h = T::lit(opts.step);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, &id) in params.iter().enumerate() {
        if let Some(k) = analytic[pi].iter().position(|g| !g.is_finite()) {
            return Err(AutodiffError::NonFinite {
                context: format!("analytic gradient of {}", store.name(id)),
                index: k,
            });
        }
        let numel = store.value(id).numel();
        for k in entries(numel, opts.max_entries_per_param) {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            let a = analytic[pi][k];
            if !plus.is_finite() || !minus.is_finite() || !a.is_finite() {
                return Err(AutodiffError::NonFinite {
                    context: format!("gradient check of {}", store.name(id)),
                    index: k,
                });
            }
            // divide by the step actually realised in T
            let realised = ((orig + h) - (orig - h)).as_f64();
            let numeric = (plus - minus) / realised;
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), k));
                }
            }
        }
    }
    Ok(report)
}
