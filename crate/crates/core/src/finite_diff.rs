//! Central-difference gradients, used as the oracle for every analytic
//! backward pass in the crate.

use crate::error::{GamError, Result};
use crate::tensor::ParamSet;

/// Entries whose gradients are both below this magnitude are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `(f(p + h·e_i) − f(p − h·e_i)) / 2h` for every entry of every parameter.
pub fn finite_diff_grad<F>(loss_fn: F, params: &ParamSet, h: f64) -> Result<ParamSet>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(GamError::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut grads = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let len = params.expect(name)?.len();
        for i in 0..len {
            let original = params.expect(name)?.data()[i];
            let mut eval = |value: f64| -> Result<f64> {
                probe.get_mut(name).unwrap().data_mut()[i] = value;
                let loss = loss_fn(&probe)?;
                if !loss.is_finite() {
                    return Err(GamError::NonFinite(format!("loss when probing {name}[{i}]")));
                }
                Ok(loss)
            };
            let plus = eval(original + h)?;
            let minus = eval(original - h)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original;
            grads.get_mut(name).unwrap().data_mut()[i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Worst entrywise relative error per parameter, in parameter order.
pub fn worst_relative_errors(analytic: &ParamSet, numeric: &ParamSet) -> Result<Vec<(String, f64)>> {
    if !analytic.same_layout(numeric) {
        return Err(GamError::Shape("gradient sets have different layouts".into()));
    }
    Ok(analytic
        .iter()
        .zip(numeric.iter())
        .map(|((name, a), (_, n))| {
            let worst = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| relative_error(x, y))
                .fold(0.0, f64::max);
            (name.to_owned(), worst)
        })
        .collect())
}
