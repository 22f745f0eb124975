use crate::backward::grad;
use crate::error::AutodiffError;
use crate::value::{with_precision, Precision, Value};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the engine gradient of scalar `f` at `x` against central
/// differences with step `eps` and returns the worst relative error.
pub fn finite_difference_check(
    f: impl Fn(&Value) -> Value,
    x: &Value,
    eps: f64,
) -> Result<f64, AutodiffError> {
    if !(eps > 0.0) {
        return Err(AutodiffError::InvalidStep(eps));
    }
    if x.precision() != Precision::F64 {
        return Err(AutodiffError::PrecisionTooLow);
    }
    let leaf = x.detach_requiring_grad();
    let y = f(&leaf);
    if y.numel() != 1 {
        return Err(AutodiffError::NonScalarOutput(y.shape().to_vec()));
    }
    let analytic = grad(&y, &[leaf], false)?.remove(0);

    let base = x.to_vec();
    let eval = |data: Vec<f64>, index: usize, direction: &'static str| {
        // A tracked leaf, so `f` may itself differentiate its argument.
        let probe = with_precision(Precision::F64, || Value::parameter(data, x.shape()));
        let value = f(&probe).item();
        if value.is_finite() {
            Ok(value)
        } else {
            Err(AutodiffError::NonFinite { index, direction, value })
        }
    };
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = eval(plus, i, "+eps")?;
        let fm = eval(minus, i, "-eps")?;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
