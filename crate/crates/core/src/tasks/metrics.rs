//! Losses on graph values and plain-number metrics.

use std::sync::Arc;

use ebt_autodiff::Value;

/// Weighted mean categorical cross-entropy. `logits` is `[..., V]`,
/// `targets` holds one id per row, `weights` (default all ones) one weight
/// per row. Differentiable in `logits`.
pub fn cross_entropy(logits: &Value, targets: &[usize], weights: Option<&[f64]>) -> Value {
    let v = *logits.shape().last().unwrap();
    let rows = logits.numel() / v;
    assert_eq!(targets.len(), rows, "cross_entropy: {} targets for {rows} rows", targets.len());
    if let Some(bad) = targets.iter().find(|&&t| t >= v) {
        panic!("cross_entropy: target {bad} out of range for {v} classes");
    }
    let flat = logits.reshape(&[rows, v]);
    let maxes: Vec<f64> = flat.data().chunks(v).map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let shifted = flat.sub(&Value::constant(maxes, &[rows, 1]));
    let lse = shifted.exp().sum_axis(1, false).log();
    let picked = shifted.gather_last(Arc::new(targets.to_vec())).reshape(&[rows]);
    let nll = lse.sub(&picked);
    match weights {
        None => nll.mean(),
        Some(w) => {
            assert_eq!(w.len(), rows, "cross_entropy: {} weights for {rows} rows", w.len());
            let total: f64 = w.iter().sum();
            assert!(total > 0.0, "cross_entropy: weights sum to zero");
            nll.mul(&Value::constant(w.to_vec(), &[rows])).sum().scale(1.0 / total)
        }
    }
}

/// Per-row negative log-likelihoods, plain numbers.
pub fn nll_rows(logits: &[f64], v: usize, targets: &[usize]) -> Vec<f64> {
    logits
        .chunks(v)
        .zip(targets)
        .map(|(row, &t)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .collect()
}

pub fn perplexity(cross_entropy: f64) -> f64 {
    cross_entropy.exp()
}

/// Mean smooth-L1 (Huber) loss with threshold `beta`.
pub fn smooth_l1(pred: &Value, target: &Value, beta: f64) -> Value {
    let d = pred.sub(target);
    let small: Vec<bool> = d.data().iter().map(|x| x.abs() < beta).collect();
    let quad = d.square().scale(0.5 / beta);
    let lin = d.abs().add_scalar(-0.5 * beta);
    Value::select(Arc::new(small), &quad, &lin).mean()
}

/// Weighted mean of per-row values.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total
}
