//! FLOP estimates from non-embedding parameter counts.
//!
//! A feed-forward transformer spends `6N` per token (forward plus backward).
//! One EBT optimization step runs a forward pass, a backward pass for the
//! prediction gradient, and a backward pass for the parameter gradient,
//! `(2N + 4N + 4N)`, doubled for the second-order terms: `20N`.

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{EbtError, Result};

pub const FF_PER_PARAM: u64 = 6;
pub const EBT_STEP_PER_PARAM: u64 = 20;

fn check_params(n: u64) -> Result<()> {
    if n == 0 {
        return Err(EbtError::contract("non-embedding parameter count must be positive"));
    }
    Ok(())
}

pub fn flops_ff_per_token(n: u64) -> Result<u128> {
    check_params(n)?;
    Ok(FF_PER_PARAM as u128 * n as u128)
}

pub fn flops_ebt_per_token(n: u64, steps: u64) -> Result<u128> {
    check_params(n)?;
    if steps == 0 {
        return Err(EbtError::contract("EBT FLOPs need at least one optimization step"));
    }
    Ok(steps as u128 * EBT_STEP_PER_PARAM as u128 * n as u128)
}

/// Exact EBT / feed-forward cost ratio; independent of `N`.
pub fn ebt_ratio(steps: u64) -> Result<Ratio<u64>> {
    if steps == 0 {
        return Err(EbtError::contract("EBT FLOPs need at least one optimization step"));
    }
    Ok(Ratio::new(steps * EBT_STEP_PER_PARAM, FF_PER_PARAM))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub nonembed_params: u64,
    pub steps: u64,
    pub ff_per_token: u128,
    pub per_step_flops: u128,
    pub per_token_flops: u128,
    pub tokens: u64,
    pub total: u128,
    /// `(numerator, denominator)` of the exact ratio versus feed-forward.
    pub ratio_vs_ff: (u64, u64),
    pub ratio_vs_ff_decimal: f64,
}

pub fn flop_report(nonembed_params: u64, steps: u64, tokens: u64) -> Result<FlopReport> {
    let per_token = flops_ebt_per_token(nonembed_params, steps)?;
    let ratio = ebt_ratio(steps)?;
    Ok(FlopReport {
        nonembed_params,
        steps,
        ff_per_token: flops_ff_per_token(nonembed_params)?,
        per_step_flops: flops_ebt_per_token(nonembed_params, 1)?,
        per_token_flops: per_token,
        tokens,
        total: per_token * tokens as u128,
        ratio_vs_ff: (*ratio.numer(), *ratio.denom()),
        ratio_vs_ff_decimal: *ratio.numer() as f64 / *ratio.denom() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(flops_ff_per_token(1_000_000).unwrap(), 6_000_000);
        assert_eq!(flops_ff_per_token(6_180_000).unwrap(), 37_080_000);
        assert_eq!(flops_ebt_per_token(1_000_000, 1).unwrap(), 20_000_000);
        assert_eq!(ebt_ratio(1).unwrap(), Ratio::new(10, 3));
        assert_eq!(ebt_ratio(2).unwrap(), Ratio::new(20, 3));
        assert!(flops_ff_per_token(0).is_err());
        assert!(flops_ebt_per_token(5, 0).is_err());
    }
}
