//! Chi-squared tail probabilities and quantiles.

use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::error::{Result, SimError};

/// `P(X <= x)` for `X ~ χ²(dof)`.
pub fn chi2_cdf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_lr(dof as f64 / 2.0, x / 2.0)
}

/// `P(X > x)` for `X ~ χ²(dof)`, accurate far into the tail.
pub fn chi2_sf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(dof as f64 / 2.0, x / 2.0)
}

/// Threshold `γ` with `P(χ²(dof) > γ) = alpha`.
///
/// Bracketed bisection on the regularized upper incomplete gamma function,
/// run until the bracket stops shrinking.
pub fn chi2_threshold(dof: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SimError::InvalidAlpha(alpha));
    }
    if dof == 0 {
        return Err(SimError::Config(
            "chi-squared threshold needs dof >= 1".into(),
        ));
    }
    let mut lo = 0.0_f64;
    let mut hi = dof as f64 + 10.0;
    while chi2_sf(hi, dof) > alpha {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_sf(mid, dof) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
