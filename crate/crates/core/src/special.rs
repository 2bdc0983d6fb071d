//! Modified Bessel function of the second kind at order one half and the
//! moments of the generalized inverse Gaussian GIG(½, 1, α).
//!
//! For order ½ the Bessel function has the elementary closed form
//! `K½(x) = sqrt(π / (2x)) · exp(−x)`, which makes every quantity here exact
//! up to rounding.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Lower bound applied to every α in the model.
pub const ALPHA_FLOOR: f64 = 1e-8;

fn check_positive(x: f64, what: &str) -> Result<()> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain(format!("{what} must be finite and > 0, got {x}")));
    }
    Ok(())
}

/// `K½(x)`. Underflows to zero for x beyond ~745; use [`log_bessel_k_half`]
/// wherever the value enters a logarithm.
pub fn bessel_k_half(x: f64) -> Result<f64> {
    check_positive(x, "bessel_k_half argument")?;
    Ok((PI / (2.0 * x)).sqrt() * (-x).exp())
}

/// `log K½(x)` evaluated in log space.
pub fn log_bessel_k_half(x: f64) -> Result<f64> {
    check_positive(x, "log_bessel_k_half argument")?;
    Ok(log_bessel_k_half_unchecked(x))
}

#[inline]
pub(crate) fn log_bessel_k_half_unchecked(x: f64) -> f64 {
    0.5 * (PI / (2.0 * x)).ln() - x
}

/// Parameters of q(λ) = GIG(½, 1, α).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigParams {
    alpha: f64,
}

impl GigParams {
    pub fn new(alpha: f64) -> Result<Self> {
        check_positive(alpha, "GIG alpha")?;
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// E[λ] = √α + 1.
pub fn gig_mean(p: GigParams) -> f64 {
    p.alpha.sqrt() + 1.0
}

/// E[1/λ] = α^{-1/2}.
pub fn gig_inv_mean(p: GigParams) -> f64 {
    1.0 / p.alpha.sqrt()
}
