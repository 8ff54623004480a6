//! Drift taming: the transform `b -> b / (1 + n^-theta |b|^(2 theta))` that
//! keeps explicit schemes with super-linearly growing drift from blowing up,
//! together with the compensation rule for non-mean-zero jump measures.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{CoeffFn, SdeProblem};
use crate::numeric::norm_squared;

/// Taming exponent for Euler-order schemes.
pub const THETA_EULER: f64 = 0.5;
/// Taming exponent for Milstein-order schemes.
pub const THETA_MILSTEIN: f64 = 1.0;

/// Parameters of the taming transform.
///
/// `n` is the number of subintervals per unit time, so on a dyadic grid of
/// `2^level` cells over `[0, T]` it equals `2^level / T` and the step size
/// is `1/n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TamingParams {
    n: f64,
    theta: f64,
}

impl TamingParams {
    pub fn new(n: f64, theta: f64) -> Result<Self> {
        if !(n >= 1.0) || !n.is_finite() {
            return Err(Error::Config(format!(
                "taming level n must be >= 1, got {n}"
            )));
        }
        if !(theta >= 0.5) || !theta.is_finite() {
            return Err(Error::Config(format!(
                "taming exponent theta must be >= 1/2, got {theta}"
            )));
        }
        Ok(TamingParams { n, theta })
    }

    /// Taming parameters for a dyadic grid of `2^level` cells on `[0, horizon]`.
    pub fn for_dyadic_level(level: u32, horizon: f64, theta: f64) -> Result<Self> {
        if level == 0 || level > 30 {
            return Err(Error::Config(format!(
                "dyadic level must be in 1..=30, got {level}"
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        TamingParams::new((1u64 << level) as f64 / horizon, theta)
    }

    pub fn n(&self) -> f64 {
        self.n
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// The scalar factor `1 / (1 + n^-theta |b|^(2 theta))` applied to the
    /// drift, computed from the squared norm of the drift value. Always in
    /// `(0, 1]`.
    pub fn factor_from_norm_squared(&self, norm_sq: f64) -> f64 {
        // |b|^(2 theta) = (|b|^2)^theta; special-case the two exponents the
        // schemes actually use so the common path avoids powf.
        let norm_pow = if self.theta == 1.0 {
            norm_sq
        } else if self.theta == 0.5 {
            norm_sq.sqrt()
        } else {
            norm_sq.powf(self.theta)
        };
        let n_pow = if self.theta == 1.0 {
            1.0 / self.n
        } else if self.theta == 0.5 {
            1.0 / self.n.sqrt()
        } else {
            self.n.powf(-self.theta)
        };
        1.0 / (1.0 + n_pow * norm_pow)
    }
}

/// Applies the taming transform to a drift value.
///
/// The direction of `b_value` is preserved; the magnitude is scaled by a
/// factor in `(0, 1]`, and for theta in {1/2, 1} the result satisfies
/// `|tamed| <= min(sqrt(n), |b_value|)`.
pub fn tame_drift(b_value: &[f64], params: TamingParams) -> Vec<f64> {
    let factor = params.factor_from_norm_squared(norm_squared(b_value));
    b_value.iter().map(|b| b * factor).collect()
}

/// Returns the drift with the jump compensator folded in:
/// `x -> b(x) - lambda * E[gamma(x, Z)]`.
///
/// For mean-zero marks the original drift function is returned unchanged.
/// Otherwise the problem must declare a closed-form compensator callback.
pub fn compensate_drift(problem: &SdeProblem) -> Result<CoeffFn> {
    let jump = problem.jump.as_ref().ok_or_else(|| {
        Error::Domain("drift compensation applies to problems with jumps".into())
    })?;
    if jump.mark_mean_zero {
        return Ok(problem.drift.clone());
    }
    let compensator = jump
        .compensator
        .clone()
        .ok_or_else(|| Error::Config("compensator required".into()))?;
    let drift = problem.drift.clone();
    let intensity = jump.intensity;
    let dim = problem.dim_state;
    Ok(Arc::new(move |x: &[f64], out: &mut [f64]| {
        drift(x, out);
        let mut expectation = vec![0.0; dim];
        compensator(x, &mut expectation);
        for (o, e) in out.iter_mut().zip(&expectation) {
            *o -= intensity * e;
        }
    }))
}
