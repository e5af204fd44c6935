//! Univariate slice sampling (stepping out and shrinkage) for the variance
//! parameters, run on the log-variance scale.

use rand::Rng;

use crate::error::{Error, Result};

/// Initial bracket width on the log-variance scale.
const WIDTH: f64 = 1.0;
/// Cap on stepping-out expansions per side.
const MAX_STEPS: usize = 64;

/// One stepping-out + shrinkage transition targeting `exp(ln_density)`.
pub fn slice_step<F, R>(x0: f64, mut ln_density: F, width: f64, rng: &mut R) -> Result<f64>
where
    F: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    let f0 = ln_density(x0);
    if !f0.is_finite() {
        return Err(Error::StateCorruption { value: f0 });
    }
    let level = f0 + rng.random::<f64>().ln();

    let mut left = x0 - width * rng.random::<f64>();
    let mut right = left + width;
    let budget = (MAX_STEPS as f64 * rng.random::<f64>()) as usize;
    let mut left_steps = budget;
    let mut right_steps = MAX_STEPS - 1 - budget;
    while left_steps > 0 && ln_density(left) > level {
        left -= width;
        left_steps -= 1;
    }
    while right_steps > 0 && ln_density(right) > level {
        right += width;
        right_steps -= 1;
    }

    loop {
        let x1 = left + (right - left) * rng.random::<f64>();
        if ln_density(x1) > level {
            return Ok(x1);
        }
        if x1 < x0 {
            left = x1;
        } else {
            right = x1;
        }
        if right - left < 1e-300 {
            return Ok(x0);
        }
    }
}

/// Log density of `Ga(v | 0.5, rate 0.5) · ∏ N(x_j | 0, v)` for `n` terms with
/// sum of squares `ss`, as a function of the variance `v`.
pub fn ln_variance_target(variance: f64, count: usize, sum_sq: f64) -> f64 {
    if !(variance > 0.0) || !variance.is_finite() {
        return f64::NEG_INFINITY;
    }
    let n = count as f64;
    -(0.5 + 0.5 * n) * variance.ln() - 0.5 * variance - 0.5 * sum_sq / variance
}

/// Transition on a variance whose target is given on the variance scale.
/// Works on `x = ln v`, adding the Jacobian `x`.
pub fn slice_sample_variance<F, R>(mut ln_target: F, current: f64, rng: &mut R) -> Result<f64>
where
    F: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    if !(current > 0.0 && current.is_finite()) {
        return Err(Error::StateCorruption { value: current });
    }
    let x = slice_step(current.ln(), |x| ln_target(x.exp()) + x, WIDTH, rng)?;
    Ok(x.exp())
}
