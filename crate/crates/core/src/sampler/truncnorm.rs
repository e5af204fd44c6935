//! Truncated Gaussian draws that stay well behaved deep in the tails.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::normal;

/// Standardized bounds beyond which inverse-CDF sampling is abandoned.
const TAIL_START: f64 = 5.0;

/// Draw from `N(mu, sigma²)` restricted to the open interval `(lower, upper)`.
pub fn sample_truncated_gaussian<R: Rng + ?Sized>(
    mu: f64,
    sigma: f64,
    lower: f64,
    upper: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(lower < upper) || lower.is_nan() || upper.is_nan() {
        return Err(Error::EmptyInterval { lower, upper });
    }
    if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
        return Err(Error::Config(format!("truncated Gaussian needs finite mu and sigma > 0 (got {mu}, {sigma})")));
    }
    let a = (lower - mu) / sigma;
    let b = (upper - mu) / sigma;
    loop {
        let z = if a >= TAIL_START {
            upper_tail(a, b, rng)
        } else if b <= -TAIL_START {
            -upper_tail(-b, -a, rng)
        } else {
            inverse_cdf(a, b, rng)
        };
        let x = mu + sigma * z;
        // rounding can land exactly on a bound; redraw
        if lower < x && x < upper {
            return Ok(x);
        }
    }
}

fn inverse_cdf<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    if a > 0.0 {
        // work with upper-tail probabilities to keep precision
        let qa = normal::sf(a);
        let qb = normal::sf(b);
        -normal::quantile(qb + u * (qa - qb))
    } else {
        let pa = normal::cdf(a);
        let pb = normal::cdf(b);
        normal::quantile(pa + u * (pb - pa))
    }
}

/// Standard Gaussian on `(a, b)` with `a ≥ TAIL_START`.
fn upper_tail<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    if (b - a) * rate < 1.0 {
        // narrow window: uniform proposal with envelope exp(-(z² - a²)/2)
        loop {
            let z = a + rng.random::<f64>() * (b - a);
            let u: f64 = rng.random();
            if u.ln() <= -0.5 * (z * z - a * a) {
                return z;
            }
        }
    }
    // translated exponential proposal
    loop {
        let e: f64 = Exp1.sample(rng);
        let z = a + e / rate;
        if z >= b {
            continue;
        }
        let u: f64 = rng.random();
        if u.ln() <= -0.5 * (z - rate) * (z - rate) {
            return z;
        }
    }
}
