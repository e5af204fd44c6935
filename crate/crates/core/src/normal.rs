//! Standard Gaussian density, distribution and quantile functions.
//!
//! Every probability computed by the crate goes through this module. The
//! distribution function is built on `libm::erfc`, which is accurate to a few
//! ulps over the whole real line, so `cdf` is good to well below 1e-12
//! absolute. Tail logarithms switch to an asymptotic Mills-ratio expansion
//! once `erfc` would underflow.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `ln(sqrt(2π))`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Cell masses below this are evaluated in log space.
const LOG_SPACE_MASS: f64 = 1e-290;

/// Below this argument `erfc(-x/√2)` is subnormal.
const ASYMPTOTIC_CUTOFF: f64 = -37.0;

#[inline]
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Φ(x).
#[inline]
pub fn cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// 1 − Φ(x), without cancellation in the upper tail.
#[inline]
pub fn sf(x: f64) -> f64 {
    cdf(-x)
}

/// ln Φ(x), finite for every finite `x`.
pub fn ln_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if x > 5.0 {
        // Φ(x) = 1 − tiny; ln1p keeps the tail digits.
        return (-sf(x)).ln_1p();
    }
    if x >= ASYMPTOTIC_CUTOFF {
        return cdf(x).ln();
    }
    // Φ(x) = φ(x)/|x| · (1 − 1/x² + 3/x⁴ − 15/x⁶ + 105/x⁸ − 945/x¹⁰ + …)
    let z = 1.0 / (x * x);
    let series = 1.0 - z * (1.0 - 3.0 * z * (1.0 - 5.0 * z * (1.0 - 7.0 * z * (1.0 - 9.0 * z))));
    ln_pdf(x) - (-x).ln() + series.ln()
}

/// Φ(hi) − Φ(lo) for `lo <= hi`, choosing the form with the least cancellation.
pub fn interval_mass(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return 0.0;
    }
    if lo == f64::NEG_INFINITY {
        return cdf(hi);
    }
    if hi == f64::INFINITY {
        return sf(lo);
    }
    if lo >= 0.5 {
        // both in the upper tail
        0.5 * (libm::erfc(lo * FRAC_1_SQRT_2) - libm::erfc(hi * FRAC_1_SQRT_2))
    } else if hi <= -0.5 {
        0.5 * (libm::erfc(-hi * FRAC_1_SQRT_2) - libm::erfc(-lo * FRAC_1_SQRT_2))
    } else {
        // near the origin erf is accurate in relative terms
        0.5 * (libm::erf(hi * FRAC_1_SQRT_2) - libm::erf(lo * FRAC_1_SQRT_2))
    }
}

/// ln(Φ(hi) − Φ(lo)); switches to log-CDF differences when the mass underflows.
pub fn ln_interval_mass(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return f64::NEG_INFINITY;
    }
    let mass = interval_mass(lo, hi);
    if mass > LOG_SPACE_MASS {
        return mass.ln();
    }
    if lo >= 0.0 {
        // ln(Q(lo) − Q(hi)) with Q(x) = Φ(−x)
        let upper = ln_cdf(-lo);
        let lower = ln_cdf(-hi);
        upper + ln_one_minus_exp(lower - upper)
    } else if hi <= 0.0 {
        let upper = ln_cdf(hi);
        let lower = ln_cdf(lo);
        upper + ln_one_minus_exp(lower - upper)
    } else {
        mass.ln()
    }
}

/// ln(1 − eᵃ) for a ≤ 0.
#[inline]
fn ln_one_minus_exp(a: f64) -> f64 {
    if a > -std::f64::consts::LN_2 {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

/// Φ⁻¹(p). Rational initial guess refined by Halley steps against `cdf`.
pub fn quantile(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        // refine on the lower tail for accuracy, then reflect
        let q = 1.0 - p;
        if q > 0.0 && (1.0 - q) == p {
            return -quantile(q);
        }
    }
    let mut x = quantile_initial(p);
    for _ in 0..3 {
        if !x.is_finite() {
            break;
        }
        let err = cdf(x) - p;
        let u = err * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        let step = u / (1.0 + 0.5 * x * u);
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

fn quantile_initial(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_690e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] =
        [7.784_695_709_041_462e-3, 3.224_671_290_700_398e-1, 2.445_134_137_142_996, 3.754_408_661_907_416];
    const P_LOW: f64 = 0.024_25;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// φ(x)/(Φ(hi) − Φ(lo)) evaluated in log space, for gradient terms.
#[inline]
pub fn density_ratio(x: f64, ln_mass: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (ln_pdf(x) - ln_mass).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::SQRT_2;

    // Independent erf: Maclaurin series for small |x|, Lentz continued
    // fraction for erfc in the tail.
    fn oracle_erf(x: f64) -> f64 {
        if x.abs() < 2.5 {
            let mut term = x;
            let mut sum = x;
            let x2 = x * x;
            let mut n = 0.0;
            loop {
                n += 1.0;
                term *= -x2 / n;
                let add = term / (2.0 * n + 1.0);
                sum += add;
                if add.abs() <= 1e-18 * sum.abs() {
                    break;
                }
            }
            sum * 2.0 / PI.sqrt()
        } else {
            let s = x.signum();
            s * (1.0 - oracle_erfc_cf(x.abs()))
        }
    }

    fn oracle_erfc_cf(x: f64) -> f64 {
        // erfc(x) = exp(-x²)/√π · 1/(x + 1/2/(x + 1/(x + 3/2/(x + ...))))
        let tiny = 1e-300;
        let mut f = x;
        let mut c = x;
        let mut d = 0.0;
        for k in 1..500 {
            let a = k as f64 / 2.0;
            d = x + a * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = x + a / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x * x).exp() / PI.sqrt() / f
    }

    fn oracle_cdf(x: f64) -> f64 {
        let z = x / SQRT_2;
        if z < -2.5 {
            0.5 * oracle_erfc_cf(-z)
        } else {
            0.5 * (1.0 + oracle_erf(z))
        }
    }

    #[test]
    fn cdf_matches_series_oracle() {
        let mut x = -12.0;
        while x <= 12.0 {
            let a = cdf(x);
            let b = oracle_cdf(x);
            assert!((a - b).abs() < 1e-13, "x={x} {a} vs {b}");
            x += 0.0625;
        }
    }

    #[test]
    fn central_cell_value() {
        // Φ(0.5) − Φ(−0.5)
        let oracle = oracle_cdf(0.5) - oracle_cdf(-0.5);
        assert!((interval_mass(-0.5, 0.5) - oracle).abs() < 1e-10);
        assert!((oracle - 0.382_924_922_548_026).abs() < 1e-10);
    }

    #[test]
    fn ln_cdf_continuous_across_asymptotic_cutoff() {
        let below = ln_cdf(ASYMPTOTIC_CUTOFF - 1e-9);
        let above = ln_cdf(ASYMPTOTIC_CUTOFF + 1e-9);
        assert!((below - above).abs() < 1e-6);
        let x: f64 = -36.0;
        assert!((ln_cdf(x) - oracle_cdf(x).ln()).abs() < 1e-10);
        assert!(ln_cdf(-1e3).is_finite());
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-300, 1e-20, 1e-8, 0.001, 0.02425, 0.2, 0.5, 0.8, 0.975, 1.0 - 1e-10] {
            let x = quantile(p);
            let back = cdf(x);
            assert!(((back - p) / p).abs() < 1e-12, "p={p} x={x} back={back}");
        }
        assert!((quantile(0.8) - 0.841_621_233_572_914_2).abs() < 1e-14);
    }

    #[test]
    fn deep_tail_cells_stay_finite() {
        let v = ln_interval_mass(40.0, 41.0);
        assert!(v.is_finite() && v < -790.0);
        let w = ln_interval_mass(-41.0, -40.0);
        assert!((v - w).abs() < 1e-9);
        // matches the one-sided tail when the upper bound is far away
        assert!((ln_interval_mass(40.0, 1e3) - ln_cdf(-40.0)).abs() < 1e-12);
    }

    #[test]
    fn interval_mass_narrow_interval_near_zero() {
        let m = interval_mass(-1e-10, 1e-10);
        assert!((m - 2e-10 * pdf(0.0)).abs() < 1e-24);
    }
}
