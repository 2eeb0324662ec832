//! Special functions used by the reference filters.

use std::f64::consts::{PI, SQRT_2};

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Argument above which the power series is replaced by an asymptotic
/// expansion.
pub const BESSEL_SERIES_MAX: f64 = 500.0;

/// `log I_q(z)` for the modified Bessel function of the first kind, real order
/// `q > -1` and `z >= 0`.
pub fn log_bessel_i(q: f64, z: f64) -> f64 {
    if !(q.is_finite() && z.is_finite()) || q <= -1.0 || z < 0.0 {
        return f64::NAN;
    }
    if z == 0.0 {
        return if q == 0.0 {
            0.0
        } else if q > 0.0 {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        };
    }
    if z <= BESSEL_SERIES_MAX {
        log_bessel_series(q, z)
    } else if 4.0 * q * q < z {
        log_bessel_hankel(q, z)
    } else {
        log_bessel_debye(q, z)
    }
}

/// `Σ_k (z/2)^{2k+q} / (k! Γ(k+q+1))`, summed relative to its first term.
pub(crate) fn log_bessel_series(q: f64, z: f64) -> f64 {
    let half = 0.5 * z;
    let x = half * half;
    let peak = 0.5 * ((q * q + z * z).sqrt() - q);
    let (mut term, mut sum) = (1.0, 1.0);
    let mut k = 0.0;
    loop {
        term *= x / ((k + 1.0) * (k + q + 1.0));
        sum += term;
        k += 1.0;
        if k > peak && term < sum * 1e-17 {
            break;
        }
    }
    q * half.ln() - libm::lgamma(q + 1.0) + sum.ln()
}

/// Large-argument expansion `e^z / √(2πz) Σ_k (−1)^k a_k(q) / z^k`.
pub(crate) fn log_bessel_hankel(q: f64, z: f64) -> f64 {
    let mu = 4.0 * q * q;
    let (mut term, mut sum) = (1.0_f64, 1.0);
    for k in 1..40 {
        let j = (2 * k - 1) as f64;
        let next = -term * (mu - j * j) / (k as f64 * 8.0 * z);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    z - 0.5 * (2.0 * PI * z).ln() + sum.ln()
}

/// Uniform expansion in the order, `I_ν(νx)`, with four correction terms.
pub(crate) fn log_bessel_debye(nu: f64, z: f64) -> f64 {
    let x = z / nu;
    let r = (1.0 + x * x).sqrt();
    let eta = r + (x / (1.0 + r)).ln();
    let t = 1.0 / r;
    let t2 = t * t;
    let u1 = t * (3.0 - 5.0 * t2) / 24.0;
    let u2 = t2 * (81.0 + t2 * (-462.0 + t2 * 385.0)) / 1152.0;
    let u3 = t * t2 * (30375.0 + t2 * (-369603.0 + t2 * (765765.0 - t2 * 425425.0))) / 414720.0;
    let u4 = t2
        * t2
        * (4465125.0
            + t2 * (-94121676.0 + t2 * (349922430.0 + t2 * (-446185740.0 + t2 * 185910725.0))))
        / 39813120.0;
    let corr = 1.0 + (u1 + (u2 + (u3 + u4 / nu) / nu) / nu) / nu;
    nu * eta - 0.5 * (2.0 * PI * nu).ln() - 0.5 * r.ln() + corr.ln()
}
