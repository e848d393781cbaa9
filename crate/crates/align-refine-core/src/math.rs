//! Scalar float helpers shared across the crate.
//!
//! All transcendentals route through `libm` so the crate stays `no_std`
//! compatible and produces the same bits on every platform.

pub const NEG_INF: f64 = f64::NEG_INFINITY;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// log(exp(a) + exp(b)) without overflow; handles -inf operands.
#[inline]
pub fn logsumexp2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == NEG_INF {
        return NEG_INF;
    }
    hi + libm::log1p(exp(lo - hi))
}

/// log-sum-exp over a slice; returns -inf for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut hi = NEG_INF;
    for &x in xs {
        if x > hi {
            hi = x;
        }
    }
    if hi == NEG_INF {
        return NEG_INF;
    }
    let mut acc = 0.0;
    for &x in xs {
        acc += exp(x - hi);
    }
    hi + ln(acc)
}

/// Relative error with a floor on the denominator, for gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = abs(a).max(abs(b)).max(1e-8);
    abs(a - b) / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_direct() {
        let xs = [-1.0, -2.5, 0.3];
        let direct = ln(exp(-1.0) + exp(-2.5) + exp(0.3));
        assert!(abs(logsumexp(&xs) - direct) < 1e-12);
    }

    #[test]
    fn logsumexp_handles_neg_inf() {
        assert_eq!(logsumexp(&[]), NEG_INF);
        assert_eq!(logsumexp(&[NEG_INF, NEG_INF]), NEG_INF);
        assert!(abs(logsumexp2(NEG_INF, -1.0) + 1.0) < 1e-12);
    }
}
