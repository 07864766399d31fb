//! Scalar special functions: error function, Gaussian CDF and its inverse.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_2_SQRT_PI, PI};

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

/// Error function. Power series below |x| = 2.5, continued fraction above.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    if ax < 2.5 {
        erf_series(x)
    } else {
        x.signum() * (1.0 - erfc_cf(ax))
    }
}

/// Complementary error function, accurate in the upper tail.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x >= 2.5 {
        erfc_cf(x)
    } else if x > -2.5 {
        1.0 - erf_series(x)
    } else {
        2.0 - erfc_cf(-x)
    }
}

fn erf_series(x: f64) -> f64 {
    // erf(x) = 2/sqrt(pi) * sum_n (-1)^n x^(2n+1) / (n! (2n+1))
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x2 / n;
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    FRAC_2_SQRT_PI * sum
}

/// erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))), x >= 2.5.
fn erfc_cf(x: f64) -> f64 {
    let mut f = x;
    for k in (1..=120).rev() {
        f = x + (k as f64 / 2.0) / f;
    }
    (-x * x).exp() / (PI.sqrt() * f)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF via `erfc`, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Inverse of the standard normal CDF.
///
/// Rational approximation (Acklam) refined by one Halley step against
/// [`normal_cdf`]. Upper half is obtained by symmetry so `1 - p` stays exact.
pub fn inverse_normal_cdf<T: Scalar>(p: T) -> Result<T> {
    let p = p.as_f64();
    ensure!(
        p > 0.0 && p < 1.0,
        InvalidArgument,
        "inverse_normal_cdf needs p in (0, 1), got {p}"
    );
    let x = if p > 0.5 {
        -lower_quantile(1.0 - p)
    } else {
        lower_quantile(p)
    };
    Ok(T::lit(x))
}

fn lower_quantile(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let x = acklam(p);
    let e = normal_cdf(x) - p;
    let u = e / normal_pdf(x);
    x - u / (1.0 + 0.5 * x * u)
}

fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
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
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;

    /// Independent CDF oracle: Simpson quadrature of the density.
    fn cdf_by_quadrature(x: f64) -> f64 {
        let lo = -12.0;
        let n = 200_000;
        let h = (x - lo) / n as f64;
        let mut s = normal_pdf(lo) + normal_pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * normal_pdf(lo + i as f64 * h);
        }
        s * h / 3.0
    }

    fn bisect(p: f64) -> f64 {
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf_by_quadrature(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn erf_known_values() {
        // reference values from tables of erf
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erf(3.0) - 0.999_977_909_503_001_4).abs() < 1e-15);
        assert!((erfc(3.0) - 2.209_049_699_858_544e-5).abs() < 1e-19);
        assert!((erf(-1.0) + erf(1.0)).abs() < 1e-16);
    }

    #[test]
    fn cdf_matches_quadrature() {
        for &x in &[-6.0, -2.5, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            assert!((normal_cdf(x) - cdf_by_quadrature(x)).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn median_is_zero() {
        assert_eq!(inverse_normal_cdf(0.5f64).unwrap(), 0.0);
    }

    #[test]
    fn one_sigma_point_matches_bisection_oracle() {
        let p = 0.841_344_746_1;
        let oracle = bisect(p);
        assert!((oracle - 1.0).abs() < 1e-6);
        let x = inverse_normal_cdf(p).unwrap();
        assert!((x - 1.0).abs() < 1e-6);
        assert!((x - oracle).abs() < 1e-9);
    }

    #[test]
    fn round_trip_accuracy() {
        for i in 1..2000 {
            let p = i as f64 / 2000.0;
            let x = inverse_normal_cdf(p).unwrap();
            assert!((normal_cdf(x) - p).abs() < 1e-13, "p={p}");
        }
        for &p in &[1e-12, 1e-8, 1e-4, 0.999_9] {
            let x = inverse_normal_cdf(p).unwrap();
            assert!(((normal_cdf(x) - p) / p.min(1.0 - p)).abs() < 1e-9, "p={p}");
        }
    }

    #[test]
    fn antisymmetric() {
        let mut rng = Rng::new(77);
        for _ in 0..20 {
            let p = rng.uniform().clamp(1e-9, 1.0 - 1e-9);
            let a = inverse_normal_cdf(p).unwrap();
            let b = inverse_normal_cdf(1.0 - p).unwrap();
            assert!((a + b).abs() < 1e-9);
        }
    }

    #[test]
    fn strictly_increasing_on_grid() {
        let mut prev = f64::NEG_INFINITY;
        for i in 1..=1000 {
            let x = inverse_normal_cdf(i as f64 / 1001.0).unwrap();
            assert!(x > prev);
            prev = x;
        }
    }

    #[test]
    fn rejects_outside_open_interval() {
        for &p in &[0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(inverse_normal_cdf(p).is_err());
        }
    }

    #[test]
    fn single_precision_entry_point() {
        let x = inverse_normal_cdf(0.975f32).unwrap();
        assert!((x - 1.959_964).abs() < 1e-5);
    }
}
