//! Modified Bessel functions of the second kind, orders 0 and 1.
//!
//! Polynomial approximations (Abramowitz & Stegun 9.8.1-9.8.8), absolute
//! error below ~2e-7 across both branches. Used for the analytic Matérn
//! correlation, which serves as an independent reference for the
//! precision-matrix construction and drives the field simulator.

/// I0(x) for |x| <= 3.75 (series branch only; helper for K0).
fn bessel_i0_small(x: f64) -> f64 {
    let t = (x / 3.75) * (x / 3.75);
    1.0 + t * (3.5156229
        + t * (3.0899424 + t * (1.2067492 + t * (0.2659732 + t * (0.0360768 + t * 0.0045813)))))
}

/// I1(x) for |x| <= 3.75 (series branch only; helper for K1).
fn bessel_i1_small(x: f64) -> f64 {
    let t = (x / 3.75) * (x / 3.75);
    x * (0.5
        + t * (0.87890594
            + t * (0.51498869
                + t * (0.15084934 + t * (0.02658733 + t * (0.00301532 + t * 0.00032411))))))
}

/// K0(x), x > 0.
pub fn bessel_k0(x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k0 requires x > 0, got {x}");
    if x <= 2.0 {
        let t = x * x / 4.0;
        -(x / 2.0).ln() * bessel_i0_small(x)
            + (-0.57721566
                + t * (0.42278420
                    + t * (0.23069756
                        + t * (0.03488590 + t * (0.00262698 + t * (0.00010750 + t * 0.00000740))))))
    } else {
        let t = 2.0 / x;
        ((-x).exp() / x.sqrt())
            * (1.25331414
                + t * (-0.07832358
                    + t * (0.02189568
                        + t * (-0.01062446
                            + t * (0.00587872 + t * (-0.00251540 + t * 0.00053208))))))
    }
}

/// K1(x), x > 0.
pub fn bessel_k1(x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k1 requires x > 0, got {x}");
    if x <= 2.0 {
        let t = x * x / 4.0;
        (x / 2.0).ln() * bessel_i1_small(x)
            + (1.0
                + t * (0.15443144
                    + t * (-0.67278579
                        + t * (-0.18156897
                            + t * (-0.01919402 + t * (-0.00110404 + t * (-0.00004686)))))))
                / x
    } else {
        let t = 2.0 / x;
        ((-x).exp() / x.sqrt())
            * (1.25331414
                + t * (0.23498619
                    + t * (-0.03655620
                        + t * (0.01504268
                            + t * (-0.00780353 + t * (0.00325614 + t * (-0.00068245)))))))
    }
}

/// Matérn correlation with smoothness 1: rho(d) = (kappa d) K1(kappa d),
/// where kappa = sqrt(8)/range puts correlation ~0.1 at d = range.
pub fn matern_nu1_correlation(dist: f64, range: f64) -> f64 {
    assert!(range > 0.0);
    if dist <= 0.0 {
        return 1.0;
    }
    let x = dist * 8.0f64.sqrt() / range;
    x * bessel_k1(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Reference values from an independent arbitrary-precision evaluation.
    const K0_REF: &[(f64, f64)] = &[
        (0.05, 3.114234029472),
        (0.1, 2.427069024702),
        (0.5, 0.9244190712277),
        (1.0, 0.4210244382407),
        (1.9999, 0.1139078602569),
        (2.0, 0.1138938727495),
        (2.0001, 0.1138798870804),
        (5.0, 3.691098334043e-3),
        (10.0, 1.778006231617e-5),
    ];
    const K1_REF: &[(f64, f64)] = &[
        (0.05, 19.90967432588),
        (0.1, 9.853844780871),
        (0.5, 1.656441120003),
        (1.0, 0.6019072301972),
        (1.9999, 0.1398842658317),
        (2.0, 0.1398658818165),
        (2.0001, 0.1398475004688),
        (2.8284271247461903, 4.937990899370e-2),
        (5.0, 4.044613445452e-3),
        (10.0, 1.864877345383e-5),
    ];

    #[test]
    fn k0_matches_reference() {
        for &(x, want) in K0_REF {
            let got = bessel_k0(x);
            assert!(
                (got - want).abs() < 3e-7,
                "K0({x}) = {got}, want {want}"
            );
        }
    }

    #[test]
    fn k1_matches_reference() {
        for &(x, want) in K1_REF {
            let got = bessel_k1(x);
            assert!(
                (got - want).abs() < 3e-7,
                "K1({x}) = {got}, want {want}"
            );
        }
    }

    #[test]
    fn branches_join_continuously() {
        // The two-branch approximations must agree where they meet.
        assert_relative_eq!(bessel_k0(2.0 - 1e-9), bessel_k0(2.0 + 1e-9), epsilon = 1e-6);
        assert_relative_eq!(bessel_k1(2.0 - 1e-9), bessel_k1(2.0 + 1e-9), epsilon = 1e-6);
    }

    #[test]
    fn matern_correlation_limits() {
        assert_eq!(matern_nu1_correlation(0.0, 50.0), 1.0);
        // At the empirical range the correlation is close to 0.1.
        let c = matern_nu1_correlation(50.0, 50.0);
        assert!((c - 0.1397).abs() < 0.001, "corr at range = {c}");
        // Monotone decreasing.
        let mut prev = 1.0;
        for i in 1..100 {
            let c = matern_nu1_correlation(i as f64, 50.0);
            assert!(c < prev && c > 0.0);
            prev = c;
        }
        // Far field decays to ~0.
        assert!(matern_nu1_correlation(400.0, 50.0) < 1e-8);
    }
}
