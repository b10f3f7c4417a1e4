//! Paired two-tailed Student's t-test, self-contained.
//!
//! The p-value comes from the regularized incomplete beta function evaluated
//! with a Lentz-style continued fraction, so there is no statistics
//! dependency to drag in. Accuracy target is 1e-10 on the CDF.

/// Outcome of [`paired_t_test`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    /// Two-tailed p-value.
    pub p: f64,
    /// Degrees of freedom (n - 1).
    pub df: usize,
    /// Set when the difference vector has zero variance, where the t
    /// statistic is degenerate: all-zero differences report p = 1, a nonzero
    /// constant difference reports p = 0.
    pub degenerate: bool,
}

/// Paired, two-tailed Student's t-test on equal-length samples, paired by
/// index (seed). Panics if the lengths differ or are < 2.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> TTestResult {
    assert_eq!(a.len(), b.len(), "paired test needs equal-length samples");
    let n = a.len();
    assert!(n >= 2, "paired test needs at least two pairs");

    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;

    if var == 0.0 {
        return if mean == 0.0 {
            TTestResult { t: 0.0, p: 1.0, df, degenerate: true }
        } else {
            TTestResult {
                t: f64::INFINITY.copysign(mean),
                p: 0.0,
                df,
                degenerate: true,
            }
        };
    }

    let t = mean / (var / n as f64).sqrt();
    TTestResult {
        t,
        p: students_t_two_tailed_p(t, df as f64),
        df,
        degenerate: false,
    }
}

/// Two-tailed p-value for a t statistic with `nu` degrees of freedom:
/// `p = I_x(nu/2, 1/2)` with `x = nu / (nu + t^2)`.
pub fn students_t_two_tailed_p(t: f64, nu: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = nu / (nu + t * t);
    reg_inc_beta(0.5 * nu, 0.5, x)
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x), "x must lie in [0,1]");
    assert!(a > 0.0 && b > 0.0, "shape parameters must be positive");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
        + a * x.ln()
        + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cont_frac(a, b, x) / a
    } else {
        1.0 - front * beta_cont_frac(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;

        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;

        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            return h;
        }
    }
    h
}

/// Natural log of the gamma function (Lanczos, g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}
