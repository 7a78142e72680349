//! Paired t-test and the special functions behind the Student-t CDF.

use crate::error::{Error, Result};

/// Smallest standard deviation of paired differences the test divides by.
pub const MIN_DIFF_STD: f64 = 1e-12;

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
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
    for m in 1..=500 {
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
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Student-t cumulative distribution with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided tail probability `P(|T| >= |t|)`.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
}

/// Two-sided paired t-test of `treated - control`.
pub fn paired_t_test(treated: &[f64], control: &[f64]) -> Result<TTest> {
    if treated.len() != control.len() {
        return Err(Error::Shape(format!(
            "paired samples have lengths {} and {}",
            treated.len(),
            control.len()
        )));
    }
    let n = treated.len();
    if n < 2 {
        return Err(Error::DegenerateBatch("paired t-test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = treated.iter().zip(control).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt().max(MIN_DIFF_STD);
    let t = mean / (sd / (n as f64).sqrt());
    Ok(TTest {
        n,
        mean_diff: mean,
        t,
        p: student_t_two_sided(t, (n - 1) as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};
    use statrs::function::gamma::ln_gamma as oracle_ln_gamma;

    #[test]
    fn ln_gamma_matches_reference() {
        for x in [0.1, 0.5, 1.0, 1.5, 2.0, 3.7, 10.0, 55.5, 170.2] {
            let want = oracle_ln_gamma(x);
            assert!((ln_gamma(x) - want).abs() < 1e-10 * want.abs().max(1.0), "{x}");
        }
    }

    #[test]
    fn t_cdf_matches_reference() {
        for dof in [1.0, 2.0, 5.0, 9.0, 29.0, 100.0] {
            let oracle = StudentsT::new(0.0, 1.0, dof).unwrap();
            for t in [-8.0, -2.5, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0, 12.0] {
                let got = student_t_cdf(t, dof);
                let want = oracle.cdf(t);
                assert!((got - want).abs() < 1e-10, "dof {dof} t {t}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn null_case_gives_p_one() {
        let a = vec![0.3, 1.2, 0.7, 0.9, 2.1];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_shift_is_highly_significant() {
        let base: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let shifted: Vec<f64> = base.iter().map(|x| x + 1.0).collect();
        let r = paired_t_test(&shifted, &base).unwrap();
        assert!(r.p < 1e-6, "{}", r.p);
        assert!(r.t > 0.0);
    }

    #[test]
    fn bad_inputs() {
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[0.0]).is_err());
    }
}
