//! Comparison instruments: standardized mean difference, Welch's t-test
//! and the observed/expected ratio.
//!
//! Proportions are fractions in `[0, 1]` throughout; conversion to percent
//! happens at the I/O and report boundary only.

use thiserror::Error;

/// `|SMD|` at or above this flags a discrepancy.
pub const SMD_THRESHOLD: f64 = 0.2;
/// Inclusive lower bound of the accepted observed/expected ratio.
pub const RATIO_LOW: f64 = 0.85;
/// Inclusive upper bound of the accepted observed/expected ratio.
pub const RATIO_HIGH: f64 = 1.15;
/// Two-sided p-values at or above this mean "no significant difference".
pub const P_THRESHOLD: f64 = 0.05;

const BETA_CF_REL_TOL: f64 = 1e-12;
const BETA_CF_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("proportion {0} is outside [0, 1]")]
    ProportionOutOfRange(f64),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("ratio is undefined for an expected proportion of 0")]
    UndefinedRatio,
    #[error("non-finite statistic {0}")]
    NonFinite(f64),
    #[error("degrees of freedom must be positive, got {0}")]
    InvalidDf(f64),
}

/// An expected (reference) and an observed proportion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProportionPair {
    expected: f64,
    observed: f64,
}

impl ProportionPair {
    pub fn new(expected: f64, observed: f64) -> Result<Self, StatsError> {
        for p in [expected, observed] {
            if !(0.0..=1.0).contains(&p) {
                return Err(StatsError::ProportionOutOfRange(p));
            }
        }
        Ok(ProportionPair { expected, observed })
    }

    /// Builds a pair from percentages.
    pub fn from_percent(expected: f64, observed: f64) -> Result<Self, StatsError> {
        Self::new(expected / 100.0, observed / 100.0)
    }

    pub fn expected(&self) -> f64 {
        self.expected
    }

    pub fn observed(&self) -> f64 {
        self.observed
    }

    pub fn swapped(&self) -> Self {
        ProportionPair {
            expected: self.observed,
            observed: self.expected,
        }
    }
}

/// Summary statistics of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    n: u64,
    mean: f64,
    variance: f64,
}

impl SampleStats {
    pub fn new(n: u64, mean: f64, variance: f64) -> Result<Self, StatsError> {
        if n < 2 {
            return Err(StatsError::InvalidSample(format!("n must be at least 2, got {n}")));
        }
        if !mean.is_finite() || !variance.is_finite() || variance < 0.0 {
            return Err(StatsError::InvalidSample(format!(
                "mean {mean} and variance {variance} must be finite, variance non-negative"
            )));
        }
        Ok(SampleStats { n, mean, variance })
    }

    /// Sample mean and unbiased variance of `values`.
    pub fn from_values(values: &[f64]) -> Result<Self, StatsError> {
        let n = values.len();
        if n < 2 {
            return Err(StatsError::InvalidSample(format!("n must be at least 2, got {n}")));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        Self::new(n as u64, mean, ss / (n as f64 - 1.0))
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// SMD of two proportions with the pooled-variance denominator
/// `sqrt((e(1-e) + o(1-o)) / 2)`. Positive when observed exceeds expected.
pub fn smd_proportions(pair: ProportionPair) -> Result<f64, StatsError> {
    let (e, o) = (pair.expected, pair.observed);
    let pooled = (e * (1.0 - e) + o * (1.0 - o)) / 2.0;
    if pooled == 0.0 {
        return if e == o {
            Ok(0.0)
        } else {
            Err(StatsError::Degenerate(format!(
                "zero pooled variance with expected {e} and observed {o}"
            )))
        };
    }
    Ok((o - e) / pooled.sqrt())
}

/// SMD of two means: `(mean_b - mean_a) / sqrt((var_a + var_b) / 2)`.
pub fn smd_means(a: SampleStats, b: SampleStats) -> Result<f64, StatsError> {
    let pooled = (a.variance + b.variance) / 2.0;
    if pooled <= 0.0 {
        return Err(StatsError::Degenerate("zero pooled variance".into()));
    }
    Ok((b.mean - a.mean) / pooled.sqrt())
}

/// Observed over expected.
pub fn obs_exp_ratio(pair: ProportionPair) -> Result<f64, StatsError> {
    if pair.expected == 0.0 {
        return Err(StatsError::UndefinedRatio);
    }
    Ok(pair.observed / pair.expected)
}

/// Welch's unequal-variance t-test, two-sided.
pub fn welch_t(a: SampleStats, b: SampleStats) -> Result<WelchResult, StatsError> {
    let (na, nb) = (a.n as f64, b.n as f64);
    let (sa, sb) = (a.variance / na, b.variance / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return if a.mean == b.mean {
            Ok(WelchResult {
                t: 0.0,
                df: na + nb - 2.0,
                p: 1.0,
            })
        } else {
            Err(StatsError::Degenerate(
                "both variances are zero and the means differ".into(),
            ))
        };
    }
    let t = (a.mean - b.mean) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = student_t_two_sided_p(t, df)?;
    Ok(WelchResult { t, df, p })
}

/// Two-sided tail probability of Student's t: `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> Result<f64, StatsError> {
    if !t.is_finite() {
        return Err(StatsError::NonFinite(t));
    }
    if df.is_nan() || df <= 0.0 || !df.is_finite() {
        return Err(StatsError::InvalidDf(df));
    }
    let x = df / (df + t * t);
    Ok(regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0))
}

/// Regularized incomplete beta `I_x(a, b)` by continued fraction, switching
/// to `1 - I_{1-x}(b, a)` when `x > (a+1)/(a+b+2)`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "shape parameters must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (-x).ln_1p();
    let front = ln_front.exp();
    if x > (a + 1.0) / (a + b + 2.0) {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    } else {
        front * beta_continued_fraction(x, a, b) / a
    }
}

// Modified Lentz evaluation of the incomplete beta continued fraction.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
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
    for m in 1..=BETA_CF_MAX_ITER {
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
        if (del - 1.0).abs() < BETA_CF_REL_TOL {
            return h;
        }
    }
    log::warn!("incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})");
    h
}

/// Natural log of the gamma function (Lanczos, g = 7), for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
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
        // Reflection keeps the series in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut sum = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

/// Rounds half away from zero to `decimals` places.
pub fn round_half_away(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (x * scale).round() / scale
}

/// Whether a point comparison passes: `|smd| < 0.2` and ratio in `[0.85, 1.15]`.
pub fn point_passes(smd: f64, ratio: f64) -> bool {
    smd.abs() < SMD_THRESHOLD && (RATIO_LOW..=RATIO_HIGH).contains(&ratio)
}
