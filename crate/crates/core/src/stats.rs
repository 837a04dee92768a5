//! Sample summaries, t-tests and effect sizes.
//!
//! Confidence intervals use the normal 1.96 multiplier on the standard error;
//! p-values use exact Student-t tails.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub n: usize,
    pub mean: f64,
    /// Unbiased (n − 1) standard deviation; 0 for a single sample.
    pub std: f64,
    pub std_error: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

impl SampleSummary {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Domain("cannot summarize an empty sample".into()));
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std = variance(samples, mean).sqrt();
        let std_error = std / (n as f64).sqrt();
        Ok(Self {
            n,
            mean,
            std,
            std_error,
            ci95_low: mean - Z_95 * std_error,
            ci95_high: mean + Z_95 * std_error,
        })
    }
}

fn variance(samples: &[f64], mean: f64) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64
}

/// Result of a t-test; `p` is two-sided.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Two-sided tail probability `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(1.0);
    }
    let dist =
        StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Degenerate(format!("t distribution with df = {df}: {e}")))?;
    Ok((2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0))
}

fn require(samples: &[f64], min: usize, what: &str) -> Result<()> {
    if samples.len() < min {
        return Err(Error::Domain(format!(
            "{what} needs at least {min} samples, got {}",
            samples.len()
        )));
    }
    Ok(())
}

/// Welch's unequal-variance t-test of `mean(a) − mean(b)`.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TTest> {
    require(a, 2, "Welch's t-test (group a)")?;
    require(b, 2, "Welch's t-test (group b)")?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (crate::util::mean(a), crate::util::mean(b));
    let (va, vb) = (variance(a, ma) / na, variance(b, mb) / nb);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Err(Error::Degenerate("both groups have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok(TTest {
        t,
        df,
        p: t_two_sided_p(t, df)?,
    })
}

/// One-sample t-test of `mean(a)` against `mu0`.
///
/// A zero-variance sample equal to `mu0` gives `t = 0, p = 1`; a zero-variance
/// sample anywhere else is degenerate.
pub fn one_sample_t(a: &[f64], mu0: f64) -> Result<TTest> {
    require(a, 2, "one-sample t-test")?;
    let n = a.len() as f64;
    let m = crate::util::mean(a);
    let s = variance(a, m).sqrt();
    let df = n - 1.0;
    if s == 0.0 {
        if m == mu0 {
            return Ok(TTest { t: 0.0, df, p: 1.0 });
        }
        return Err(Error::Degenerate(
            "sample has zero variance and differs from the hypothesised mean".into(),
        ));
    }
    let t = (m - mu0) / (s / n.sqrt());
    Ok(TTest {
        t,
        df,
        p: t_two_sided_p(t, df)?,
    })
}

/// Cohen's d with the classical pooled variance
/// `((na−1)sa² + (nb−1)sb²) / (na + nb − 2)`.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    require(a, 1, "Cohen's d (group a)")?;
    require(b, 1, "Cohen's d (group b)")?;
    if a.len() + b.len() < 3 {
        return Err(Error::Domain("Cohen's d needs at least three samples in total".into()));
    }
    let (ma, mb) = (crate::util::mean(a), crate::util::mean(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = ((na - 1.0) * variance(a, ma) + (nb - 1.0) * variance(b, mb)) / (na + nb - 2.0);
    if pooled == 0.0 {
        if ma == mb {
            return Ok(0.0);
        }
        return Err(Error::Degenerate("pooled standard deviation is zero".into()));
    }
    Ok((ma - mb) / pooled.sqrt())
}

/// Bonferroni-adjusted significance threshold for `comparisons` tests.
pub fn bonferroni_threshold(alpha: f64, comparisons: usize) -> f64 {
    alpha / comparisons.max(1) as f64
}
