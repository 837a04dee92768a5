//! Method-comparison reports against the base model.
//!
//! Per-seed, per-pair metric samples are pooled across seeds before testing.
//! Each method row carries the pooled mean and standard deviation, the delta
//! from the base model, Welch's t and p against the base, Cohen's d and a
//! 95% interval on the mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{bonferroni_threshold, cohens_d, welch_t, SampleSummary};

/// Per-pair samples for one method: `seeds[k][metric]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSamples {
    pub name: String,
    /// Set for oracles that need task identity at inference time.
    pub non_deployable: bool,
    pub seeds: Vec<BTreeMap<String, Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub mean: f64,
    /// Standard deviation of the pooled samples.
    pub std: f64,
    /// Standard deviation of the per-seed means (0 for a single seed).
    pub seed_std: f64,
    pub n: usize,
    pub delta: f64,
    /// `None` when the test is undefined (zero variance on both sides with different means).
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub d: Option<f64>,
    pub ci95: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub name: String,
    pub non_deployable: bool,
    pub metrics: BTreeMap<String, MetricComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub name: String,
    pub metrics: BTreeMap<String, SampleSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonferroniNote {
    pub alpha: f64,
    pub comparisons: usize,
    pub threshold: f64,
    /// `method/metric` entries with `p` below the uncorrected α but not below the threshold.
    pub not_surviving: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub methods: Vec<MethodRow>,
    pub baseline: BaselineRow,
    pub bonferroni: BonferroniNote,
    pub config_echo: serde_json::Value,
}

pub const SIGNIFICANCE_ALPHA: f64 = 0.05;

fn pooled(seeds: &[BTreeMap<String, Vec<f64>>], metric: &str) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut all = Vec::new();
    let mut means = Vec::new();
    for s in seeds {
        let v = s.get(metric)?;
        if v.is_empty() {
            return None;
        }
        means.push(v.iter().sum::<f64>() / v.len() as f64);
        all.extend_from_slice(v);
    }
    Some((all, means))
}

fn compare(samples: &[f64], seed_means: &[f64], base: &[f64]) -> Result<MetricComparison> {
    let s = SampleSummary::from_samples(samples)?;
    let b = SampleSummary::from_samples(base)?;
    let seed_std = if seed_means.len() > 1 {
        SampleSummary::from_samples(seed_means)?.std
    } else {
        0.0
    };
    let (t, p) = match welch_t(samples, base) {
        Ok(r) => (Some(r.t), Some(r.p)),
        // Both groups constant: equal means are a clean null, otherwise undefined.
        Err(Error::Degenerate(_)) if s.mean == b.mean => (Some(0.0), Some(1.0)),
        Err(Error::Degenerate(_)) => (None, None),
        Err(e) => return Err(e),
    };
    let d = match cohens_d(samples, base) {
        Ok(d) => Some(d),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricComparison {
        mean: s.mean,
        std: s.std,
        seed_std,
        n: s.n,
        delta: s.mean - b.mean,
        t,
        p,
        d,
        ci95: [s.ci95_low, s.ci95_high],
    })
}

/// Builds the comparison document. Methods keep their input order; metrics
/// are those present in the baseline.
pub fn build_report(
    methods: &[MethodSamples],
    base: &BTreeMap<String, Vec<f64>>,
    config_echo: serde_json::Value,
) -> Result<ReportDocument> {
    let mut baseline = BTreeMap::new();
    for (metric, samples) in base {
        baseline.insert(metric.clone(), SampleSummary::from_samples(samples)?);
    }
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        if m.seeds.is_empty() {
            return Err(Error::Domain(format!("method `{}` has no seeds", m.name)));
        }
        let mut metrics = BTreeMap::new();
        for (metric, base_samples) in base {
            if let Some((all, means)) = pooled(&m.seeds, metric) {
                metrics.insert(metric.clone(), compare(&all, &means, base_samples)?);
            }
        }
        rows.push(MethodRow {
            name: m.name.clone(),
            non_deployable: m.non_deployable,
            metrics,
        });
    }

    let comparisons: usize = rows.iter().map(|r| r.metrics.len()).sum();
    let threshold = bonferroni_threshold(SIGNIFICANCE_ALPHA, comparisons);
    let not_surviving = rows
        .iter()
        .flat_map(|r| {
            r.metrics.iter().filter_map(move |(k, c)| match c.p {
                Some(p) if p < SIGNIFICANCE_ALPHA && p >= threshold => Some(format!("{}/{}", r.name, k)),
                _ => None,
            })
        })
        .collect();

    Ok(ReportDocument {
        methods: rows,
        baseline: BaselineRow {
            name: "base".into(),
            metrics: baseline,
        },
        bonferroni: BonferroniNote {
            alpha: SIGNIFICANCE_ALPHA,
            comparisons,
            threshold,
            not_surviving,
        },
        config_echo,
    })
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    match v {
        Some(x) => format!("{x:.prec$}"),
        None => "n/a".into(),
    }
}

fn fmt_p(p: Option<f64>) -> String {
    match p {
        Some(p) if p < 1e-3 => format!("{p:.1e}"),
        other => fmt_opt(other, 3),
    }
}

impl ReportDocument {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// A fixed-width table: one line per method and metric.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<34} {:<24} {:>10} {:>9} {:>10} {:>8} {:>9} {:>7}",
            "method", "metric", "mean", "std", "delta", "t", "p", "d"
        );
        for (metric, b) in &self.baseline.metrics {
            let _ = writeln!(
                out,
                "{:<34} {:<24} {:>10.4} {:>9.4} {:>10} {:>8} {:>9} {:>7}",
                "base", metric, b.mean, b.std, "-", "-", "-", "-"
            );
        }
        for row in &self.methods {
            let name = if row.non_deployable {
                format!("{} [non-deployable]", row.name)
            } else {
                row.name.clone()
            };
            for (metric, c) in &row.metrics {
                let _ = writeln!(
                    out,
                    "{:<34} {:<24} {:>10.4} {:>9.4} {:>+10.4} {:>8} {:>9} {:>7}",
                    name,
                    metric,
                    c.mean,
                    c.std,
                    c.delta,
                    fmt_opt(c.t, 2),
                    fmt_p(c.p),
                    fmt_opt(c.d, 2)
                );
            }
        }
        let b = &self.bonferroni;
        let _ = writeln!(
            out,
            "\nBonferroni threshold for {} comparisons at alpha = {}: {:.2e}",
            b.comparisons, b.alpha, b.threshold
        );
        if b.not_surviving.is_empty() {
            let _ = writeln!(out, "No uncorrected-significant result fails the corrected threshold.");
        } else {
            let _ = writeln!(
                out,
                "Significant at alpha but not after correction: {}",
                b.not_surviving.join(", ")
            );
        }
        out
    }
}
