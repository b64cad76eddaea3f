//! Confidence intervals and collection-level aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Result, VbError};
use crate::replica::keyed_rng;

pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_BOOT_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Normal,
    #[default]
    Percentile,
}

impl fmt::Display for CiMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CiMethod::Normal => "normal",
            CiMethod::Percentile => "percentile",
        })
    }
}

impl FromStr for CiMethod {
    type Err = VbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(CiMethod::Normal),
            "percentile" => Ok(CiMethod::Percentile),
            other => Err(VbError::invalid(format!("unknown CI method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    /// Nominal coverage `1 - delta`.
    pub level: f64,
    pub method: CiMethod,
}

impl ConfidenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(VbError::invalid(format!("delta must be in (0,1), got {delta}")));
    }
    Ok(())
}

/// Standard normal quantile; infinite at 0 and 1.
pub fn standard_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    Normal::standard().inverse_cdf(p)
}

/// `mean +- z_{1 - delta/2} * sigma / sqrt(b)`.
pub fn normal_ci(mean: f64, sigma_hat: f64, b: usize, delta: f64) -> Result<ConfidenceInterval> {
    check_delta(delta)?;
    if b == 0 {
        return Err(VbError::invalid("sample count must be >= 1"));
    }
    if !(sigma_hat.is_finite() && sigma_hat >= 0.0) || !mean.is_finite() {
        return Err(VbError::invalid("mean and sigma must be finite, sigma >= 0"));
    }
    let half = standard_normal_quantile(1.0 - delta / 2.0) * sigma_hat / (b as f64).sqrt();
    Ok(ConfidenceInterval {
        lower: mean - half,
        upper: mean + half,
        level: 1.0 - delta,
        method: CiMethod::Normal,
    })
}

/// Quantile of sorted data by linear interpolation between order statistics
/// at position `(n - 1) * p` (zero-based).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = h - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Empirical `delta/2` and `1 - delta/2` quantiles (see [`quantile_sorted`]).
pub fn percentile_ci(samples: &[f64], delta: f64) -> Result<ConfidenceInterval> {
    check_delta(delta)?;
    if samples.is_empty() {
        return Err(VbError::invalid("no samples"));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(VbError::invalid("samples must be finite"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ConfidenceInterval {
        lower: quantile_sorted(&sorted, delta / 2.0),
        upper: quantile_sorted(&sorted, 1.0 - delta / 2.0),
        level: 1.0 - delta,
        method: CiMethod::Percentile,
    })
}

/// Bootstrap distribution of the mean: `resamples` means of with-replacement
/// draws of `values`.
pub fn bootstrap_means(values: &[f64], resamples: usize, seed: u64, stream: &str) -> Vec<f64> {
    let n = values.len();
    let mut rng = keyed_rng(seed, stream, 0);
    (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub es_hat: f64,
    pub vb_hat: f64,
    pub ci: ConfidenceInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionReport {
    pub per_query: BTreeMap<String, QueryScore>,
    pub macro_es: f64,
    pub macro_vb: f64,
    /// Percentile bootstrap over queries of the macro VB.
    pub macro_ci: ConfidenceInterval,
    pub macro_es_ci: ConfidenceInterval,
    pub config_echo: serde_json::Value,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Macro averages over queries with query-resampling bootstrap CIs.
///
/// Queries are iterated in key order, so the result depends only on the map
/// contents and `seed`.
pub fn collection_aggregate(
    per_query: &BTreeMap<String, QueryScore>,
    delta: f64,
    boot_resamples: usize,
    seed: u64,
) -> Result<CollectionReport> {
    check_delta(delta)?;
    if per_query.is_empty() {
        return Err(VbError::invalid("no queries to aggregate"));
    }
    if boot_resamples == 0 {
        return Err(VbError::invalid("bootstrap needs at least one resample"));
    }
    let vb: Vec<f64> = per_query.values().map(|q| q.vb_hat).collect();
    let es: Vec<f64> = per_query.values().map(|q| q.es_hat).collect();
    let macro_ci = percentile_ci(&bootstrap_means(&vb, boot_resamples, seed, "macro-vb"), delta)?;
    let macro_es_ci = percentile_ci(&bootstrap_means(&es, boot_resamples, seed, "macro-es"), delta)?;
    Ok(CollectionReport {
        per_query: per_query.clone(),
        macro_es: mean(&es),
        macro_vb: mean(&vb),
        macro_ci,
        macro_es_ci,
        config_echo: serde_json::Value::Null,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_delta: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
}

/// Two-sided paired t-test on per-query differences.
///
/// Zero-variance differences give `p = 1` when the mean is zero and `p = 0`
/// otherwise; a single pair gives `p = 1`.
pub fn paired_t_test(deltas: &[f64]) -> Result<PairedTTest> {
    if deltas.is_empty() {
        return Err(VbError::invalid("no paired differences"));
    }
    let n = deltas.len();
    let m = mean(deltas);
    let df = (n as f64) - 1.0;
    if n < 2 {
        return Ok(PairedTTest {
            n,
            mean_delta: m,
            t_statistic: 0.0,
            degrees_of_freedom: 0.0,
            p_value: 1.0,
        });
    }
    let var = deltas.iter().map(|d| (d - m).powi(2)).sum::<f64>() / df;
    let se = (var / n as f64).sqrt();
    // differences equal up to rounding count as constant
    let (t, p) = if se <= 1e-12 * m.abs().max(1e-12) {
        if m == 0.0 || m.abs() < 1e-15 {
            (0.0, 1.0)
        } else {
            (m.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = m / se;
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| VbError::invalid(e.to_string()))?;
        (t, (2.0 * dist.sf(t.abs())).min(1.0))
    };
    Ok(PairedTTest {
        n,
        mean_delta: m,
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
    })
}
