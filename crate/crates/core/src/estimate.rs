//! Design-based estimation on completed data and Rubin's combining rules.
//!
//! Point and variance estimators are the Horvitz–Thompson forms under
//! Poisson sampling; probabilities are survey-weighted ratios with Taylor
//! linearization variances. Replication metrics (rRMSE, coverage) summarize
//! a Monte Carlo study.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{MdamError, Result};
use crate::frame::CompletedDataset;

/// What to estimate on a completed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EstimandKind {
    /// Population total of one variable; `level` selects a categorical level
    /// (`None` sums a continuous variable directly).
    Total {
        variable: usize,
        level: Option<usize>,
    },
    /// `P(target.0 = target.1 | all conditions hold)`.
    ConditionalProb {
        target: (usize, usize),
        conditions: Vec<(usize, usize)>,
    },
    /// `P(all cells hold)` over the whole population.
    JointProb { cells: Vec<(usize, usize)> },
}

/// A named estimand, optionally with its true population value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Estimand {
    pub name: String,
    pub kind: EstimandKind,
    #[serde(default)]
    pub truth: Option<f64>,
}

/// Horvitz–Thompson total and its unbiased Poisson-design variance.
///
/// Categorical levels use the indicator `I(x = c)`; `level = None` totals the
/// raw values of a continuous variable.
pub fn ht_total(
    dataset: &CompletedDataset,
    weights: &[f64],
    variable: usize,
    level: Option<usize>,
) -> (f64, f64) {
    let column = &dataset.columns[variable];
    let mut estimate = 0.0;
    let mut variance = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        let y = match level {
            Some(c) => {
                if column[i] as usize == c {
                    1.0
                } else {
                    0.0
                }
            }
            None => column[i],
        };
        if y != 0.0 {
            estimate += w * y;
            variance += w * (w - 1.0) * y * y;
        }
    }
    (estimate, variance)
}

/// Survey-weighted ratio probability with a Taylor-linearized variance.
///
/// With an empty condition list the denominator is the full weighted sample,
/// which makes this a joint probability estimator.
pub fn ratio_prob(
    dataset: &CompletedDataset,
    weights: &[f64],
    target: &[(usize, usize)],
    conditions: &[(usize, usize)],
) -> Result<(f64, f64)> {
    let matches = |i: usize, cells: &[(usize, usize)]| {
        cells.iter().all(|&(var, level)| dataset.cat(i, var) == level)
    };

    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if matches(i, conditions) {
            denominator += w;
            if matches(i, target) {
                numerator += w;
            }
        }
    }
    if denominator <= 0.0 {
        return Err(MdamError::Validation(
            "zero-weight conditioning cell in ratio estimator".into(),
        ));
    }
    let ratio = numerator / denominator;

    // Var of (Y/X) via the linearized residual e_i = a_i - R b_i.
    let mut variance = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if matches(i, conditions) {
            let a = if matches(i, target) { 1.0 } else { 0.0 };
            let e = a - ratio;
            variance += w * (w - 1.0) * e * e;
        }
    }
    variance /= denominator * denominator;
    Ok((ratio, variance))
}

/// Evaluate one estimand on one completed dataset: `(estimate, variance)`.
pub fn estimate_on(
    dataset: &CompletedDataset,
    weights: &[f64],
    estimand: &Estimand,
) -> Result<(f64, f64)> {
    match &estimand.kind {
        EstimandKind::Total { variable, level } => {
            Ok(ht_total(dataset, weights, *variable, *level))
        }
        EstimandKind::ConditionalProb { target, conditions } => {
            ratio_prob(dataset, weights, &[*target], conditions)
        }
        EstimandKind::JointProb { cells } => ratio_prob(dataset, weights, cells, &[]),
    }
}

/// Rubin-pooled estimate across `L` completed datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CombinedEstimate {
    /// Pooled point estimate, the mean of the per-dataset estimates.
    pub point: f64,
    /// Mean within-imputation variance.
    pub within: f64,
    /// Between-imputation variance.
    pub between: f64,
    /// Total variance `within + (1 + 1/L) * between`.
    pub total_variance: f64,
    /// Reference t degrees of freedom; infinite when `between = 0`.
    pub df: f64,
    pub lower: f64,
    pub upper: f64,
    pub l: usize,
}

const Z_975: f64 = 1.959963984540054;

/// Pool per-dataset `(estimate, variance)` pairs with Rubin's rules.
pub fn rubin_combine(estimates: &[(f64, f64)]) -> Result<CombinedEstimate> {
    let l = estimates.len();
    if l < 2 {
        return Err(MdamError::Validation(format!(
            "Rubin pooling needs at least 2 completed datasets, got {l}"
        )));
    }
    let lf = l as f64;
    let point = estimates.iter().map(|(q, _)| q).sum::<f64>() / lf;
    let within = estimates.iter().map(|(_, u)| u).sum::<f64>() / lf;
    let between = estimates
        .iter()
        .map(|(q, _)| (q - point).powi(2))
        .sum::<f64>()
        / (lf - 1.0);
    let inflation = (1.0 + 1.0 / lf) * between;
    let total_variance = within + inflation;

    let df = if between > 0.0 {
        (lf - 1.0) * (1.0 + within / inflation).powi(2)
    } else {
        f64::INFINITY
    };

    // The t quantile is numerically indistinguishable from the normal one
    // well before 1e6 degrees of freedom, and the inversion grinds there.
    let quantile = if df.is_finite() && df < 1e6 {
        StudentsT::new(0.0, 1.0, df)
            .map(|t| t.inverse_cdf(0.975))
            .unwrap_or(Z_975)
    } else {
        Z_975
    };
    let half_width = quantile * total_variance.sqrt();

    Ok(CombinedEstimate {
        point,
        within,
        between,
        total_variance,
        df,
        lower: point - half_width,
        upper: point + half_width,
        l,
    })
}

impl CombinedEstimate {
    pub fn covers(&self, truth: f64) -> bool {
        self.lower <= truth && truth <= self.upper
    }
}

/// Replication summary for one estimand under one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub truth: f64,
    /// Root mean squared error of the pooled points, divided by |truth|.
    /// NaN when the truth is zero; use `rmse` then.
    pub rrmse: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_bias: f64,
    pub mean_interval_width: f64,
    pub replicates: usize,
}

/// Summarize pooled estimates across replicates against the true value.
pub fn evaluate_replicates(combined: &[CombinedEstimate], truth: f64) -> Result<ReplicateMetrics> {
    let s = combined.len();
    if s < 2 {
        return Err(MdamError::Validation(
            "replicate evaluation needs at least 2 replicates".into(),
        ));
    }
    let sf = s as f64;
    let mse = combined
        .iter()
        .map(|c| (c.point - truth).powi(2))
        .sum::<f64>()
        / sf;
    let rmse = mse.sqrt();
    let rrmse = if truth != 0.0 { rmse / truth.abs() } else { f64::NAN };
    let coverage = combined.iter().filter(|c| c.covers(truth)).count() as f64 / sf;
    let mean_bias = combined.iter().map(|c| c.point - truth).sum::<f64>() / sf;
    let mean_interval_width = combined.iter().map(|c| c.upper - c.lower).sum::<f64>() / sf;
    Ok(ReplicateMetrics {
        truth,
        rrmse,
        rmse,
        coverage,
        mean_bias,
        mean_interval_width,
        replicates: s,
    })
}

/// Normal 97.5% quantile, used where a z interval is wanted directly.
pub fn normal_975() -> f64 {
    Normal::new(0.0, 1.0).map(|n| n.inverse_cdf(0.975)).unwrap_or(Z_975)
}
