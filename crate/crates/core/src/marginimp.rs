//! Margin-constrained imputation of unit nonresponse.
//!
//! For each margined variable, a plausible population total is sampled from
//! the known margin, and the nonrespondents' working imputation
//! probabilities are adjusted so the completed-data Horvitz–Thompson total
//! matches that sampled target in expectation. Two adjustment strategies are
//! provided: per-level multiplicative factors (`adj`) and a solved
//! system encoding constant log-odds between respondents and nonrespondents
//! plus the total constraints (`sys`). The fabricated-weight baseline
//! (`yr`) is the same adjustment pipeline run under
//! [`SampleFrame::ht_weight_view`] fabricated weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::encode::push_encoded;
use crate::error::{MdamError, Result};
use crate::frame::{MarginEntry, Provenance, SampleFrame, WeightMode, WorkingDataset};
use crate::itemimp::sample_level;
use crate::regress::{self, design_from_rows, EquationSystem, SolveOutcome};
use crate::rng::substream;

/// How nonrespondent working probabilities are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkingMode {
    /// Logistic regression on the design size measure (plus conditioners).
    LogisticOnZ,
    /// Logistic regression on the weight (plus conditioners).
    LogisticOnW,
    /// Logistic regression on the conditioners only (a pure intercept for
    /// the first margined variable).
    InterceptOnly,
    /// Survey-weighted ratio shares by conditioner pattern; no regression.
    WeightedRatio,
}

/// Plausible population totals sampled from a margin.
#[derive(Debug, Clone, Serialize)]
pub struct TargetTotalDraw {
    pub variable: usize,
    /// One total per level; the last level is set by subtraction so the
    /// vector sums to N exactly.
    pub totals: Vec<f64>,
}

/// Redraw budget before giving up on a margin with excessive variance.
const MAX_TOTAL_REDRAWS: usize = 100;

/// Residual (probability scale) below which a stalled system solve is
/// accepted as a root for clamping rather than failing the dataset.
const NEAR_ROOT_TOL: f64 = 1e-6;

/// Sample `T_c ~ N(T_c, V_c)` for all but the last level, which is set by
/// subtraction from N. Redraws when any level goes negative.
pub fn sample_target_totals<R: Rng + ?Sized>(
    margin: &MarginEntry,
    variable_name: &str,
    population_size: f64,
    rng: &mut R,
) -> Result<TargetTotalDraw> {
    let m = margin.totals.len();
    for _ in 0..MAX_TOTAL_REDRAWS {
        let mut totals = Vec::with_capacity(m);
        for c in 0..m - 1 {
            let sd = margin.variances[c].sqrt();
            let dist = Normal::new(margin.totals[c], sd)
                .map_err(|e| MdamError::Config(format!("margin variance: {e}")))?;
            totals.push(dist.sample(rng));
        }
        let head: f64 = totals.iter().sum();
        totals.push(population_size - head);
        if totals.iter().all(|&t| t >= 0.0) {
            return Ok(TargetTotalDraw {
                variable: margin.variable,
                totals,
            });
        }
    }
    Err(MdamError::MarginVarianceTooLarge {
        variable: variable_name.to_string(),
        attempts: MAX_TOTAL_REDRAWS,
    })
}

/// Working imputation probabilities for the unit nonrespondents.
#[derive(Debug, Clone)]
pub struct WorkingDistribution {
    /// Row indices of the unit nonrespondents, frame order.
    pub nonrespondents: Vec<usize>,
    /// One probability vector per nonrespondent, each over levels `1..=m`.
    pub probs: Vec<Vec<f64>>,
    pub mode: WorkingMode,
}

impl WorkingDistribution {
    /// Whether any two units carry different vectors.
    pub fn varies_by_unit(&self) -> bool {
        match self.probs.split_first() {
            None => false,
            Some((first, rest)) => rest.iter().any(|p| {
                p.iter()
                    .zip(first)
                    .any(|(a, b)| (a - b).abs() > 1e-12)
            }),
        }
    }
}

fn conditioner_pattern(dataset: &WorkingDataset, unit: usize, conditioners: &[usize]) -> Vec<usize> {
    conditioners
        .iter()
        .map(|&k| dataset.cat(unit, k).expect("conditioner imputed"))
        .collect()
}

/// Fit the working model on respondents (case weights = the supplied weight
/// view) and evaluate it at every nonrespondent.
///
/// Conditioners must already be filled for the nonrespondents; for the first
/// margined variable the list is empty.
pub fn working_distribution(
    frame: &SampleFrame,
    dataset: &WorkingDataset,
    variable: usize,
    conditioners: &[usize],
    mode: WorkingMode,
    weights: &[f64],
) -> Result<WorkingDistribution> {
    let levels = frame.schema[variable]
        .levels()
        .ok_or_else(|| MdamError::Config("margined variable must be categorical".into()))?;
    let respondents: Vec<usize> = frame.respondents().collect();
    let nonrespondents: Vec<usize> = frame.unit_nonrespondents().collect();

    let probs = match mode {
        WorkingMode::WeightedRatio => {
            ratio_working_probs(frame, dataset, variable, conditioners, weights, &respondents, &nonrespondents)?
        }
        _ => {
            let design_col = |unit: usize| -> Option<f64> {
                match mode {
                    WorkingMode::LogisticOnZ => Some(
                        frame.units[unit]
                            .size_measure
                            .unwrap_or(frame.units[unit].weight),
                    ),
                    WorkingMode::LogisticOnW => Some(weights[unit]),
                    _ => None,
                }
            };
            let build_row = |unit: usize| -> Vec<f64> {
                let mut row = vec![1.0];
                for &k in conditioners {
                    let value = dataset.value(unit, k).expect("conditioner cell filled");
                    push_encoded(&frame.schema[k], value, &mut row);
                }
                if let Some(v) = design_col(unit) {
                    row.push(v);
                }
                row
            };
            let rows: Vec<Vec<f64>> = respondents.iter().map(|&i| build_row(i)).collect();
            let response: Vec<usize> = respondents
                .iter()
                .map(|&i| dataset.cat(i, variable).expect("respondent value filled") - 1)
                .collect();
            let case_weights: Vec<f64> = respondents.iter().map(|&i| weights[i]).collect();
            let fit = regress::fit_logistic(&design_from_rows(&rows), &response, levels, &case_weights)?;
            nonrespondents
                .iter()
                .map(|&i| fit.predict_row(&build_row(i)))
                .collect::<Result<Vec<_>>>()?
        }
    };

    Ok(WorkingDistribution {
        nonrespondents,
        probs,
        mode,
    })
}

fn ratio_working_probs(
    frame: &SampleFrame,
    dataset: &WorkingDataset,
    variable: usize,
    conditioners: &[usize],
    weights: &[f64],
    respondents: &[usize],
    nonrespondents: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let levels = frame.schema[variable].levels().unwrap();
    let mut table: std::collections::HashMap<Vec<usize>, Vec<f64>> = std::collections::HashMap::new();
    for &i in respondents {
        let pattern = conditioner_pattern(dataset, i, conditioners);
        let entry = table.entry(pattern).or_insert_with(|| vec![0.0; levels]);
        let c = dataset.cat(i, variable).expect("respondent value filled") - 1;
        entry[c] += weights[i];
    }
    nonrespondents
        .iter()
        .map(|&i| {
            let pattern = conditioner_pattern(dataset, i, conditioners);
            let counts = table.get(&pattern).ok_or_else(|| {
                MdamError::Validation(format!(
                    "no respondents share conditioning pattern {pattern:?}"
                ))
            })?;
            let total: f64 = counts.iter().sum();
            if total <= 0.0 {
                return Err(MdamError::Validation(
                    "zero respondent weight in conditioning pattern".into(),
                ));
            }
            Ok(counts.iter().map(|c| c / total).collect())
        })
        .collect()
}

/// Numerators and denominators behind the per-level adjustment factors.
#[derive(Debug, Clone, Serialize)]
pub struct AdjustmentFactors {
    pub variable: usize,
    /// `T_c - respondent HT contribution`, all levels.
    pub numerators: Vec<f64>,
    /// `sum over nonrespondents of w_i p_ic`, all levels.
    pub denominators: Vec<f64>,
    /// Factors for levels `1..m` (the last level is completed by
    /// subtraction, not a factor).
    pub factors: Vec<f64>,
}

fn factor_for(numerator: f64, denominator: f64, level: usize) -> Result<f64> {
    if denominator == 0.0 {
        if numerator.abs() > 0.0 {
            return Err(MdamError::ZeroAdjustmentDenominator {
                level: level + 1,
                numerator,
            });
        }
        return Ok(1.0);
    }
    let factor = numerator / denominator;
    if !factor.is_finite() {
        return Err(MdamError::NonFiniteAdjustment { level: level + 1 });
    }
    Ok(factor)
}

/// Per-level multiplicative factors aligning the expected nonrespondent
/// contribution with the sampled totals.
pub fn adjustment_factors(
    working: &WorkingDistribution,
    dataset: &WorkingDataset,
    frame: &SampleFrame,
    weights: &[f64],
    draw: &TargetTotalDraw,
    variable: usize,
) -> Result<AdjustmentFactors> {
    let m = draw.totals.len();
    let mut respondent_contribution = vec![0.0; m];
    for i in frame.respondents() {
        let c = dataset
            .cat(i, variable)
            .ok_or_else(|| MdamError::Validation("respondent cell missing at adjustment".into()))?;
        respondent_contribution[c - 1] += weights[i];
    }
    let mut denominators = vec![0.0; m];
    for (idx, &i) in working.nonrespondents.iter().enumerate() {
        for c in 0..m {
            denominators[c] += weights[i] * working.probs[idx][c];
        }
    }
    let numerators: Vec<f64> = (0..m)
        .map(|c| draw.totals[c] - respondent_contribution[c])
        .collect();
    let factors: Vec<f64> = (0..m - 1)
        .map(|c| factor_for(numerators[c], denominators[c], c))
        .collect::<Result<_>>()?;
    Ok(AdjustmentFactors {
        variable,
        numerators,
        denominators,
        factors,
    })
}

/// Counts of safeguard activations while finalizing adjusted probabilities.
#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq)]
pub struct SafeguardFlags {
    /// Units whose adjusted head mass exceeded one and were renormalized
    /// with all-level factors.
    pub full_renormalized: usize,
    /// Units with a negative adjusted probability clamped to zero.
    pub negative_clamped: usize,
    /// Units whose rescaled system vectors needed clamping or
    /// renormalization beyond float drift.
    pub unit_rescaled: usize,
}

impl SafeguardFlags {
    pub fn any(&self) -> bool {
        self.full_renormalized > 0 || self.negative_clamped > 0 || self.unit_rescaled > 0
    }

    pub fn total(&self) -> usize {
        self.full_renormalized + self.negative_clamped + self.unit_rescaled
    }
}

/// Apply the factors to every working vector, with the spill-over and
/// negative-mass safeguards. Output vectors always lie in the simplex.
pub fn finalize_probs(
    working: &WorkingDistribution,
    factors: &AdjustmentFactors,
) -> Result<(WorkingDistribution, SafeguardFlags)> {
    let m = factors.numerators.len();
    let mut flags = SafeguardFlags::default();
    // All-level factors are only defined (and only needed) when some unit's
    // adjusted head mass spills past one.
    let mut full_factors: Option<Vec<f64>> = None;

    let mut adjusted = Vec::with_capacity(working.probs.len());
    for (idx, p) in working.probs.iter().enumerate() {
        let head: f64 = (0..m - 1).map(|c| factors.factors[c] * p[c]).sum();
        let mut vector = if head > 1.0 {
            let full = match &full_factors {
                Some(full) => full,
                None => {
                    let computed: Vec<f64> = (0..m)
                        .map(|c| factor_for(factors.numerators[c], factors.denominators[c], c))
                        .collect::<Result<_>>()?;
                    full_factors = Some(computed);
                    full_factors.as_ref().unwrap()
                }
            };
            flags.full_renormalized += 1;
            let raw: Vec<f64> = (0..m).map(|c| full[c] * p[c]).collect();
            let total: f64 = raw.iter().sum();
            if total <= 0.0 {
                return Err(MdamError::InfeasibleAdjustment {
                    unit: working.nonrespondents[idx],
                });
            }
            raw.iter().map(|v| v / total).collect::<Vec<f64>>()
        } else {
            let mut vector: Vec<f64> = (0..m - 1).map(|c| factors.factors[c] * p[c]).collect();
            vector.push(1.0 - head);
            vector
        };

        if vector.iter().any(|&v| v < 0.0) {
            flags.negative_clamped += 1;
            for v in vector.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let total: f64 = vector.iter().sum();
            if total <= 0.0 {
                return Err(MdamError::InfeasibleAdjustment {
                    unit: working.nonrespondents[idx],
                });
            }
            for v in vector.iter_mut() {
                *v /= total;
            }
        }
        adjusted.push(vector);
    }

    Ok((
        WorkingDistribution {
            nonrespondents: working.nonrespondents.clone(),
            probs: adjusted,
            mode: working.mode,
        },
        flags,
    ))
}

/// Diagnostics for one completed dataset's margin-imputation pass.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetMarginReport {
    pub dataset: usize,
    pub substream: String,
    pub target_totals: Vec<f64>,
    pub flags: SafeguardFlags,
    /// Present for system-of-equations runs.
    pub solver: Option<SolverDiagnostics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverDiagnostics {
    pub max_residual: f64,
    pub iterations: usize,
    /// Set when the solved probabilities needed clamping into [0, 1].
    pub clamped: bool,
    /// Set when the solver stalled just short of tolerance and the best
    /// point was accepted for clamping instead of failing the dataset.
    pub near_root_accepted: bool,
}

/// Margin-imputation diagnostics for one variable across the L datasets.
#[derive(Debug, Clone, Serialize)]
pub struct MarginReport {
    pub variable: String,
    pub method: String,
    pub datasets: Vec<DatasetMarginReport>,
}

/// Impute one margined variable in every dataset with the multiplicative
/// adjustment method.
///
/// Earlier margined variables must already be imputed; they are passed as
/// `conditioners` and enter the working model.
#[allow(clippy::too_many_arguments)]
pub fn impute_margin_adj(
    frame: &SampleFrame,
    datasets: &mut [WorkingDataset],
    variable: usize,
    conditioners: &[usize],
    margin: &MarginEntry,
    mode: WorkingMode,
    weights: &[f64],
    master_seed: u64,
    scope: &str,
) -> Result<MarginReport> {
    let reports: Vec<DatasetMarginReport> = datasets
        .par_iter_mut()
        .enumerate()
        .map(|(l, dataset)| {
            let label = format!("{scope}/marginimp/adj/{variable}/dataset/{l}");
            let mut rng = substream(master_seed, &label);
            adj_one_dataset(
                frame, dataset, variable, conditioners, margin, mode, weights, &mut rng, l, label,
            )
            .map_err(|source| MdamError::DatasetFailed {
                dataset: l,
                source: Box::new(source),
            })
        })
        .collect::<Result<_>>()?;
    Ok(MarginReport {
        variable: frame.schema[variable].name.clone(),
        method: "adj".to_string(),
        datasets: reports,
    })
}

#[allow(clippy::too_many_arguments)]
fn adj_one_dataset<R: Rng + ?Sized>(
    frame: &SampleFrame,
    dataset: &mut WorkingDataset,
    variable: usize,
    conditioners: &[usize],
    margin: &MarginEntry,
    mode: WorkingMode,
    weights: &[f64],
    rng: &mut R,
    l: usize,
    label: String,
) -> Result<DatasetMarginReport> {
    if frame.unit_nonrespondents().next().is_none() {
        return Ok(DatasetMarginReport {
            dataset: l,
            substream: label,
            target_totals: margin.totals.clone(),
            flags: SafeguardFlags::default(),
            solver: None,
        });
    }
    let draw = sample_target_totals(
        margin,
        &frame.schema[variable].name,
        frame.population_size,
        rng,
    )?;
    let working = working_distribution(frame, dataset, variable, conditioners, mode, weights)?;
    let factors = adjustment_factors(&working, dataset, frame, weights, &draw, variable)?;
    let (adjusted, flags) = finalize_probs(&working, &factors)?;
    draw_into_dataset(dataset, variable, &adjusted, rng);
    Ok(DatasetMarginReport {
        dataset: l,
        substream: label,
        target_totals: draw.totals,
        flags,
        solver: None,
    })
}

fn draw_into_dataset<R: Rng + ?Sized>(
    dataset: &mut WorkingDataset,
    variable: usize,
    adjusted: &WorkingDistribution,
    rng: &mut R,
) {
    for (idx, &unit) in adjusted.nonrespondents.iter().enumerate() {
        let level = sample_level(&adjusted.probs[idx], rng);
        dataset.set(unit, variable, (level + 1) as f64, Provenance::UnitImputed);
    }
}

/// Solved conditional probabilities `P(X2 = c | X1 = d)` for the
/// nonrespondents; column `d` sums to one.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionalProbTable {
    /// `columns[d][c]`, 0-based level indices.
    pub columns: Vec<Vec<f64>>,
}

/// Pieces of the system-of-equations build shared with the solver caller.
///
/// The nonlinear system runs over the active conditioner levels only (those
/// carrying nonrespondent mass); levels nobody imputes from are pinned to
/// the respondent ratio estimates.
pub struct SysSystem<'a> {
    pub system: EquationSystem<'a>,
    pub m1: usize,
    pub m2: usize,
    /// Conditioner levels (0-based) with positive nonrespondent mass, in
    /// order; the first is the log-odds reference.
    pub active: Vec<usize>,
    /// Respondent ratio estimates `[d][c]` after continuity correction.
    pub respondent_probs: Vec<Vec<f64>>,
    /// Weighted nonrespondent mass per conditioner level, all levels.
    pub nr_cell_weights: Vec<f64>,
    /// `T_c - respondent contribution` for each level of the target.
    pub residual_totals: Vec<f64>,
    /// Total constraints are solved divided by this mass so every equation
    /// lives on the probability scale; multiply residuals back for raw units.
    pub total_scale: f64,
}

impl SysSystem<'_> {
    /// Decode a solver root into the full probability table, clamping into
    /// [0, 1] and renormalizing each column. Returns the table and whether
    /// clamping was needed.
    pub fn decode(&self, root: &[f64]) -> (ConditionalProbTable, bool) {
        let mut clamped = false;
        let a = self.active.len();
        let mut columns = Vec::with_capacity(self.m1);
        for d in 0..self.m1 {
            let mut column = match self.active.iter().position(|&ad| ad == d) {
                Some(ai) => {
                    let mut column = Vec::with_capacity(self.m2);
                    let mut head = 0.0;
                    for c in 1..self.m2 {
                        head += root[(c - 1) * a + ai];
                    }
                    column.push(1.0 - head);
                    for c in 1..self.m2 {
                        column.push(root[(c - 1) * a + ai]);
                    }
                    if column.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                        clamped = true;
                        for p in column.iter_mut() {
                            *p = p.clamp(0.0, 1.0);
                        }
                    }
                    column
                }
                // No nonrespondent draws from this level; keep the
                // respondent estimates.
                None => self.respondent_probs[d].clone(),
            };
            let total: f64 = column.iter().sum();
            if total > 0.0 {
                for p in column.iter_mut() {
                    *p /= total;
                }
            } else {
                clamped = true;
                for p in column.iter_mut() {
                    *p = 1.0 / self.m2 as f64;
                }
            }
            columns.push(column);
        }
        (ConditionalProbTable { columns }, clamped)
    }
}

/// Scale of the smooth floor applied inside logs: probabilities pass
/// through `(p + sqrt(p^2 + 4s^2))/2`, which agrees with `p` away from zero
/// but stays positive and differentiable for infeasible targets whose roots
/// sit outside the unit interval. Distorts well-separated probabilities by
/// under 1e-8 in the logs.
const LOG_SMOOTH_SCALE: f64 = 1e-6;

fn smooth_positive(p: f64) -> f64 {
    0.5 * (p + (p * p + 4.0 * LOG_SMOOTH_SCALE * LOG_SMOOTH_SCALE).sqrt())
}

/// Build the nonlinear system for a margined target variable conditioned on
/// one earlier margined variable: constant log-odds equations against the
/// respondent ratio estimates plus the sampled total constraints.
pub fn build_sys_system<'a>(
    frame: &SampleFrame,
    dataset: &WorkingDataset,
    target: usize,
    conditioner: usize,
    weights: &'a [f64],
    draw: &TargetTotalDraw,
) -> Result<SysSystem<'a>> {
    let m2 = frame.schema[target]
        .levels()
        .ok_or_else(|| MdamError::Config("system target must be categorical".into()))?;
    let m1 = frame.schema[conditioner]
        .levels()
        .ok_or_else(|| MdamError::Config("system conditioner must be categorical".into()))?;

    // Respondent weighted cross-tab, target level by conditioner level.
    let mut cells = vec![vec![0.0f64; m1]; m2];
    let mut min_positive_weight = f64::INFINITY;
    for i in frame.respondents() {
        let c = dataset
            .cat(i, target)
            .ok_or_else(|| MdamError::Validation("respondent target cell missing".into()))?
            - 1;
        let d = dataset
            .cat(i, conditioner)
            .ok_or_else(|| MdamError::Validation("respondent conditioner cell missing".into()))?
            - 1;
        cells[c][d] += weights[i];
        if weights[i] > 0.0 {
            min_positive_weight = min_positive_weight.min(weights[i]);
        }
    }
    for d in 0..m1 {
        let column_weight: f64 = (0..m2).map(|c| cells[c][d]).sum();
        if column_weight <= 0.0 {
            return Err(MdamError::InestimableLogOdds { level: 0, cell: d + 1 });
        }
    }
    // Continuity correction keeps empty cells out of the logs.
    let epsilon = 0.5 * min_positive_weight;
    for column in 0..m1 {
        for row in 0..m2 {
            if cells[row][column] == 0.0 {
                cells[row][column] = epsilon;
            }
        }
    }
    // Ratio estimates of P(X2 = c | X1 = d) among respondents, stored
    // column-major to match the decoded table.
    let mut respondent_probs = vec![vec![0.0f64; m2]; m1];
    for (d, column) in respondent_probs.iter_mut().enumerate() {
        let total: f64 = (0..m2).map(|c| cells[c][d]).sum();
        for (c, value) in column.iter_mut().enumerate() {
            *value = cells[c][d] / total;
        }
    }

    let mut nr_cell_weights = vec![0.0f64; m1];
    for i in frame.unit_nonrespondents() {
        let d = dataset
            .cat(i, conditioner)
            .ok_or_else(|| MdamError::Validation("conditioner not imputed before system".into()))?
            - 1;
        nr_cell_weights[d] += weights[i];
    }
    // Levels nobody would draw from stay pinned at the respondent
    // estimates; their unknowns would be determined only by razor-thin
    // log-odds constraints.
    let active: Vec<usize> = (0..m1).filter(|&d| nr_cell_weights[d] > 0.0).collect();
    if active.is_empty() {
        return Err(MdamError::Validation(
            "no unit nonrespondents to impute in the system".into(),
        ));
    }
    let a = active.len();

    // Log-odds targets relative to target level 0 and the first active
    // conditioner level.
    let reference = active[0];
    let mut log_odds_rhs = vec![vec![0.0f64; a]; m2];
    for c in 1..m2 {
        for (ai, &d) in active.iter().enumerate().skip(1) {
            log_odds_rhs[c][ai] = (respondent_probs[d][c] / respondent_probs[d][0]).ln()
                - (respondent_probs[reference][c] / respondent_probs[reference][0]).ln();
        }
    }

    let mut respondent_contribution = vec![0.0f64; m2];
    for i in frame.respondents() {
        let c = dataset.cat(i, target).unwrap() - 1;
        respondent_contribution[c] += weights[i];
    }
    let residual_totals: Vec<f64> = (0..m2)
        .map(|c| draw.totals[c] - respondent_contribution[c])
        .collect();

    // Unknowns: p[c][active ai] for c in 1..m2, laid out (c-1)*a + ai;
    // level 0 completes each column by subtraction.
    let dimension = (m2 - 1) * a;
    let mut initial = vec![0.0; dimension];
    for c in 1..m2 {
        for (ai, &d) in active.iter().enumerate() {
            initial[(c - 1) * a + ai] = respondent_probs[d][c];
        }
    }

    let active_weights: Vec<f64> = active.iter().map(|&d| nr_cell_weights[d]).collect();
    let total_scale = active_weights.iter().sum::<f64>().max(1.0);

    let rhs = log_odds_rhs;
    let residuals_for_f = residual_totals.clone();
    let residual = move |x: &[f64], out: &mut [f64]| {
        let p = |c: usize, ai: usize| -> f64 {
            if c == 0 {
                let head: f64 = (1..m2).map(|cc| x[(cc - 1) * a + ai]).sum();
                1.0 - head
            } else {
                x[(c - 1) * a + ai]
            }
        };
        let logp = |c: usize, ai: usize| smooth_positive(p(c, ai)).max(1e-300).ln();
        let mut eq = 0;
        for c in 1..m2 {
            for ai in 1..a {
                out[eq] = (logp(c, ai) - logp(0, ai)) - (logp(c, 0) - logp(0, 0)) - rhs[c][ai];
                eq += 1;
            }
        }
        // Total constraints bind the first m2-1 levels, mirroring the
        // sampled margins where the last level is the slack by subtraction.
        for c in 0..m2 - 1 {
            let lhs: f64 = (0..a).map(|ai| active_weights[ai] * p(c, ai)).sum();
            out[eq] = (lhs - residuals_for_f[c]) / total_scale;
            eq += 1;
        }
        debug_assert_eq!(eq, out.len());
    };

    Ok(SysSystem {
        system: EquationSystem::new(dimension, initial, residual),
        m1,
        m2,
        active,
        respondent_probs,
        nr_cell_weights,
        residual_totals,
        total_scale,
    })
}

/// Impute one margined variable in every dataset with the
/// system-of-equations method.
///
/// When the working mode yields unit-varying probabilities, the solved table
/// rescales each unit's vector cell-by-cell; otherwise draws come straight
/// from the solved table.
#[allow(clippy::too_many_arguments)]
pub fn impute_margin_sys(
    frame: &SampleFrame,
    datasets: &mut [WorkingDataset],
    target: usize,
    conditioner: usize,
    margin: &MarginEntry,
    mode: WorkingMode,
    weights: &[f64],
    master_seed: u64,
    scope: &str,
) -> Result<MarginReport> {
    let reports: Vec<DatasetMarginReport> = datasets
        .par_iter_mut()
        .enumerate()
        .map(|(l, dataset)| {
            let label = format!("{scope}/marginimp/sys/{target}/dataset/{l}");
            let mut rng = substream(master_seed, &label);
            sys_one_dataset(
                frame, dataset, target, conditioner, margin, mode, weights, &mut rng, l, label,
            )
            .map_err(|source| MdamError::DatasetFailed {
                dataset: l,
                source: Box::new(source),
            })
        })
        .collect::<Result<_>>()?;
    Ok(MarginReport {
        variable: frame.schema[target].name.clone(),
        method: "sys".to_string(),
        datasets: reports,
    })
}

#[allow(clippy::too_many_arguments)]
fn sys_one_dataset<R: Rng + ?Sized>(
    frame: &SampleFrame,
    dataset: &mut WorkingDataset,
    target: usize,
    conditioner: usize,
    margin: &MarginEntry,
    mode: WorkingMode,
    weights: &[f64],
    rng: &mut R,
    l: usize,
    label: String,
) -> Result<DatasetMarginReport> {
    if frame.unit_nonrespondents().next().is_none() {
        return Ok(DatasetMarginReport {
            dataset: l,
            substream: label,
            target_totals: margin.totals.clone(),
            flags: SafeguardFlags::default(),
            solver: None,
        });
    }
    let draw = sample_target_totals(
        margin,
        &frame.schema[target].name,
        frame.population_size,
        rng,
    )?;
    let mut sys = build_sys_system(frame, dataset, target, conditioner, weights, &draw)?;
    let mut near_root_accepted = false;
    let outcome: SolveOutcome = match solve_with_restarts(&mut sys) {
        Ok(outcome) => outcome,
        // Infeasible targets can leave the solver crawling along the unit
        // boundary; a near-root on the probability scale is statistically
        // indistinguishable after clamping, so accept it and flag it.
        Err(MdamError::SolverNoConvergence {
            best_residual,
            best_point,
        }) if best_residual <= NEAR_ROOT_TOL => {
            near_root_accepted = true;
            SolveOutcome {
                root: best_point,
                max_residual: best_residual,
                iterations: regress::MAX_SOLVE_ITER,
            }
        }
        Err(other) => return Err(other),
    };
    let (table, clamped) = sys.decode(&outcome.root);

    let mut flags = SafeguardFlags::default();
    let working = working_distribution(frame, dataset, target, &[conditioner], mode, weights)?;
    if varies_within_cells(dataset, conditioner, &working) {
        // Rescale unit vectors so each cell's weighted mass matches the
        // solved table, then draw per unit.
        let rescaled = rescale_unit_probs(dataset, conditioner, &working, &table, weights, &mut flags)?;
        draw_into_dataset(dataset, target, &rescaled, rng);
    } else {
        let adjusted = WorkingDistribution {
            nonrespondents: working.nonrespondents.clone(),
            probs: working
                .nonrespondents
                .iter()
                .map(|&i| {
                    let d = dataset.cat(i, conditioner).unwrap() - 1;
                    table.columns[d].clone()
                })
                .collect(),
            mode,
        };
        draw_into_dataset(dataset, target, &adjusted, rng);
    }

    Ok(DatasetMarginReport {
        dataset: l,
        substream: label,
        target_totals: draw.totals,
        flags,
        solver: Some(SolverDiagnostics {
            max_residual: outcome.max_residual,
            iterations: outcome.iterations,
            clamped,
            near_root_accepted,
        }),
    })
}

/// Solve from the respondent-probability start, falling back to a start
/// that matches the total constraints and then to the uniform table. Roots
/// outside the unit interval (infeasible targets) are often reachable only
/// from one of the alternatives.
fn solve_with_restarts(sys: &mut SysSystem<'_>) -> Result<SolveOutcome> {
    let a = sys.active.len();
    let m2 = sys.m2;
    let dimension = sys.system.dimension;

    // The totals-matched start satisfies the bound total constraints
    // (levels 0..m2-1) exactly, with the last level taking the slack.
    // Infeasible targets put it outside the unit interval, which is where
    // the root lives; it must not be clamped back inside, only kept finite.
    let mut shares: Vec<f64> = (0..m2 - 1)
        .map(|c| (sys.residual_totals[c] / sys.total_scale).clamp(-5.0, 6.0))
        .collect();
    shares.push(1.0 - shares.iter().sum::<f64>());
    let mut totals_matched = vec![0.0; dimension];
    for c in 1..m2 {
        for ai in 0..a {
            totals_matched[(c - 1) * a + ai] = shares[c];
        }
    }
    let starts = [
        sys.system.initial.clone(),
        totals_matched,
        vec![1.0 / m2 as f64; dimension],
    ];

    let mut best_failure = f64::INFINITY;
    let mut best_point = sys.system.initial.clone();
    for start in starts {
        sys.system.initial = start;
        match regress::solve_system(&sys.system) {
            Ok(outcome) => return Ok(outcome),
            Err(MdamError::SolverNoConvergence {
                best_residual,
                best_point: point,
            }) => {
                if best_residual < best_failure {
                    best_failure = best_residual;
                    best_point = point;
                }
            }
            Err(other) => return Err(other),
        }
    }
    Err(MdamError::SolverNoConvergence {
        best_residual: best_failure,
        best_point,
    })
}

/// Whether working vectors differ between units sharing a conditioner
/// value; cell-constant vectors make the rescaling a no-op, so those draws
/// come straight from the solved table.
fn varies_within_cells(
    dataset: &WorkingDataset,
    conditioner: usize,
    working: &WorkingDistribution,
) -> bool {
    let mut first_in_cell: std::collections::HashMap<usize, &Vec<f64>> =
        std::collections::HashMap::new();
    for (idx, &i) in working.nonrespondents.iter().enumerate() {
        let d = dataset.cat(i, conditioner).expect("conditioner imputed");
        match first_in_cell.get(&d) {
            None => {
                first_in_cell.insert(d, &working.probs[idx]);
            }
            Some(reference) => {
                if reference
                    .iter()
                    .zip(&working.probs[idx])
                    .any(|(a, b)| (a - b).abs() > 1e-12)
                {
                    return true;
                }
            }
        }
    }
    false
}

/// Match each conditioner cell's weighted mass to the solved table:
/// `f_cd = (sum_i w_i p_cd) / (sum_i w_i p_ic)` over the nonrespondents in
/// cell `d`, then rescale each unit's vector and bring it back to the
/// simplex.
fn rescale_unit_probs(
    dataset: &WorkingDataset,
    conditioner: usize,
    working: &WorkingDistribution,
    table: &ConditionalProbTable,
    weights: &[f64],
    flags: &mut SafeguardFlags,
) -> Result<WorkingDistribution> {
    let m1 = table.columns.len();
    let m2 = table.columns[0].len();
    let cell_of: Vec<usize> = working
        .nonrespondents
        .iter()
        .map(|&i| dataset.cat(i, conditioner).unwrap() - 1)
        .collect();

    // Weighted working mass per (cell, level).
    let mut cell_weight = vec![0.0f64; m1];
    let mut working_mass = vec![vec![0.0f64; m2]; m1];
    for (idx, &i) in working.nonrespondents.iter().enumerate() {
        let d = cell_of[idx];
        cell_weight[d] += weights[i];
        for c in 0..m2 {
            working_mass[d][c] += weights[i] * working.probs[idx][c];
        }
    }

    let mut factors = vec![vec![1.0f64; m2]; m1];
    for d in 0..m1 {
        if cell_weight[d] == 0.0 {
            continue;
        }
        for c in 0..m2 {
            let target_mass = cell_weight[d] * table.columns[d][c];
            factors[d][c] = if working_mass[d][c] > 0.0 {
                target_mass / working_mass[d][c]
            } else if target_mass == 0.0 {
                1.0
            } else {
                // No working mass to rescale; fall back to the table value.
                f64::NAN
            };
        }
    }

    let probs = working
        .probs
        .iter()
        .enumerate()
        .map(|(idx, p)| {
            let d = cell_of[idx];
            let mut vector: Vec<f64> = (0..m2)
                .map(|c| {
                    if factors[d][c].is_nan() {
                        table.columns[d][c]
                    } else {
                        factors[d][c] * p[c]
                    }
                })
                .collect();
            let raw_sum: f64 = vector.iter().sum();
            let mut touched = false;
            for v in vector.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                    touched = true;
                }
            }
            let total: f64 = vector.iter().sum();
            if total <= 0.0 {
                return Err(MdamError::InfeasibleAdjustment {
                    unit: working.nonrespondents[idx],
                });
            }
            for v in vector.iter_mut() {
                *v /= total;
            }
            if touched || (raw_sum - 1.0).abs() > 1e-9 {
                flags.unit_rescaled += 1;
            }
            Ok(vector)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(WorkingDistribution {
        nonrespondents: working.nonrespondents.clone(),
        probs,
        mode: working.mode,
    })
}

/// Fabricated weight vector per the constant-replacement baseline; the
/// pipeline run under these weights with intercept-only working
/// distributions is the `yr` method.
pub fn fabricated_weights(frame: &SampleFrame) -> Result<Vec<f64>> {
    frame.ht_weight_view(WeightMode::Fabricated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{UnitRecord, VariableSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn margin(variable: usize, totals: Vec<f64>, variances: Vec<f64>) -> MarginEntry {
        MarginEntry {
            variable,
            totals,
            variances,
        }
    }

    #[test]
    fn degenerate_variance_returns_exact_totals() {
        let entry = margin(0, vec![40.0, 60.0], vec![0.0, 0.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let draw = sample_target_totals(&entry, "x", 100.0, &mut rng).unwrap();
        assert_eq!(draw.totals, vec![40.0, 60.0]);
    }

    #[test]
    fn draws_always_sum_to_n() {
        let entry = margin(0, vec![30.0, 30.0, 40.0], vec![16.0, 25.0, 9.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..200 {
            let draw = sample_target_totals(&entry, "x", 100.0, &mut rng).unwrap();
            let sum: f64 = draw.totals.iter().sum();
            assert!((sum - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn draw_moments_match_margin() {
        let entry = margin(0, vec![400.0, 600.0], vec![100.0, 100.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let draw = sample_target_totals(&entry, "x", 1000.0, &mut rng).unwrap();
            sum += draw.totals[0];
            sumsq += draw.totals[0] * draw.totals[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se_mean = (100.0f64 / n as f64).sqrt();
        assert!((mean - 400.0).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - 100.0).abs() < 0.1 * 100.0, "variance {var}");
    }

    #[test]
    fn excessive_variance_errors() {
        // Totals near zero with enormous variance: negative draws every time.
        let entry = margin(0, vec![1e-6, 100.0 - 1e-6], vec![1e12, 1.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        assert!(matches!(
            sample_target_totals(&entry, "x", 100.0, &mut rng),
            Err(MdamError::MarginVarianceTooLarge { .. })
        ));
    }

    /// Frame with binary x1; respondents observed, nonrespondents missing.
    fn adj_fixture() -> (SampleFrame, WorkingDataset) {
        let schema = vec![VariableSpec::categorical("x1", 2).with_margin()];
        let mut units = Vec::new();
        // Respondents: 4 units at level 1 (weights 2,3,2,3), 4 at level 2.
        for (value, weight) in [
            (1.0, 2.0),
            (1.0, 3.0),
            (1.0, 2.0),
            (1.0, 3.0),
            (2.0, 2.0),
            (2.0, 3.0),
            (2.0, 2.0),
            (2.0, 3.0),
        ] {
            units.push(UnitRecord {
                values: vec![Some(value)],
                weight,
                inclusion_prob: 1.0 / weight,
                unit_nonresponse: false,
                size_measure: None,
            });
        }
        // Nonrespondents with weights 2 and 3.
        for weight in [2.0, 3.0] {
            units.push(UnitRecord {
                values: vec![None],
                weight,
                inclusion_prob: 1.0 / weight,
                unit_nonresponse: true,
                size_measure: None,
            });
        }
        let frame = SampleFrame {
            schema,
            units,
            population_size: 100.0,
        };
        let dataset = WorkingDataset::from_frame(&frame);
        (frame, dataset)
    }

    #[test]
    fn intercept_only_working_distribution_is_weighted_share() {
        let (frame, dataset) = adj_fixture();
        let weights: Vec<f64> = frame.units.iter().map(|u| u.weight).collect();
        let working =
            working_distribution(&frame, &dataset, 0, &[], WorkingMode::InterceptOnly, &weights)
                .unwrap();
        // Level-1 respondent weight 10 of 20 -> 0.5 for every nonrespondent.
        for p in &working.probs {
            assert!((p[0] - 0.5).abs() < 1e-6, "p = {p:?}");
        }
        assert!(!working.varies_by_unit());
    }

    #[test]
    fn weighted_ratio_matches_intercept_only() {
        let (frame, dataset) = adj_fixture();
        let weights: Vec<f64> = frame.units.iter().map(|u| u.weight).collect();
        let ratio =
            working_distribution(&frame, &dataset, 0, &[], WorkingMode::WeightedRatio, &weights)
                .unwrap();
        for p in &ratio.probs {
            assert!((p[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_adjustment_factor() {
        // Working probs (0.5, 0.5) for both nonrespondents (weights 2, 3),
        // respondent level-1 contribution 10, target 14:
        // f_1 = (14 - 10) / (0.5*2 + 0.5*3) = 1.6.
        let (frame, dataset) = adj_fixture();
        let weights: Vec<f64> = frame.units.iter().map(|u| u.weight).collect();
        let working = WorkingDistribution {
            nonrespondents: frame.unit_nonrespondents().collect(),
            probs: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            mode: WorkingMode::InterceptOnly,
        };
        let draw = TargetTotalDraw {
            variable: 0,
            totals: vec![14.0, 86.0],
        };
        let factors = adjustment_factors(&working, &dataset, &frame, &weights, &draw, 0).unwrap();
        assert!((factors.factors[0] - 1.6).abs() < 1e-12);

        let (adjusted, flags) = finalize_probs(&working, &factors).unwrap();
        assert!(!flags.any());
        for p in &adjusted.probs {
            assert!((p[0] - 0.8).abs() < 1e-12);
            assert!((p[1] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_factors_preserve_expectation() {
        let (frame, dataset) = adj_fixture();
        let weights: Vec<f64> = frame.units.iter().map(|u| u.weight).collect();
        let working = WorkingDistribution {
            nonrespondents: frame.unit_nonrespondents().collect(),
            probs: vec![vec![0.3, 0.7], vec![0.6, 0.4]],
            mode: WorkingMode::LogisticOnW,
        };
        let draw = TargetTotalDraw {
            variable: 0,
            totals: vec![13.0, 87.0],
        };
        let factors = adjustment_factors(&working, &dataset, &frame, &weights, &draw, 0).unwrap();
        let (adjusted, flags) = finalize_probs(&working, &factors).unwrap();
        assert!(!flags.any());
        // Expectation identity: sum of w * adjusted level-1 mass equals the
        // target minus the respondent contribution.
        let mass: f64 = adjusted
            .nonrespondents
            .iter()
            .zip(&adjusted.probs)
            .map(|(&i, p)| weights[i] * p[0])
            .sum();
        assert!((mass - 3.0).abs() < 1e-9 * 3.0);
        // Proportionality within the level.
        let r0 = adjusted.probs[0][0] / working.probs[0][0];
        let r1 = adjusted.probs[1][0] / working.probs[1][0];
        assert!((r0 - r1).abs() < 1e-12);
    }

    #[test]
    fn identity_factors_leave_working_untouched() {
        let working = WorkingDistribution {
            nonrespondents: vec![0, 1],
            probs: vec![vec![0.25, 0.75], vec![0.5, 0.5]],
            mode: WorkingMode::InterceptOnly,
        };
        let factors = AdjustmentFactors {
            variable: 0,
            numerators: vec![1.0, 1.0],
            denominators: vec![1.0, 1.0],
            factors: vec![1.0],
        };
        let (adjusted, flags) = finalize_probs(&working, &factors).unwrap();
        assert!(!flags.any());
        assert_eq!(adjusted.probs, working.probs);
    }

    #[test]
    fn spillover_triggers_full_renormalization() {
        // f_1 * p_1 = 1.2 > 1 forces the all-level path.
        let working = WorkingDistribution {
            nonrespondents: vec![5],
            probs: vec![vec![0.6, 0.4]],
            mode: WorkingMode::InterceptOnly,
        };
        let factors = AdjustmentFactors {
            variable: 0,
            numerators: vec![2.4, 0.2],
            denominators: vec![1.2, 0.8],
            factors: vec![2.0],
        };
        let (adjusted, flags) = finalize_probs(&working, &factors).unwrap();
        assert_eq!(flags.full_renormalized, 1);
        let sum: f64 = adjusted.probs[0].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(adjusted.probs[0].iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn negative_factor_clamps_and_flags() {
        let working = WorkingDistribution {
            nonrespondents: vec![2],
            probs: vec![vec![0.5, 0.5]],
            mode: WorkingMode::InterceptOnly,
        };
        let factors = AdjustmentFactors {
            variable: 0,
            numerators: vec![-0.5, 1.5],
            denominators: vec![0.5, 0.5],
            factors: vec![-1.0],
        };
        let (adjusted, flags) = finalize_probs(&working, &factors).unwrap();
        assert_eq!(flags.negative_clamped, 1);
        assert_eq!(adjusted.probs[0][0], 0.0);
        assert!((adjusted.probs[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_denominator_with_nonzero_numerator_errors() {
        let working = WorkingDistribution {
            nonrespondents: vec![0],
            probs: vec![vec![0.0, 1.0]],
            mode: WorkingMode::InterceptOnly,
        };
        let (frame, dataset) = adj_fixture();
        let weights: Vec<f64> = frame.units.iter().map(|u| u.weight).collect();
        // Respondent level-1 contribution is 10; target 14 leaves numerator 4
        // against zero working mass at level 1.
        let draw = TargetTotalDraw {
            variable: 0,
            totals: vec![14.0, 86.0],
        };
        let err = adjustment_factors(&working, &dataset, &frame, &weights, &draw, 0).unwrap_err();
        assert!(matches!(err, MdamError::ZeroAdjustmentDenominator { .. }));
    }
}
