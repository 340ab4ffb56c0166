//! Chained-equations multiple imputation of item nonresponse.
//!
//! Runs on unit respondents only: unit nonrespondents keep all cells missing
//! for the margin-imputation stage. Each of the `L` chains bootstraps with a
//! weighted donor fill, then sweeps the variables with missingness, refitting
//! the variable's model on the originally observed cells and redrawing only
//! the originally missing ones.

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::encode::{encoded_width, push_encoded};
use crate::error::{MdamError, Result};
use crate::frame::{Provenance, SampleFrame, VariableKind, WorkingDataset};
use crate::regress::{self, design_from_rows};
use crate::rng::substream;

/// Per-variable imputation model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImputationMethod {
    /// Multinomial logistic with posterior coefficient draws.
    BayesLogistic,
    /// Normal linear model with posterior draws; imputations clamped to the
    /// variable's declared range.
    BayesLinear,
    /// Predictive mean matching among the k nearest observed donors.
    PredictiveMeanMatch { k: usize },
}

/// Settings for the chained-equations stage.
#[derive(Debug, Clone)]
pub struct ItemImputationSpec {
    /// Number of completed datasets L.
    pub l_datasets: usize,
    /// Chained-equation sweeps per dataset.
    pub cycles: usize,
    /// Variable visit order; defaults to schema order among variables with
    /// any item missingness.
    pub visit_order: Option<Vec<usize>>,
    /// Model per schema variable.
    pub methods: Vec<ImputationMethod>,
    /// Predictor set per variable; defaults to all other survey variables.
    pub predictors: Option<Vec<Vec<usize>>>,
    /// Append the design size measure (or the weight when no size measure is
    /// on file) as a predictor.
    pub include_design: bool,
}

impl ItemImputationSpec {
    /// Defaults for a schema: L = 10, 10 cycles, models chosen by kind.
    pub fn for_frame(frame: &SampleFrame) -> Self {
        let methods = frame
            .schema
            .iter()
            .map(|spec| match spec.kind {
                VariableKind::Categorical { .. } => ImputationMethod::BayesLogistic,
                VariableKind::Continuous { .. } => ImputationMethod::BayesLinear,
            })
            .collect();
        Self {
            l_datasets: 10,
            cycles: 10,
            visit_order: None,
            methods,
            predictors: None,
            include_design: true,
        }
    }

    fn validate(&self, frame: &SampleFrame) -> Result<()> {
        if self.l_datasets < 2 {
            return Err(MdamError::Config(format!(
                "need at least 2 completed datasets, got {}",
                self.l_datasets
            )));
        }
        if self.cycles < 1 {
            return Err(MdamError::Config("need at least one chained cycle".into()));
        }
        if self.methods.len() != frame.n_vars() {
            return Err(MdamError::Config(
                "one imputation method per schema variable required".into(),
            ));
        }
        if let Some(order) = &self.visit_order {
            let mut expected = variables_with_item_missingness(frame);
            let mut got = order.clone();
            expected.sort_unstable();
            got.sort_unstable();
            if expected != got {
                return Err(MdamError::Config(
                    "visit order must be a permutation of the variables with item missingness"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

/// Schema indices of variables some respondent skipped.
pub fn variables_with_item_missingness(frame: &SampleFrame) -> Vec<usize> {
    (0..frame.n_vars())
        .filter(|&j| {
            frame
                .respondents()
                .any(|i| frame.units[i].values[j].is_none())
        })
        .collect()
}

/// Fill every missing respondent cell with a weighted draw from the
/// variable's observed respondent values.
pub fn initial_fill<R: Rng + ?Sized>(
    frame: &SampleFrame,
    rng: &mut R,
) -> Result<WorkingDataset> {
    let mut dataset = WorkingDataset::from_frame(frame);
    let respondents: Vec<usize> = frame.respondents().collect();
    if respondents.is_empty() {
        return Err(MdamError::Validation("frame has no unit respondents".into()));
    }

    for j in 0..frame.n_vars() {
        let missing: Vec<usize> = respondents
            .iter()
            .copied()
            .filter(|&i| frame.units[i].values[j].is_none())
            .collect();
        if missing.is_empty() {
            continue;
        }
        let donors: Vec<usize> = respondents
            .iter()
            .copied()
            .filter(|&i| frame.units[i].values[j].is_some())
            .collect();
        if donors.is_empty() {
            return Err(MdamError::NoObservedDonors {
                variable: frame.schema[j].name.clone(),
            });
        }
        let weights: Vec<f64> = donors.iter().map(|&i| frame.units[i].weight).collect();
        let picker = WeightedIndex::new(&weights)
            .map_err(|e| MdamError::Validation(format!("donor weights: {e}")))?;
        for i in missing {
            let donor = donors[picker.sample(rng)];
            let value = frame.units[donor].values[j].unwrap();
            dataset.set(i, j, value, Provenance::ItemImputed);
        }
    }
    Ok(dataset)
}

/// One sweep over the variables with item missingness: refit, draw
/// parameters, redraw the originally missing cells. Observed cells are never
/// touched.
pub fn chained_pass<R: Rng + ?Sized>(
    frame: &SampleFrame,
    dataset: &mut WorkingDataset,
    spec: &ItemImputationSpec,
    cycle: usize,
    rng: &mut R,
) -> Result<()> {
    let order = match &spec.visit_order {
        Some(order) => order.clone(),
        None => variables_with_item_missingness(frame),
    };
    for j in order {
        impute_variable(frame, dataset, spec, j, cycle, rng).map_err(|source| {
            MdamError::FitFailed {
                variable: frame.schema[j].name.clone(),
                cycle,
                source: Box::new(source),
            }
        })?;
    }
    Ok(())
}

fn default_predictors(frame: &SampleFrame, target: usize) -> Vec<usize> {
    (0..frame.n_vars()).filter(|&k| k != target).collect()
}

fn design_value(frame: &SampleFrame, unit: usize) -> f64 {
    frame.units[unit]
        .size_measure
        .unwrap_or(frame.units[unit].weight)
}

fn build_row(
    frame: &SampleFrame,
    dataset: &WorkingDataset,
    unit: usize,
    predictors: &[usize],
    include_design: bool,
) -> Vec<f64> {
    let mut row = Vec::with_capacity(
        1 + predictors
            .iter()
            .map(|&k| encoded_width(&frame.schema[k]))
            .sum::<usize>()
            + usize::from(include_design),
    );
    row.push(1.0);
    for &k in predictors {
        let value = dataset.value(unit, k).expect("predictor cell filled");
        push_encoded(&frame.schema[k], value, &mut row);
    }
    if include_design {
        row.push(design_value(frame, unit));
    }
    row
}

fn impute_variable<R: Rng + ?Sized>(
    frame: &SampleFrame,
    dataset: &mut WorkingDataset,
    spec: &ItemImputationSpec,
    variable: usize,
    _cycle: usize,
    rng: &mut R,
) -> Result<()> {
    let predictors = match &spec.predictors {
        Some(sets) => sets[variable].clone(),
        None => default_predictors(frame, variable),
    };
    let observed: Vec<usize> = frame
        .respondents()
        .filter(|&i| frame.units[i].values[variable].is_some())
        .collect();
    let missing: Vec<usize> = frame
        .respondents()
        .filter(|&i| frame.units[i].values[variable].is_none())
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    if observed.is_empty() {
        return Err(MdamError::NoObservedDonors {
            variable: frame.schema[variable].name.clone(),
        });
    }

    let rows: Vec<Vec<f64>> = observed
        .iter()
        .map(|&i| build_row(frame, dataset, i, &predictors, spec.include_design))
        .collect();
    let design = design_from_rows(&rows);
    let fit_weights = vec![1.0; observed.len()];

    match (spec.methods[variable], &frame.schema[variable].kind) {
        (ImputationMethod::BayesLogistic, VariableKind::Categorical { levels }) => {
            let response: Vec<usize> = observed
                .iter()
                .map(|&i| frame.units[i].values[variable].unwrap() as usize - 1)
                .collect();
            let fit = regress::fit_logistic(&design, &response, *levels, &fit_weights)?;
            let draw = fit.draw_params(rng)?;
            for &i in &missing {
                let row = build_row(frame, dataset, i, &predictors, spec.include_design);
                let probs = draw.predict_row(*levels, &row)?;
                let level = sample_level(&probs, rng);
                dataset.set(i, variable, (level + 1) as f64, Provenance::ItemImputed);
            }
        }
        (ImputationMethod::BayesLinear, VariableKind::Continuous { lo, hi }) => {
            let response: Vec<f64> = observed
                .iter()
                .map(|&i| frame.units[i].values[variable].unwrap())
                .collect();
            let fit = regress::fit_linear(&design, &response, &fit_weights)?;
            let draw = fit.draw_params(rng)?;
            let sd = draw.residual_variance.sqrt();
            for &i in &missing {
                let row = build_row(frame, dataset, i, &predictors, spec.include_design);
                let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
                let value = (draw.predict(&row) + sd * noise).clamp(*lo, *hi);
                dataset.set(i, variable, value, Provenance::ItemImputed);
            }
        }
        (ImputationMethod::PredictiveMeanMatch { k }, VariableKind::Continuous { .. }) => {
            let response: Vec<f64> = observed
                .iter()
                .map(|&i| frame.units[i].values[variable].unwrap())
                .collect();
            let fit = regress::fit_linear(&design, &response, &fit_weights)?;
            let draw = fit.draw_params(rng)?;
            // Donor predictions use the point estimate, recipient predictions
            // the drawn coefficients (type-1 matching).
            let donor_pred: Vec<f64> = rows
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(fit.coefficients.iter())
                        .map(|(x, b)| x * b)
                        .sum()
                })
                .collect();
            let k = k.max(1).min(observed.len());
            for &i in &missing {
                let row = build_row(frame, dataset, i, &predictors, spec.include_design);
                let target = draw.predict(&row);
                let mut order: Vec<usize> = (0..observed.len()).collect();
                order.sort_by(|&a, &b| {
                    (donor_pred[a] - target)
                        .abs()
                        .partial_cmp(&(donor_pred[b] - target).abs())
                        .unwrap()
                });
                let pick = order[rng.gen_range(0..k)];
                dataset.set(i, variable, response[pick], Provenance::ItemImputed);
            }
        }
        (method, _) => {
            return Err(MdamError::Config(format!(
                "method {method:?} does not match the kind of `{}`",
                frame.schema[variable].name
            )))
        }
    }
    Ok(())
}

pub(crate) fn sample_level<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (level, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return level;
        }
    }
    probs.len() - 1
}

/// Run one chain: weighted bootstrap fill plus `cycles` chained sweeps.
pub fn impute_chain<R: Rng + ?Sized>(
    frame: &SampleFrame,
    spec: &ItemImputationSpec,
    rng: &mut R,
) -> Result<WorkingDataset> {
    let mut dataset = initial_fill(frame, rng)?;
    for cycle in 1..=spec.cycles {
        chained_pass(frame, &mut dataset, spec, cycle, rng)?;
    }
    Ok(dataset)
}

/// Produce `L` partially completed datasets from independent chains.
///
/// Chain `l` draws from the substream `{scope}/itemimp/chain/{l}`, so output
/// is identical however the chains are scheduled.
pub fn impute_items(
    frame: &SampleFrame,
    spec: &ItemImputationSpec,
    master_seed: u64,
    scope: &str,
) -> Result<Vec<WorkingDataset>> {
    spec.validate(frame)?;
    (0..spec.l_datasets)
        .into_par_iter()
        .map(|l| {
            let mut rng = substream(master_seed, &format!("{scope}/itemimp/chain/{l}"));
            impute_chain(frame, spec, &mut rng)
        })
        .collect()
}
