//! Monte Carlo laboratory: synthetic population, Poisson sampling, MNAR
//! unit nonresponse, itemwise conditionally independent item nonresponse,
//! and the replicated comparison of the imputation methods.
//!
//! Binary survey variables are generated on a 0/1 scale and stored as codes
//! 1 (for 1) and 2 (for 0), so level 1 of a binary margin is the count of
//! generated ones. Coefficients on categorical predictors apply to the
//! indicator of level 1; continuous predictors enter raw.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MdamError, Result};
use crate::estimate::{
    estimate_on, evaluate_replicates, rubin_combine, CombinedEstimate, Estimand, EstimandKind,
    ReplicateMetrics,
};
use crate::frame::{
    validate_completed, AuxiliaryMargins, MarginEntry, Provenance, SampleFrame, UnitRecord,
    VariableKind, VariableSpec, WorkingDataset,
};
use crate::hotdeck::{hotdeck_impute, HotDeckOptions};
use crate::itemimp::{impute_chain, impute_items, ItemImputationSpec};
use crate::marginimp::{impute_margin_adj, impute_margin_sys, WorkingMode};
use crate::rng::substream;

/// Size-measure generator: lognormal with clipping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizeMeasureConfig {
    pub log_mean: f64,
    pub log_sd: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

/// Linear predictor over previously generated variables plus the centered
/// log size measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub intercept: f64,
    /// Coefficient on `ln(z) - log_mean`.
    #[serde(default)]
    pub coef_log_z: f64,
    /// One coefficient per earlier variable (indicator of level 1 for
    /// categorical predictors, raw value for continuous).
    #[serde(default)]
    pub coefs: Vec<f64>,
}

impl LinearPredictor {
    fn eval(&self, earlier: &[f64], schema: &[VariableSpec], centered_log_z: f64) -> f64 {
        let mut eta = self.intercept + self.coef_log_z * centered_log_z;
        for (k, coef) in self.coefs.iter().enumerate() {
            eta += coef * paper_value(&schema[k], earlier[k]);
        }
        eta
    }
}

/// Generator for one survey variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum VariableGen {
    /// Bernoulli on the logit scale; success stored as code 1, failure as 2.
    Binary { logit: LinearPredictor },
    /// Normal, clipped into the variable's declared range.
    Continuous { mean: LinearPredictor, sd: f64 },
}

/// Synthetic-population settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub population_size: usize,
    pub size_measure: SizeMeasureConfig,
    pub variables: Vec<(VariableSpec, VariableGen)>,
}

/// A categorical value on the generator's 0/1 scale (indicator of level 1);
/// continuous values pass through.
fn paper_value(spec: &VariableSpec, value: f64) -> f64 {
    match spec.kind {
        VariableKind::Categorical { .. } => {
            if value as usize == 1 {
                1.0
            } else {
                0.0
            }
        }
        VariableKind::Continuous { .. } => value,
    }
}

fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl PopulationConfig {
    /// Six-variable population shaped like a household survey extract: four
    /// binaries (two of them margined), travel time in [0, 888], an income
    /// score in [0, 80]. Sampling with `pi = 1/(10 z)` draws about 1% of the
    /// population.
    pub fn synthetic_default(population_size: usize) -> Self {
        let log_mean = 10f64.ln() + 0.125; // harmonic mean of z is 10
        let schema_and_gen = vec![
            (
                VariableSpec::categorical("x1", 2).with_margin(),
                VariableGen::Binary {
                    logit: LinearPredictor {
                        intercept: -0.45,
                        coef_log_z: 0.4,
                        coefs: vec![],
                    },
                },
            ),
            (
                VariableSpec::categorical("x2", 2).with_margin(),
                VariableGen::Binary {
                    logit: LinearPredictor {
                        intercept: -0.65,
                        coef_log_z: 0.2,
                        coefs: vec![0.8],
                    },
                },
            ),
            (
                VariableSpec::categorical("x3", 2),
                VariableGen::Binary {
                    logit: LinearPredictor {
                        intercept: 0.9,
                        coef_log_z: 0.0,
                        coefs: vec![0.5, 0.3],
                    },
                },
            ),
            (
                VariableSpec::categorical("x4", 2),
                VariableGen::Binary {
                    logit: LinearPredictor {
                        intercept: -1.2,
                        coef_log_z: 0.0,
                        coefs: vec![0.2, -0.3, 0.2],
                    },
                },
            ),
            (
                VariableSpec::continuous("x5", 0.0, 888.0),
                VariableGen::Continuous {
                    mean: LinearPredictor {
                        intercept: 18.0,
                        coef_log_z: 0.0,
                        coefs: vec![5.0, 3.0, 2.0, -2.0],
                    },
                    sd: 12.0,
                },
            ),
            (
                VariableSpec::continuous("x6", 0.0, 80.0),
                VariableGen::Continuous {
                    mean: LinearPredictor {
                        intercept: 14.0,
                        coef_log_z: 0.0,
                        coefs: vec![6.0, 4.0, 2.0, -1.0, 0.08],
                    },
                    sd: 10.0,
                },
            ),
        ];
        Self {
            population_size,
            size_measure: SizeMeasureConfig {
                log_mean,
                log_sd: 0.5,
                clip_lo: 0.5,
                clip_hi: 500.0,
            },
            variables: schema_and_gen,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.population_size < 1_000 {
            return Err(MdamError::Config(format!(
                "population size {} below the 1,000 floor",
                self.population_size
            )));
        }
        if !(self.size_measure.log_sd >= 0.0)
            || !(self.size_measure.clip_lo > 0.0)
            || self.size_measure.clip_lo >= self.size_measure.clip_hi
        {
            return Err(MdamError::Config("invalid size-measure settings".into()));
        }
        for (j, (spec, gen)) in self.variables.iter().enumerate() {
            let coefs = match gen {
                VariableGen::Binary { logit } => {
                    if !matches!(spec.kind, VariableKind::Categorical { levels: 2 }) {
                        return Err(MdamError::Config(format!(
                            "binary generator on non-binary variable `{}`",
                            spec.name
                        )));
                    }
                    &logit.coefs
                }
                VariableGen::Continuous { mean, sd } => {
                    if !matches!(spec.kind, VariableKind::Continuous { .. }) {
                        return Err(MdamError::Config(format!(
                            "continuous generator on categorical variable `{}`",
                            spec.name
                        )));
                    }
                    if !(*sd >= 0.0) {
                        return Err(MdamError::Config("negative generator sd".into()));
                    }
                    &mean.coefs
                }
            };
            if coefs.len() > j {
                return Err(MdamError::Config(format!(
                    "generator for `{}` references later variables",
                    spec.name
                )));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Vec<VariableSpec> {
        self.variables.iter().map(|(spec, _)| spec.clone()).collect()
    }
}

/// Fully known synthetic population with exact totals stored at synthesis.
#[derive(Debug, Clone)]
pub struct PopulationFrame {
    pub schema: Vec<VariableSpec>,
    /// `columns[j][i]`.
    pub columns: Vec<Vec<f64>>,
    pub size_measure: Vec<f64>,
    pub inclusion_prob: Vec<f64>,
    /// Per categorical variable: counts per level, stored while generating.
    pub level_totals: Vec<Option<Vec<f64>>>,
    /// Per variable: sum of values.
    pub value_totals: Vec<f64>,
}

impl PopulationFrame {
    pub fn n(&self) -> usize {
        self.size_measure.len()
    }

    /// Exact population value of an estimand, recounted from the frame.
    pub fn truth(&self, kind: &EstimandKind) -> f64 {
        let n = self.n();
        let matches = |i: usize, cells: &[(usize, usize)]| {
            cells
                .iter()
                .all(|&(var, level)| self.columns[var][i] as usize == level)
        };
        match kind {
            EstimandKind::Total { variable, level } => (0..n)
                .map(|i| match level {
                    Some(c) => {
                        if self.columns[*variable][i] as usize == *c {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    None => self.columns[*variable][i],
                })
                .sum(),
            EstimandKind::ConditionalProb { target, conditions } => {
                let mut num = 0.0;
                let mut den = 0.0;
                for i in 0..n {
                    if matches(i, conditions) {
                        den += 1.0;
                        if matches(i, &[*target]) {
                            num += 1.0;
                        }
                    }
                }
                num / den
            }
            EstimandKind::JointProb { cells } => {
                (0..n).filter(|&i| matches(i, cells)).count() as f64 / n as f64
            }
        }
    }
}

/// Generate the population: size measures, inclusion probabilities
/// `min(1, 1/(10 z))`, and the sequential survey variables.
pub fn synth_population<R: Rng + ?Sized>(
    config: &PopulationConfig,
    rng: &mut R,
) -> Result<PopulationFrame> {
    config.validate()?;
    let n = config.population_size;
    let p = config.variables.len();
    let schema = config.schema();

    let log_normal = Normal::new(config.size_measure.log_mean, config.size_measure.log_sd)
        .map_err(|e| MdamError::Config(format!("size measure: {e}")))?;

    let mut columns = vec![vec![0.0f64; n]; p];
    let mut size_measure = vec![0.0f64; n];
    let mut inclusion_prob = vec![0.0f64; n];
    let mut level_totals: Vec<Option<Vec<f64>>> = schema
        .iter()
        .map(|spec| spec.levels().map(|m| vec![0.0; m]))
        .collect();
    let mut value_totals = vec![0.0f64; p];

    let mut earlier = vec![0.0f64; p];
    for i in 0..n {
        let z = log_normal
            .sample(rng)
            .exp()
            .clamp(config.size_measure.clip_lo, config.size_measure.clip_hi);
        size_measure[i] = z;
        inclusion_prob[i] = (1.0 / (10.0 * z)).min(1.0);
        let centered_log_z = z.ln() - config.size_measure.log_mean;

        for (j, (spec, gen)) in config.variables.iter().enumerate() {
            let value = match gen {
                VariableGen::Binary { logit } => {
                    let eta = logit.eval(&earlier[..j], &schema, centered_log_z);
                    if rng.gen::<f64>() < inv_logit(eta) {
                        1.0
                    } else {
                        2.0
                    }
                }
                VariableGen::Continuous { mean, sd } => {
                    let mu = mean.eval(&earlier[..j], &schema, centered_log_z);
                    let noise: f64 = rng.sample(StandardNormal);
                    let (lo, hi) = match spec.kind {
                        VariableKind::Continuous { lo, hi } => (lo, hi),
                        _ => unreachable!("validated"),
                    };
                    (mu + sd * noise).clamp(lo, hi)
                }
            };
            earlier[j] = value;
            columns[j][i] = value;
            if let Some(totals) = &mut level_totals[j] {
                totals[value as usize - 1] += 1.0;
            }
            value_totals[j] += value;
        }
    }

    Ok(PopulationFrame {
        schema,
        columns,
        size_measure,
        inclusion_prob,
        level_totals,
        value_totals,
    })
}

/// Independent Bernoulli inclusion with the population's unit
/// probabilities; design weights are the inverse probabilities.
pub fn poisson_sample<R: Rng + ?Sized>(pop: &PopulationFrame, rng: &mut R) -> SampleFrame {
    let mut units = Vec::new();
    for i in 0..pop.n() {
        let pi = pop.inclusion_prob[i];
        if rng.gen::<f64>() < pi {
            units.push(UnitRecord {
                values: (0..pop.schema.len())
                    .map(|j| Some(pop.columns[j][i]))
                    .collect(),
                weight: 1.0 / pi,
                inclusion_prob: pi,
                unit_nonresponse: false,
                size_measure: Some(pop.size_measure[i]),
            });
        }
    }
    SampleFrame {
        schema: pop.schema.clone(),
        units,
        population_size: pop.n() as f64,
    }
}

/// Nonresponse mechanism settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonresponseConfig {
    pub unit_intercept: f64,
    /// Per-variable unit nonresponse coefficients (level-1 indicator scale).
    pub unit_coefs: Vec<f64>,
    pub item_intercepts: Vec<f64>,
    /// `item_coefs[j][k]` multiplies variable k in the model for `R_j`; the
    /// diagonal is ignored so missingness never depends on the variable's
    /// own value.
    pub item_coefs: Vec<Vec<f64>>,
    pub item_coef_z: f64,
}

impl NonresponseConfig {
    /// The study's missing-not-at-random mechanism for a six-variable
    /// schema: unit nonresponse loads on the two margined binaries for a
    /// rate near 23%, item nonresponse runs 20-25% per variable.
    pub fn mnar_defaults() -> Self {
        let p = 6;
        let item_intercepts = (0..p)
            .map(|j| if j < 4 { -1.6 } else { -1.5 })
            .collect();
        let item_coefs = (0..p)
            .map(|_| {
                (0..p)
                    .map(|k| if k < 4 { 0.1 } else { 0.0001 })
                    .collect()
            })
            .collect();
        Self {
            unit_intercept: -1.6,
            unit_coefs: vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
            item_intercepts,
            item_coefs,
            item_coef_z: 0.00001,
        }
    }

    /// Missing-completely-at-random variant: same rates, no dependence on
    /// the survey values.
    pub fn mcar(unit_rate_logit: f64, item_rate_logit: f64, p: usize) -> Self {
        Self {
            unit_intercept: unit_rate_logit,
            unit_coefs: vec![0.0; p],
            item_intercepts: vec![item_rate_logit; p],
            item_coefs: vec![vec![0.0; p]; p],
            item_coef_z: 0.0,
        }
    }

    pub fn unit_logit(&self, schema: &[VariableSpec], values: &[f64]) -> f64 {
        let mut eta = self.unit_intercept;
        for (k, coef) in self.unit_coefs.iter().enumerate() {
            eta += coef * paper_value(&schema[k], values[k]);
        }
        eta
    }

    /// Linear predictor for `R_j`; structurally excludes variable `j`.
    pub fn item_logit(&self, schema: &[VariableSpec], values: &[f64], z: f64, j: usize) -> f64 {
        let mut eta = self.item_intercepts[j] + self.item_coef_z * z;
        for (k, coef) in self.item_coefs[j].iter().enumerate() {
            if k == j {
                continue;
            }
            eta += coef * paper_value(&schema[k], values[k]);
        }
        eta
    }
}

/// Draw unit nonresponse from the configured logit and blank every survey
/// value of the nonrespondents. Weights and size measures are retained.
pub fn apply_unit_nonresponse<R: Rng + ?Sized>(
    sample: &SampleFrame,
    config: &NonresponseConfig,
    rng: &mut R,
) -> SampleFrame {
    let mut out = sample.clone();
    for unit in &mut out.units {
        let values: Vec<f64> = unit.values.iter().map(|v| v.unwrap_or(0.0)).collect();
        let eta = config.unit_logit(&out.schema, &values);
        if rng.gen::<f64>() < inv_logit(eta) {
            unit.unit_nonresponse = true;
            unit.values.iter_mut().for_each(|v| *v = None);
        }
    }
    out
}

/// Draw item nonresponse for the unit respondents from the configured
/// itemwise logits, using the pre-blanking values of every covariate, then
/// blank the selected cells.
pub fn apply_item_nonresponse<R: Rng + ?Sized>(
    sample: &SampleFrame,
    config: &NonresponseConfig,
    rng: &mut R,
) -> SampleFrame {
    let mut out = sample.clone();
    let p = out.schema.len();
    for unit in &mut out.units {
        if unit.unit_nonresponse {
            continue;
        }
        let values: Vec<f64> = unit.values.iter().map(|v| v.unwrap()).collect();
        let z = unit.size_measure.unwrap_or(unit.weight / 10.0);
        let mut blank = vec![false; p];
        for j in 0..p {
            let eta = config.item_logit(&out.schema, &values, z, j);
            blank[j] = rng.gen::<f64>() < inv_logit(eta);
        }
        for j in 0..p {
            if blank[j] {
                unit.values[j] = None;
            }
        }
    }
    out
}

/// Imputation method under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Multiplicative adjustment with design weights.
    Adj,
    /// System-of-equations margin imputation with design weights.
    Sys,
    /// Fabricated-weight baseline with intercept-only working models.
    Yr,
    /// Item imputation plus whole-record resampling; ignores margins.
    Ih,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Adj => "adj",
            Method::Sys => "sys",
            Method::Yr => "yr",
            Method::Ih => "ih",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "adj" => Some(Method::Adj),
            "sys" => Some(Method::Sys),
            "yr" => Some(Method::Yr),
            "ih" => Some(Method::Ih),
            _ => None,
        }
    }
}

/// Study settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub replicates: usize,
    pub l_datasets: usize,
    pub cycles: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Estimands to track; truths are resolved against the population.
    pub estimands: Vec<Estimand>,
    /// Schema indices of the margined variables, imputation order.
    pub margined: Vec<usize>,
    pub nonresponse: NonresponseConfig,
    pub working_mode: WorkingMode,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
    /// Abort when more than this fraction of replicates fail.
    pub failure_cap: f64,
}

impl StudyConfig {
    /// Desk-scale defaults mirroring the study design: S = 200 replicates,
    /// L = 10, all four methods, margins on x1 and x2.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            replicates: 200,
            l_datasets: 10,
            cycles: 10,
            methods: vec![Method::Adj, Method::Sys, Method::Yr, Method::Ih],
            seed,
            estimands: Vec::new(),
            margined: vec![0, 1],
            nonresponse: NonresponseConfig::mnar_defaults(),
            working_mode: WorkingMode::LogisticOnZ,
            threads: 0,
            failure_cap: 0.02,
        }
    }
}

/// Default estimand list: the six totals, four conditional probabilities,
/// and two joint probabilities.
pub fn default_estimands(schema: &[VariableSpec]) -> Vec<Estimand> {
    let mut estimands = Vec::new();
    for (j, spec) in schema.iter().enumerate() {
        let (kind, name) = match spec.kind {
            VariableKind::Categorical { .. } => (
                EstimandKind::Total {
                    variable: j,
                    level: Some(1),
                },
                format!("T_{}", spec.name),
            ),
            VariableKind::Continuous { .. } => (
                EstimandKind::Total {
                    variable: j,
                    level: None,
                },
                format!("T_{}", spec.name),
            ),
        };
        estimands.push(Estimand {
            name,
            kind,
            truth: None,
        });
    }
    let conditionals = [
        ((1, 1), (0, 1), "P(x2=1|x1=1)"),
        ((1, 1), (0, 2), "P(x2=1|x1=0)"),
        ((2, 1), (0, 1), "P(x3=1|x1=1)"),
        ((3, 1), (1, 1), "P(x4=1|x2=1)"),
    ];
    for (target, condition, name) in conditionals {
        if target.0 < schema.len() && condition.0 < schema.len() {
            estimands.push(Estimand {
                name: name.to_string(),
                kind: EstimandKind::ConditionalProb {
                    target,
                    conditions: vec![condition],
                },
                truth: None,
            });
        }
    }
    let joints = [
        (vec![(0, 1), (1, 1)], "P(x1=1,x2=1)"),
        (vec![(2, 1), (3, 1)], "P(x3=1,x4=1)"),
    ];
    for (cells, name) in joints {
        if cells.iter().all(|&(v, _)| v < schema.len()) {
            estimands.push(Estimand {
                name: name.to_string(),
                kind: EstimandKind::JointProb { cells },
                truth: None,
            });
        }
    }
    estimands
}

/// One pooled estimate row of the raw study output.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: &'static str,
    pub estimand: String,
    pub estimate: CombinedEstimate,
}

/// Aggregated metrics for one method and estimand.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub method: &'static str,
    pub estimand: String,
    pub metrics: ReplicateMetrics,
}

/// Per-replicate health counters.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateDiagnostics {
    pub replicate: usize,
    pub sample_size: usize,
    pub unit_nonrespondents: usize,
    pub fabricated_weight_sum: Option<f64>,
    pub safeguard_flags: usize,
    pub hotdeck_fallbacks: usize,
    pub solver_max_residual: Option<f64>,
}

/// Full study output.
#[derive(Debug, Clone, Serialize)]
pub struct StudyOutput {
    pub records: Vec<ReplicateRecord>,
    pub metrics: Vec<MetricRow>,
    pub diagnostics: Vec<ReplicateDiagnostics>,
    pub estimands: Vec<Estimand>,
    pub failed_replicates: Vec<(usize, String)>,
    pub master_seed: u64,
}

struct ReplicateOutput {
    estimates: Vec<(Method, Vec<CombinedEstimate>)>,
    diagnostics: ReplicateDiagnostics,
}

/// Run the full replicated study.
pub fn run_study(pop_config: &PopulationConfig, study: &StudyConfig) -> Result<StudyOutput> {
    if study.replicates < 2 {
        return Err(MdamError::Config("need at least 2 replicates".into()));
    }
    if study.methods.is_empty() {
        return Err(MdamError::Config("no methods selected".into()));
    }

    let pop = synth_population(pop_config, &mut substream(study.seed, "population"))?;
    let mut estimands = if study.estimands.is_empty() {
        default_estimands(&pop.schema)
    } else {
        study.estimands.clone()
    };
    for estimand in &mut estimands {
        estimand.truth = Some(pop.truth(&estimand.kind));
    }

    let margin_totals: Vec<(usize, Vec<f64>)> = study
        .margined
        .iter()
        .map(|&j| {
            pop.level_totals[j]
                .clone()
                .map(|t| (j, t))
                .ok_or_else(|| MdamError::Config("margined variable must be categorical".into()))
        })
        .collect::<Result<_>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(study.threads)
        .build()
        .map_err(|e| MdamError::Config(format!("thread pool: {e}")))?;

    let results: Vec<std::result::Result<ReplicateOutput, String>> = pool.install(|| {
        (0..study.replicates)
            .into_par_iter()
            .map(|s| {
                run_replicate(&pop, study, &estimands, &margin_totals, s)
                    .map_err(|e| e.to_string())
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    let mut failed = Vec::new();
    let mut per_cell: Vec<Vec<Vec<CombinedEstimate>>> =
        vec![vec![Vec::new(); estimands.len()]; study.methods.len()];
    for (s, result) in results.into_iter().enumerate() {
        match result {
            Ok(output) => {
                for (method, estimates) in &output.estimates {
                    let method_idx = study.methods.iter().position(|m| m == method).unwrap();
                    for (e_idx, estimate) in estimates.iter().enumerate() {
                        per_cell[method_idx][e_idx].push(estimate.clone());
                        records.push(ReplicateRecord {
                            replicate: s,
                            method: method.name(),
                            estimand: estimands[e_idx].name.clone(),
                            estimate: estimate.clone(),
                        });
                    }
                }
                diagnostics.push(output.diagnostics);
            }
            Err(message) => failed.push((s, message)),
        }
    }

    let cap = (study.failure_cap * study.replicates as f64).floor() as usize;
    if failed.len() > cap {
        return Err(MdamError::TooManyFailedReplicates {
            failed: failed.len(),
            total: study.replicates,
            cap_percent: study.failure_cap * 100.0,
        });
    }

    let mut metrics = Vec::new();
    for (method_idx, method) in study.methods.iter().enumerate() {
        for (e_idx, estimand) in estimands.iter().enumerate() {
            let combined = &per_cell[method_idx][e_idx];
            let truth = estimand.truth.unwrap();
            metrics.push(MetricRow {
                method: method.name(),
                estimand: estimand.name.clone(),
                metrics: evaluate_replicates(combined, truth)?,
            });
        }
    }

    Ok(StudyOutput {
        records,
        metrics,
        diagnostics,
        estimands,
        failed_replicates: failed,
        master_seed: study.seed,
    })
}

fn run_replicate(
    pop: &PopulationFrame,
    study: &StudyConfig,
    estimands: &[Estimand],
    margin_totals: &[(usize, Vec<f64>)],
    replicate: usize,
) -> Result<ReplicateOutput> {
    let scope = format!("rep/{replicate}");
    let seed = study.seed;

    let pristine = poisson_sample(pop, &mut substream(seed, &format!("{scope}/sample")));
    let with_unit_nr = apply_unit_nonresponse(
        &pristine,
        &study.nonresponse,
        &mut substream(seed, &format!("{scope}/unitnr")),
    );
    let frame = apply_item_nonresponse(
        &with_unit_nr,
        &study.nonresponse,
        &mut substream(seed, &format!("{scope}/itemnr")),
    );

    let mut spec = ItemImputationSpec::for_frame(&frame);
    spec.l_datasets = study.l_datasets;
    spec.cycles = study.cycles;

    let margins = estimate_margin_variances(&frame, &spec, margin_totals, seed, &scope)?;
    let item_base = impute_items(&frame, &spec, seed, &scope)?;

    let design_weights: Vec<f64> = frame.units.iter().map(|u| u.weight).collect();
    let has_nonrespondents = frame.unit_nonrespondents().next().is_some();

    let mut diagnostics = ReplicateDiagnostics {
        replicate,
        sample_size: frame.n_units(),
        unit_nonrespondents: frame.unit_nonrespondents().count(),
        fabricated_weight_sum: None,
        safeguard_flags: 0,
        hotdeck_fallbacks: 0,
        solver_max_residual: None,
    };

    let mut estimates = Vec::with_capacity(study.methods.len());
    for &method in &study.methods {
        let cell = run_method(
            &frame,
            &item_base,
            &margins,
            study,
            estimands,
            method,
            &design_weights,
            has_nonrespondents,
            seed,
            &scope,
            &mut diagnostics,
        )?;
        estimates.push((method, cell));
    }

    Ok(ReplicateOutput {
        estimates,
        diagnostics,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    frame: &SampleFrame,
    item_base: &[WorkingDataset],
    margins: &AuxiliaryMargins,
    study: &StudyConfig,
    estimands: &[Estimand],
    method: Method,
    design_weights: &[f64],
    has_nonrespondents: bool,
    seed: u64,
    scope: &str,
    diagnostics: &mut ReplicateDiagnostics,
) -> Result<Vec<CombinedEstimate>> {
    let mut datasets: Vec<WorkingDataset> = item_base.to_vec();
    let method_scope = format!("{scope}/{}", method.name());

    let weights: Vec<f64> = match method {
        Method::Yr if has_nonrespondents => {
            let fabricated = frame.ht_weight_view(crate::frame::WeightMode::Fabricated)?;
            diagnostics.fabricated_weight_sum = Some(fabricated.iter().sum());
            fabricated
        }
        _ => design_weights.to_vec(),
    };

    match method {
        Method::Ih => {
            fill_whole_records(frame, &mut datasets, seed, &method_scope)?;
        }
        Method::Adj | Method::Sys | Method::Yr => {
            if has_nonrespondents {
                let mode = if method == Method::Yr {
                    WorkingMode::InterceptOnly
                } else {
                    study.working_mode
                };
                for (k, &variable) in study.margined.iter().enumerate() {
                    let entry = margins.for_variable(variable).ok_or_else(|| {
                        MdamError::Config("margin missing for margined variable".into())
                    })?;
                    // The system method handles the second margined variable;
                    // the first (and any beyond the second) use adjustment.
                    let use_sys = method == Method::Sys && k == 1;
                    let report = if use_sys {
                        impute_margin_sys(
                            frame,
                            &mut datasets,
                            variable,
                            study.margined[0],
                            entry,
                            mode,
                            &weights,
                            seed,
                            &method_scope,
                        )?
                    } else {
                        impute_margin_adj(
                            frame,
                            &mut datasets,
                            variable,
                            &study.margined[..k],
                            entry,
                            mode,
                            &weights,
                            seed,
                            &method_scope,
                        )?
                    };
                    for dataset_report in &report.datasets {
                        let flags = &dataset_report.flags;
                        diagnostics.safeguard_flags +=
                            flags.full_renormalized + flags.negative_clamped + flags.unit_rescaled;
                        if let Some(solver) = &dataset_report.solver {
                            let current = diagnostics.solver_max_residual.unwrap_or(0.0);
                            diagnostics.solver_max_residual =
                                Some(current.max(solver.max_residual));
                        }
                    }
                }
            }
            let reports = hotdeck_impute(
                frame,
                &mut datasets,
                &study.margined,
                HotDeckOptions::default(),
                seed,
                &method_scope,
            )?;
            for report in &reports {
                diagnostics.hotdeck_fallbacks += report.fallback_drop_last + report.fallback_any;
            }
        }
    }

    let mut per_estimand: Vec<Vec<(f64, f64)>> = vec![Vec::new(); estimands.len()];
    for dataset in datasets {
        let completed = dataset.finalize(frame)?;
        let report = validate_completed(frame, &completed);
        if !report.is_valid() {
            return Err(MdamError::Validation(format!(
                "completed dataset failed validation: {report}"
            )));
        }
        for (e_idx, estimand) in estimands.iter().enumerate() {
            per_estimand[e_idx].push(estimate_on(&completed, &weights, estimand)?);
        }
    }
    per_estimand
        .into_iter()
        .map(|pairs| rubin_combine(&pairs))
        .collect()
}

/// Whole-record resampling with replacement from the completed respondents:
/// every variable of a unit nonrespondent is copied from one donor.
fn fill_whole_records(
    frame: &SampleFrame,
    datasets: &mut [WorkingDataset],
    seed: u64,
    scope: &str,
) -> Result<()> {
    let respondents: Vec<usize> = frame.respondents().collect();
    if respondents.is_empty() {
        return Err(MdamError::EmptyDonorPool);
    }
    let nonrespondents: Vec<usize> = frame.unit_nonrespondents().collect();
    for (l, dataset) in datasets.iter_mut().enumerate() {
        let mut rng = substream(seed, &format!("{scope}/whole-record/dataset/{l}"));
        for &i in &nonrespondents {
            let donor = respondents[rng.gen_range(0..respondents.len())];
            for j in 0..frame.n_vars() {
                let value = dataset
                    .value(donor, j)
                    .ok_or_else(|| MdamError::Validation("donor cell missing".into()))?;
                dataset.set(i, j, value, Provenance::UnitImputed);
            }
        }
    }
    Ok(())
}

/// Margin entries whose variances come from one auxiliary completed dataset:
/// item imputation on the respondents plus whole-record resampling for unit
/// nonrespondents, then the unbiased Poisson variance form.
pub fn estimate_margin_variances(
    frame: &SampleFrame,
    spec: &ItemImputationSpec,
    margin_totals: &[(usize, Vec<f64>)],
    seed: u64,
    scope: &str,
) -> Result<AuxiliaryMargins> {
    let mut rng = substream(seed, &format!("{scope}/margin-variance"));
    let mut aux = impute_chain(frame, spec, &mut rng)?;
    let respondents: Vec<usize> = frame.respondents().collect();
    if respondents.is_empty() {
        return Err(MdamError::EmptyDonorPool);
    }
    for i in frame.unit_nonrespondents() {
        let donor = respondents[rng.gen_range(0..respondents.len())];
        for j in 0..frame.n_vars() {
            let value = aux
                .value(donor, j)
                .ok_or_else(|| MdamError::Validation("aux donor cell missing".into()))?;
            aux.set(i, j, value, Provenance::UnitImputed);
        }
    }

    let entries = margin_totals
        .iter()
        .map(|(variable, totals)| {
            let levels = totals.len();
            let mut variances = vec![0.0f64; levels];
            for (i, unit) in frame.units.iter().enumerate() {
                let c = aux
                    .cat(i, *variable)
                    .ok_or_else(|| MdamError::Validation("aux cell missing".into()))?;
                variances[c - 1] += unit.weight * (unit.weight - 1.0);
            }
            for v in variances.iter_mut() {
                *v = v.max(1e-6);
            }
            Ok(MarginEntry {
                variable: *variable,
                totals: totals.clone(),
                variances,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AuxiliaryMargins { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_is_reproducible() {
        let config = PopulationConfig::synthetic_default(1_000);
        let a = synth_population(&config, &mut substream(3, "population")).unwrap();
        let b = synth_population(&config, &mut substream(3, "population")).unwrap();
        assert_eq!(a.columns, b.columns);
        assert_eq!(a.size_measure, b.size_measure);
    }

    #[test]
    fn continuous_values_stay_in_range() {
        let config = PopulationConfig::synthetic_default(2_000);
        let pop = synth_population(&config, &mut substream(4, "population")).unwrap();
        for (j, spec) in pop.schema.iter().enumerate() {
            if let VariableKind::Continuous { lo, hi } = spec.kind {
                assert!(pop.columns[j].iter().all(|&v| v >= lo && v <= hi));
            }
        }
    }

    #[test]
    fn stored_totals_match_recount() {
        let config = PopulationConfig::synthetic_default(5_000);
        let pop = synth_population(&config, &mut substream(5, "population")).unwrap();
        for (j, totals) in pop.level_totals.iter().enumerate() {
            let Some(totals) = totals else { continue };
            for (c, &stored) in totals.iter().enumerate() {
                let recount = pop.truth(&EstimandKind::Total {
                    variable: j,
                    level: Some(c + 1),
                });
                assert_eq!(stored, recount);
            }
        }
        // Continuous totals as well.
        let recount = pop.truth(&EstimandKind::Total {
            variable: 4,
            level: None,
        });
        assert!((pop.value_totals[4] - recount).abs() < 1e-6 * recount.abs());
    }

    #[test]
    fn small_population_rejected() {
        let config = PopulationConfig::synthetic_default(999);
        assert!(matches!(
            synth_population(&config, &mut substream(1, "population")),
            Err(MdamError::Config(_))
        ));
    }

    #[test]
    fn unit_probability_one_is_census() {
        let mut config = PopulationConfig::synthetic_default(1_000);
        // Tiny size measures push 1/(10z) past 1, which clips to a census.
        config.size_measure.log_mean = -5.0;
        config.size_measure.clip_lo = 1e-4;
        let pop = synth_population(&config, &mut substream(6, "population")).unwrap();
        assert!(pop.inclusion_prob.iter().all(|&pi| pi == 1.0));
        let sample = poisson_sample(&pop, &mut substream(6, "sample"));
        assert_eq!(sample.n_units(), pop.n());
    }

    #[test]
    fn expected_sample_size_matches() {
        let config = PopulationConfig::synthetic_default(2_000);
        let pop = synth_population(&config, &mut substream(7, "population")).unwrap();
        let expected: f64 = pop.inclusion_prob.iter().sum();
        let reps = 5_000;
        let mut total = 0usize;
        let mut sum_sq = 0.0f64;
        for r in 0..reps {
            let n = poisson_sample(&pop, &mut substream(8, &format!("sample/{r}"))).n_units();
            total += n;
            sum_sq += (n as f64 - expected).powi(2);
        }
        let mean = total as f64 / reps as f64;
        let sd = (sum_sq / reps as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!(
            (mean - expected).abs() < 3.0 * se,
            "mean {mean} vs expected {expected} (se {se})"
        );
    }

    #[test]
    fn ht_total_of_size_measure_unbiased() {
        let config = PopulationConfig::synthetic_default(2_000);
        let pop = synth_population(&config, &mut substream(9, "population")).unwrap();
        let truth: f64 = pop.size_measure.iter().sum();
        let reps = 2_000;
        let mut estimates = Vec::with_capacity(reps);
        for r in 0..reps {
            let sample = poisson_sample(&pop, &mut substream(10, &format!("sample/{r}")));
            let estimate: f64 = sample
                .units
                .iter()
                .map(|u| u.weight * u.size_measure.unwrap())
                .sum();
            estimates.push(estimate);
        }
        let mean = estimates.iter().sum::<f64>() / reps as f64;
        let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
            / (reps as f64 - 1.0))
            .sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!(
            (mean - truth).abs() < 3.0 * se,
            "mean {mean} vs truth {truth} (se {se})"
        );
    }

    #[test]
    fn unit_nonresponse_rate_near_target() {
        let config = PopulationConfig::synthetic_default(50_000);
        let pop = synth_population(&config, &mut substream(11, "population")).unwrap();
        let nr = NonresponseConfig::mnar_defaults();
        let mut rates = Vec::new();
        for r in 0..50 {
            let sample = poisson_sample(&pop, &mut substream(12, &format!("s/{r}")));
            let blanked =
                apply_unit_nonresponse(&sample, &nr, &mut substream(12, &format!("u/{r}")));
            let rate = blanked.unit_nonrespondents().count() as f64 / blanked.n_units() as f64;
            rates.push(rate);
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        assert!(
            (0.21..=0.25).contains(&mean),
            "unit nonresponse rate {mean} outside the target band"
        );
    }

    #[test]
    fn extreme_negative_intercept_kills_nonresponse() {
        let config = PopulationConfig::synthetic_default(2_000);
        let pop = synth_population(&config, &mut substream(13, "population")).unwrap();
        let sample = poisson_sample(&pop, &mut substream(13, "sample"));
        let mut nr = NonresponseConfig::mnar_defaults();
        nr.unit_intercept = -50.0;
        nr.unit_coefs = vec![0.0; 6];
        let blanked = apply_unit_nonresponse(&sample, &nr, &mut substream(13, "unit"));
        assert_eq!(blanked.unit_nonrespondents().count(), 0);
    }

    #[test]
    fn realized_rate_matches_analytic_mean() {
        let config = PopulationConfig::synthetic_default(50_000);
        let pop = synth_population(&config, &mut substream(14, "population")).unwrap();
        let sample = poisson_sample(&pop, &mut substream(14, "sample"));
        let nr = NonresponseConfig::mnar_defaults();
        let analytic: f64 = sample
            .units
            .iter()
            .map(|u| {
                let values: Vec<f64> = u.values.iter().map(|v| v.unwrap()).collect();
                inv_logit(nr.unit_logit(&sample.schema, &values))
            })
            .sum::<f64>()
            / sample.n_units() as f64;
        let reps = 200;
        let mut realized = Vec::new();
        for r in 0..reps {
            let blanked =
                apply_unit_nonresponse(&sample, &nr, &mut substream(15, &format!("u/{r}")));
            realized
                .push(blanked.unit_nonrespondents().count() as f64 / blanked.n_units() as f64);
        }
        let mean = realized.iter().sum::<f64>() / reps as f64;
        let sd = (realized.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0))
            .sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!(
            (mean - analytic).abs() < 3.0 * se.max(1e-5),
            "realized {mean} vs analytic {analytic}"
        );
    }

    #[test]
    fn item_nonresponse_off_switch() {
        let config = PopulationConfig::synthetic_default(2_000);
        let pop = synth_population(&config, &mut substream(16, "population")).unwrap();
        let sample = poisson_sample(&pop, &mut substream(16, "sample"));
        let mut nr = NonresponseConfig::mnar_defaults();
        nr.item_intercepts = vec![-50.0; 6];
        let blanked = apply_item_nonresponse(&sample, &nr, &mut substream(16, "item"));
        for unit in &blanked.units {
            assert!(unit.values.iter().all(Option::is_some));
        }
    }

    #[test]
    fn item_missingness_rates_in_band() {
        let config = PopulationConfig::synthetic_default(50_000);
        let pop = synth_population(&config, &mut substream(17, "population")).unwrap();
        let nr = NonresponseConfig::mnar_defaults();
        let mut missing = vec![0usize; 6];
        let mut respondent_cells = 0usize;
        for r in 0..200 {
            let sample = poisson_sample(&pop, &mut substream(18, &format!("s/{r}")));
            let blanked = apply_item_nonresponse(&sample, &nr, &mut substream(18, &format!("i/{r}")));
            for unit in &blanked.units {
                respondent_cells += 1;
                for j in 0..6 {
                    if unit.values[j].is_none() {
                        missing[j] += 1;
                    }
                }
            }
        }
        for (j, count) in missing.iter().enumerate() {
            let rate = *count as f64 / respondent_cells as f64;
            assert!(
                (0.15..=0.30).contains(&rate),
                "variable {j} item missingness {rate} outside [0.15, 0.30]"
            );
        }
    }

    #[test]
    fn item_logit_ignores_own_value() {
        let config = PopulationConfig::synthetic_default(1_000);
        let schema = config.schema();
        let nr = NonresponseConfig::mnar_defaults();
        let mut values = vec![1.0, 2.0, 1.0, 2.0, 30.0, 20.0];
        for j in 0..6 {
            let before = nr.item_logit(&schema, &values, 12.0, j);
            let original = values[j];
            values[j] = match schema[j].kind {
                VariableKind::Categorical { .. } => 3.0 - original,
                VariableKind::Continuous { .. } => original + 17.0,
            };
            let after = nr.item_logit(&schema, &values, 12.0, j);
            values[j] = original;
            assert_eq!(before, after, "R_{j} depends on its own variable");
        }
    }
}
