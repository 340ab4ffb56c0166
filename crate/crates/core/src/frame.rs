//! Data model for samples, completed datasets, and auxiliary margins.
//!
//! A [`SampleFrame`] holds the sampled units with their design weights and
//! nonresponse indicators. Imputation stages work on a [`WorkingDataset`]
//! (cells may still be missing) and finish with a [`CompletedDataset`]
//! (every cell filled, provenance tracked per cell). Known population totals
//! live in [`AuxiliaryMargins`].
//!
//! Frames and completed datasets are immutable once built; imputation stages
//! construct new datasets instead of mutating shared ones.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MdamError, Result};

/// Kind of a survey variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum VariableKind {
    /// Categorical with contiguous integer codes `1..=levels`.
    Categorical { levels: usize },
    /// Continuous with an inclusive range.
    Continuous { lo: f64, hi: f64 },
}

/// Schema entry for one survey variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    /// Whether a known population margin exists for this variable.
    #[serde(default)]
    pub in_margins: bool,
    /// Optional string labels for categorical codes, `labels[c-1]` for code `c`.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

impl VariableSpec {
    pub fn categorical(name: &str, levels: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: VariableKind::Categorical { levels },
            in_margins: false,
            labels: None,
        }
    }

    pub fn continuous(name: &str, lo: f64, hi: f64) -> Self {
        Self {
            name: name.to_string(),
            kind: VariableKind::Continuous { lo, hi },
            in_margins: false,
            labels: None,
        }
    }

    pub fn with_margin(mut self) -> Self {
        self.in_margins = true;
        self
    }

    pub fn levels(&self) -> Option<usize> {
        match self.kind {
            VariableKind::Categorical { levels } => Some(levels),
            VariableKind::Continuous { .. } => None,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, VariableKind::Categorical { .. })
    }
}

/// One sampled unit.
#[derive(Debug, Clone)]
pub struct UnitRecord {
    /// Survey values in schema order; `None` marks a missing cell.
    pub values: Vec<Option<f64>>,
    /// Design weight `w_i = 1/pi_i`.
    pub weight: f64,
    /// Inclusion probability under the sampling design.
    pub inclusion_prob: f64,
    /// Unit nonresponse indicator: the unit answered no survey question.
    pub unit_nonresponse: bool,
    /// Design size measure, when known (retained even for unit nonrespondents).
    pub size_measure: Option<f64>,
}

/// Sampled units plus schema and the population count they were drawn from.
#[derive(Debug, Clone)]
pub struct SampleFrame {
    pub schema: Vec<VariableSpec>,
    pub units: Vec<UnitRecord>,
    pub population_size: f64,
}

/// How item nonresponse reads for one cell.
///
/// `None` when the unit is a unit nonrespondent (indicator undefined).
pub type ItemIndicator = Option<bool>;

impl SampleFrame {
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_vars(&self) -> usize {
        self.schema.len()
    }

    /// Indices of unit respondents (U = 0).
    pub fn respondents(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.units.len()).filter(|&i| !self.units[i].unit_nonresponse)
    }

    /// Indices of unit nonrespondents (U = 1).
    pub fn unit_nonrespondents(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.units.len()).filter(|&i| self.units[i].unit_nonresponse)
    }

    /// Item nonresponse indicator `R_ij`; `None` when `U_i = 1`.
    pub fn item_nonresponse(&self, unit: usize, var: usize) -> ItemIndicator {
        let record = &self.units[unit];
        if record.unit_nonresponse {
            None
        } else {
            Some(record.values[var].is_none())
        }
    }

    /// Schema indices of margined variables, in schema order.
    pub fn margined_vars(&self) -> Vec<usize> {
        self.schema
            .iter()
            .enumerate()
            .filter(|(_, v)| v.in_margins)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|v| v.name == name)
    }

    /// Design weight vector, or the Eq.-style fabricated view where every
    /// unit nonrespondent gets one constant weight so the vector sums to N.
    pub fn ht_weight_view(&self, mode: WeightMode) -> Result<Vec<f64>> {
        match mode {
            WeightMode::Design => Ok(self.units.iter().map(|u| u.weight).collect()),
            WeightMode::Fabricated => {
                let nonrespondents = self.unit_nonrespondents().count();
                if nonrespondents == 0 {
                    return Err(MdamError::NoUnitNonrespondents);
                }
                // Numerator sums design weights over unit respondents only,
                // so the full vector totals N.
                let respondent_sum: f64 = self
                    .respondents()
                    .map(|i| self.units[i].weight)
                    .sum();
                let constant = (self.population_size - respondent_sum) / nonrespondents as f64;
                if constant <= 0.0 {
                    return Err(MdamError::RespondentWeightsExceedPopulation { constant });
                }
                Ok(self
                    .units
                    .iter()
                    .map(|u| if u.unit_nonresponse { constant } else { u.weight })
                    .collect())
            }
        }
    }
}

/// Weight view selector for [`SampleFrame::ht_weight_view`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Design,
    Fabricated,
}

/// Known population totals and analyst variances for one margined variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginEntry {
    /// Schema index of the margined variable.
    pub variable: usize,
    /// Totals `T_jc` for levels `1..=m_j`.
    pub totals: Vec<f64>,
    /// Analyst variances `V_jc`, one per level.
    pub variances: Vec<f64>,
}

/// Auxiliary margins for all margined variables.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AuxiliaryMargins {
    pub entries: Vec<MarginEntry>,
}

impl AuxiliaryMargins {
    pub fn for_variable(&self, var: usize) -> Option<&MarginEntry> {
        self.entries.iter().find(|e| e.variable == var)
    }
}

/// Per-cell provenance in a completed dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Observed,
    ItemImputed,
    UnitImputed,
}

/// Partially completed copy of a sample, column-major.
///
/// Imputation stages fill cells in place; [`WorkingDataset::finalize`]
/// checks no cell is left missing and freezes the result.
#[derive(Debug, Clone)]
pub struct WorkingDataset {
    /// `columns[j][i]` is unit `i`'s value for variable `j`.
    pub columns: Vec<Vec<Option<f64>>>,
    pub provenance: Vec<Vec<Provenance>>,
}

impl WorkingDataset {
    /// Start from the observed cells of a frame.
    pub fn from_frame(frame: &SampleFrame) -> Self {
        let n = frame.n_units();
        let p = frame.n_vars();
        let mut columns = vec![vec![None; n]; p];
        let mut provenance = vec![vec![Provenance::Observed; n]; p];
        for (i, unit) in frame.units.iter().enumerate() {
            for j in 0..p {
                columns[j][i] = unit.values[j];
                if unit.values[j].is_none() {
                    provenance[j][i] = if unit.unit_nonresponse {
                        Provenance::UnitImputed
                    } else {
                        Provenance::ItemImputed
                    };
                }
            }
        }
        Self {
            columns,
            provenance,
        }
    }

    pub fn n_units(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn n_vars(&self) -> usize {
        self.columns.len()
    }

    pub fn value(&self, unit: usize, var: usize) -> Option<f64> {
        self.columns[var][unit]
    }

    pub fn set(&mut self, unit: usize, var: usize, value: f64, provenance: Provenance) {
        self.columns[var][unit] = Some(value);
        self.provenance[var][unit] = provenance;
    }

    /// Categorical code at a filled cell, as `1..=m`.
    pub fn cat(&self, unit: usize, var: usize) -> Option<usize> {
        self.columns[var][unit].map(|v| v as usize)
    }

    /// Freeze into a dense dataset; errors if any cell is still missing.
    pub fn finalize(self, frame: &SampleFrame) -> Result<CompletedDataset> {
        for (j, column) in self.columns.iter().enumerate() {
            if let Some(i) = column.iter().position(Option::is_none) {
                return Err(MdamError::Validation(format!(
                    "cell ({i}, {}) still missing after imputation",
                    frame.schema[j].name
                )));
            }
        }
        let columns = self
            .columns
            .into_iter()
            .map(|col| col.into_iter().map(Option::unwrap).collect())
            .collect();
        Ok(CompletedDataset {
            columns,
            provenance: self.provenance,
        })
    }
}

/// One fully imputed copy of the sample.
#[derive(Debug, Clone)]
pub struct CompletedDataset {
    /// `columns[j][i]`, no missing cells.
    pub columns: Vec<Vec<f64>>,
    pub provenance: Vec<Vec<Provenance>>,
}

impl CompletedDataset {
    pub fn n_units(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn n_vars(&self) -> usize {
        self.columns.len()
    }

    pub fn value(&self, unit: usize, var: usize) -> f64 {
        self.columns[var][unit]
    }

    /// Categorical code as `1..=m`.
    pub fn cat(&self, unit: usize, var: usize) -> usize {
        self.columns[var][unit] as usize
    }
}

/// Outcome of a validation pass; empty means valid.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, message: impl Into<String>) {
        self.violations.push(message.into());
    }

    /// Treat violations as a hard error.
    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(MdamError::Validation(self.violations.join("; ")))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            write!(f, "valid")
        } else {
            write!(f, "{}", self.violations.join("\n"))
        }
    }
}

const WEIGHT_PROB_RTOL: f64 = 1e-12;
const MARGIN_SUM_RTOL: f64 = 1e-9;

/// Check every frame and margin invariant; returns all violations found.
pub fn validate(frame: &SampleFrame, margins: &AuxiliaryMargins) -> ValidationReport {
    let mut report = validate_frame(frame);

    let margined = frame.margined_vars();
    for &j in &margined {
        if margins.for_variable(j).is_none() {
            report.push(format!(
                "margined variable `{}` missing from auxiliary margins",
                frame.schema[j].name
            ));
        }
    }
    for entry in &margins.entries {
        let Some(spec) = frame.schema.get(entry.variable) else {
            report.push(format!("margin references unknown variable {}", entry.variable));
            continue;
        };
        let Some(levels) = spec.levels() else {
            report.push(format!("margin for non-categorical variable `{}`", spec.name));
            continue;
        };
        if entry.totals.len() != levels || entry.variances.len() != levels {
            report.push(format!(
                "margin for `{}` has {} totals / {} variances, expected {}",
                spec.name,
                entry.totals.len(),
                entry.variances.len(),
                levels
            ));
            continue;
        }
        if entry.totals.iter().any(|t| *t < 0.0 || !t.is_finite()) {
            report.push(format!("margin for `{}` has a negative total", spec.name));
        }
        if entry.variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            report.push(format!(
                "margin for `{}` has a non-positive variance",
                spec.name
            ));
        }
        let sum: f64 = entry.totals.iter().sum();
        let n = frame.population_size;
        if (sum - n).abs() > MARGIN_SUM_RTOL * n.max(1.0) {
            report.push(format!(
                "margin sum != N for `{}`: totals sum to {} but N = {}",
                spec.name, sum, n
            ));
        }
    }

    report
}

/// Frame-level invariants only (no margin coverage requirements).
pub fn validate_frame(frame: &SampleFrame) -> ValidationReport {
    let mut report = ValidationReport::default();

    if frame.population_size < frame.n_units() as f64 {
        report.push(format!(
            "population size {} smaller than sample size {}",
            frame.population_size,
            frame.n_units()
        ));
    }

    for (i, unit) in frame.units.iter().enumerate() {
        if unit.values.len() != frame.schema.len() {
            report.push(format!("unit {i}: value arity mismatch"));
            continue;
        }
        if !(unit.weight > 0.0) || !unit.weight.is_finite() {
            report.push(format!("unit {i}: weight {} not positive", unit.weight));
        }
        if !(unit.inclusion_prob > 0.0 && unit.inclusion_prob <= 1.0) {
            report.push(format!(
                "unit {i}: inclusion probability out of range ({})",
                unit.inclusion_prob
            ));
        } else {
            let implied = 1.0 / unit.inclusion_prob;
            if (unit.weight - implied).abs() > WEIGHT_PROB_RTOL * implied.abs() {
                report.push(format!(
                    "unit {i}: weight {} disagrees with 1/pi = {}",
                    unit.weight, implied
                ));
            }
        }
        if unit.unit_nonresponse {
            if unit.values.iter().any(Option::is_some) {
                report.push(format!("unit {i}: unit nonrespondent has observed values"));
            }
            continue;
        }
        for (j, value) in unit.values.iter().enumerate() {
            let Some(v) = value else { continue };
            check_cell_in_support(&frame.schema[j], *v, i, &mut report);
        }
    }

    report
}

/// Check a completed dataset against its source frame: observed cells must
/// be unchanged, every cell in support, provenance consistent with the
/// frame's nonresponse pattern.
pub fn validate_completed(frame: &SampleFrame, dataset: &CompletedDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    if dataset.n_vars() != frame.n_vars() || dataset.n_units() != frame.n_units() {
        report.push("completed dataset dimensions disagree with frame");
        return report;
    }
    for j in 0..frame.n_vars() {
        for (i, unit) in frame.units.iter().enumerate() {
            let value = dataset.value(i, j);
            check_cell_in_support(&frame.schema[j], value, i, &mut report);
            match (unit.values[j], dataset.provenance[j][i]) {
                (Some(observed), provenance) => {
                    if value != observed {
                        report.push(format!(
                            "observed cell ({i}, {}) changed: {} -> {}",
                            frame.schema[j].name, observed, value
                        ));
                    }
                    if provenance != Provenance::Observed {
                        report.push(format!(
                            "observed cell ({i}, {}) not flagged as observed",
                            frame.schema[j].name
                        ));
                    }
                }
                (None, Provenance::Observed) => {
                    report.push(format!(
                        "missing cell ({i}, {}) flagged as observed",
                        frame.schema[j].name
                    ));
                }
                (None, Provenance::UnitImputed) if !unit.unit_nonresponse => {
                    report.push(format!(
                        "item-missing cell ({i}, {}) flagged as unit-imputed",
                        frame.schema[j].name
                    ));
                }
                (None, Provenance::ItemImputed) if unit.unit_nonresponse => {
                    report.push(format!(
                        "unit-missing cell ({i}, {}) flagged as item-imputed",
                        frame.schema[j].name
                    ));
                }
                (None, _) => {}
            }
        }
    }
    report
}

fn check_cell_in_support(spec: &VariableSpec, value: f64, unit: usize, report: &mut ValidationReport) {
    match spec.kind {
        VariableKind::Categorical { levels } => {
            let code = value as usize;
            if value.fract() != 0.0 || code < 1 || code > levels {
                report.push(format!(
                    "unit {unit}: categorical value {} outside 1..={} for `{}`",
                    value, levels, spec.name
                ));
            }
        }
        VariableKind::Continuous { lo, hi } => {
            if !(value >= lo && value <= hi) {
                report.push(format!(
                    "unit {unit}: continuous value {} outside [{}, {}] for `{}`",
                    value, lo, hi, spec.name
                ));
            }
        }
    }
}

/// Ingestion options for [`load_sample`].
#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Known population size N (typically from the margins source).
    pub population_size: f64,
    /// Column holding the design weight.
    pub weight_column: String,
    /// Column holding the unit nonresponse indicator (0/1).
    pub unit_nr_column: String,
    /// Optional column holding a design size measure.
    pub size_column: Option<String>,
}

impl IngestOptions {
    pub fn new(population_size: f64) -> Self {
        Self {
            population_size,
            weight_column: "weight".to_string(),
            unit_nr_column: "unit_nr".to_string(),
            size_column: None,
        }
    }
}

/// Load a sample from CSV: one column per survey variable plus weight and
/// unit nonresponse columns. Empty fields are missing values.
pub fn load_sample(path: &Path, schema: &[VariableSpec], options: &IngestOptions) -> Result<SampleFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_error(0, e.to_string()))?;

    let headers = reader
        .headers()
        .map_err(|e| parse_error(1, e.to_string()))?
        .clone();
    let column_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_error(1, format!("missing column `{name}`")))
    };

    let value_cols: Vec<usize> = schema
        .iter()
        .map(|spec| column_of(&spec.name))
        .collect::<Result<_>>()?;
    let weight_col = column_of(&options.weight_column)?;
    let unit_nr_col = column_of(&options.unit_nr_column)?;
    let size_col = options
        .size_column
        .as_deref()
        .map(column_of)
        .transpose()?;

    let expected_arity = headers.len();
    let mut units = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx as u64 + 2; // header is line 1
        let record = record.map_err(|e| parse_error(line, e.to_string()))?;
        if record.len() != expected_arity {
            return Err(parse_error(
                line,
                format!("expected {expected_arity} fields, found {}", record.len()),
            ));
        }

        let weight: f64 = parse_field(&record[weight_col], line, "weight")?;
        if weight <= 0.0 {
            return Err(MdamError::Validation(format!(
                "line {line}: weight {weight} must be positive"
            )));
        }
        let unit_nr_raw: f64 = parse_field(&record[unit_nr_col], line, "unit_nr")?;
        let unit_nonresponse = match unit_nr_raw as i64 {
            0 => false,
            1 => true,
            _ => {
                return Err(parse_error(
                    line,
                    format!("unit_nr must be 0 or 1, found {unit_nr_raw}"),
                ))
            }
        };
        let size_measure = match size_col {
            Some(col) if !record[col].is_empty() => Some(parse_field(&record[col], line, "size")?),
            _ => None,
        };

        let mut values = Vec::with_capacity(schema.len());
        for (spec, &col) in schema.iter().zip(&value_cols) {
            let field = &record[col];
            if field.is_empty() {
                values.push(None);
                continue;
            }
            if unit_nonresponse {
                return Err(MdamError::Validation(format!(
                    "line {line}: unit nonrespondent has a non-empty value for `{}`",
                    spec.name
                )));
            }
            let value = parse_cell(spec, field, line)?;
            values.push(Some(value));
        }

        units.push(UnitRecord {
            values,
            weight,
            inclusion_prob: 1.0 / weight,
            unit_nonresponse,
            size_measure,
        });
    }

    let frame = SampleFrame {
        schema: schema.to_vec(),
        units,
        population_size: options.population_size,
    };
    validate_frame(&frame).into_result()?;
    Ok(frame)
}

fn parse_cell(spec: &VariableSpec, field: &str, line: u64) -> Result<f64> {
    match spec.kind {
        VariableKind::Categorical { levels } => {
            let code = match field.parse::<i64>() {
                Ok(code) => code,
                Err(_) => match &spec.labels {
                    Some(labels) => {
                        labels
                            .iter()
                            .position(|l| l == field)
                            .map(|idx| idx as i64 + 1)
                            .ok_or_else(|| {
                                parse_error(
                                    line,
                                    format!("unknown label `{field}` for `{}`", spec.name),
                                )
                            })?
                    }
                    None => {
                        return Err(parse_error(
                            line,
                            format!("invalid categorical value `{field}` for `{}`", spec.name),
                        ))
                    }
                },
            };
            if code < 1 || code as usize > levels {
                return Err(MdamError::Validation(format!(
                    "line {line}: categorical value {code} outside 1..={levels} for `{}`",
                    spec.name
                )));
            }
            Ok(code as f64)
        }
        VariableKind::Continuous { lo, hi } => {
            let value: f64 = parse_field(field, line, &spec.name)?;
            if !(value >= lo && value <= hi) {
                return Err(MdamError::Validation(format!(
                    "line {line}: value {value} outside [{lo}, {hi}] for `{}`",
                    spec.name
                )));
            }
            Ok(value)
        }
    }
}

fn parse_field<T: std::str::FromStr>(field: &str, line: u64, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| parse_error(line, format!("invalid {what} value `{field}`")))
}

fn parse_error(line: u64, message: String) -> MdamError {
    MdamError::Parse { line, message }
}

/// Write a frame back to CSV in the same layout [`load_sample`] reads.
pub fn write_sample(frame: &SampleFrame, path: &Path) -> Result<()> {
    write_csv(frame, None, path)
}

/// Write a completed dataset in sample layout (no empty cells).
pub fn write_completed(frame: &SampleFrame, dataset: &CompletedDataset, path: &Path) -> Result<()> {
    write_csv(frame, Some(dataset), path)
}

fn write_csv(frame: &SampleFrame, completed: Option<&CompletedDataset>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let has_size = frame.units.iter().any(|u| u.size_measure.is_some());

    let mut header: Vec<&str> = frame.schema.iter().map(|v| v.name.as_str()).collect();
    header.push("weight");
    header.push("unit_nr");
    if has_size {
        header.push("z");
    }
    writeln!(out, "{}", header.join(","))?;

    for (i, unit) in frame.units.iter().enumerate() {
        let mut fields: Vec<String> = Vec::with_capacity(header.len());
        for j in 0..frame.n_vars() {
            let cell = match completed {
                Some(data) => Some(data.value(i, j)),
                None => unit.values[j],
            };
            fields.push(cell.map_or_else(String::new, |v| format!("{v}")));
        }
        fields.push(format!("{}", unit.weight));
        fields.push(if unit.unit_nonresponse { "1" } else { "0" }.to_string());
        if has_size {
            fields.push(unit.size_measure.map_or_else(String::new, |z| format!("{z}")));
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Load auxiliary margins from CSV with columns `variable,level,total,variance`.
///
/// An empty variance field leaves `f64::NAN`, to be replaced by the module
/// default (a design-based estimate) before use.
pub fn load_margins(path: &Path, schema: &[VariableSpec]) -> Result<AuxiliaryMargins> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_error(0, e.to_string()))?;

    let mut margins = AuxiliaryMargins::default();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx as u64 + 2;
        let record = record.map_err(|e| parse_error(line, e.to_string()))?;
        if record.len() != 4 {
            return Err(parse_error(line, format!("expected 4 fields, found {}", record.len())));
        }
        let name = &record[0];
        let variable = schema
            .iter()
            .position(|v| v.name == *name)
            .ok_or_else(|| parse_error(line, format!("unknown variable `{name}`")))?;
        let levels = schema[variable]
            .levels()
            .ok_or_else(|| parse_error(line, format!("variable `{name}` is not categorical")))?;
        let level: usize = parse_field(&record[1], line, "level")?;
        if level < 1 || level > levels {
            return Err(parse_error(line, format!("level {level} outside 1..={levels}")));
        }
        let total: f64 = parse_field(&record[2], line, "total")?;
        let variance: f64 = if record[3].is_empty() {
            f64::NAN
        } else {
            parse_field(&record[3], line, "variance")?
        };

        let entry = match margins.entries.iter_mut().find(|e| e.variable == variable) {
            Some(entry) => entry,
            None => {
                margins.entries.push(MarginEntry {
                    variable,
                    totals: vec![f64::NAN; levels],
                    variances: vec![f64::NAN; levels],
                });
                margins.entries.last_mut().unwrap()
            }
        };
        entry.totals[level - 1] = total;
        entry.variances[level - 1] = variance;
    }

    for entry in &margins.entries {
        if entry.totals.iter().any(|t| t.is_nan()) {
            return Err(MdamError::Validation(format!(
                "margins for `{}` do not cover every level",
                schema[entry.variable].name
            )));
        }
    }
    Ok(margins)
}
