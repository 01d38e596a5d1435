//! Household survey and comuna covariate ingestion.
//!
//! Household rows are grouped into a roster of comunas, urbanicity strata
//! and PSUs. Every model parameter is laid out in roster order: comunas in
//! order of first appearance, strata within a comuna urban before rural,
//! PSUs within a stratum in order of first appearance.
//!
//! Row numbers in errors count data rows from 1, excluding the header.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::format_float;

/// Column names required in a household file.
pub const HOUSEHOLD_COLUMNS: [&str; 6] = [
    "comuna_id",
    "urbanicity",
    "psu_id",
    "household_id",
    "income",
    "weight",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed csv near row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse {column} value `{value}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("{}negative income {value}", row_prefix(.row))]
    NegativeIncome { row: Option<usize>, value: f64 },
    #[error("{}non-finite {column}", row_prefix(.row))]
    NonFiniteInput { row: Option<usize>, column: String },
    #[error("row {row}: weight must be positive, got {value}")]
    NonPositiveWeight { row: usize, value: f64 },
    #[error("row {row}: urbanicity must be 1 or 2, got `{value}`")]
    UrbanicityOutOfRange { row: usize, value: String },
    #[error("row {row}: household already listed at row {first_row}")]
    DuplicateHousehold { row: usize, first_row: usize },
    #[error("column {column}, comuna {comuna}: proportion {value} outside [0, 1]")]
    PercentOutOfRange {
        column: String,
        comuna: String,
        value: f64,
    },
    #[error("column {column}, comuna {comuna}: wage must be positive, got {value}")]
    NonPositiveWage {
        column: String,
        comuna: String,
        value: f64,
    },
    #[error("column {0} has zero variance across comunas and cannot be standardized")]
    ZeroVarianceColumn(String),
    #[error("no transform given for covariate column `{0}`")]
    MissingTransform(String),
    #[error("unknown covariate transform `{0}` (expected log, arcsin_sqrt or identity)")]
    UnknownTransform(String),
    #[error("comuna {0} listed more than once in the covariate table")]
    DuplicateComuna(String),
    #[error("comuna {0} has survey households but no covariate row")]
    RosterMismatch(String),
    #[error("household table is empty")]
    EmptyTable,
}

fn row_prefix(row: &Option<usize>) -> String {
    match row {
        Some(r) => format!("row {r}: "),
        None => String::new(),
    }
}

impl DataError {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            DataError::Io { .. } => "Io",
            DataError::Csv { .. } => "Csv",
            DataError::MissingColumn(_) => "MissingColumn",
            DataError::Parse { .. } => "Parse",
            DataError::NegativeIncome { .. } => "NegativeIncome",
            DataError::NonFiniteInput { .. } => "NonFiniteInput",
            DataError::NonPositiveWeight { .. } => "NonPositiveWeight",
            DataError::UrbanicityOutOfRange { .. } => "UrbanicityOutOfRange",
            DataError::DuplicateHousehold { .. } => "DuplicateHousehold",
            DataError::PercentOutOfRange { .. } => "PercentOutOfRange",
            DataError::NonPositiveWage { .. } => "NonPositiveWage",
            DataError::ZeroVarianceColumn(_) => "ZeroVarianceColumn",
            DataError::MissingTransform(_) => "MissingTransform",
            DataError::UnknownTransform(_) => "UnknownTransform",
            DataError::DuplicateComuna(_) => "DuplicateComuna",
            DataError::RosterMismatch(_) => "RosterMismatch",
            DataError::EmptyTable => "EmptyTable",
        }
    }
}

/// Urban (code 1) or rural (code 2) classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Urbanicity {
    Urban,
    Rural,
}

impl Urbanicity {
    pub const ALL: [Urbanicity; 2] = [Urbanicity::Urban, Urbanicity::Rural];

    pub fn code(self) -> u8 {
        match self {
            Urbanicity::Urban => 1,
            Urbanicity::Rural => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Urbanicity::Urban),
            2 => Some(Urbanicity::Rural),
            _ => None,
        }
    }

    /// Zero-based position, used to index per-urbanicity arrays.
    pub fn index(self) -> usize {
        self.code() as usize - 1
    }
}

impl fmt::Display for Urbanicity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// `ln(y + 1)`, the income transform the model works on.
pub fn transform_income(y: f64) -> Result<f64, DataError> {
    if !y.is_finite() {
        return Err(DataError::NonFiniteInput {
            row: None,
            column: "income".into(),
        });
    }
    if y < 0.0 {
        return Err(DataError::NegativeIncome {
            row: None,
            value: y,
        });
    }
    Ok(y.ln_1p())
}

/// Inverse of [`transform_income`].
pub fn inverse_transform_income(t: f64) -> f64 {
    t.exp_m1()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdRecord {
    pub comuna_id: String,
    pub urbanicity: Urbanicity,
    pub psu_id: String,
    pub household_id: String,
    pub income: f64,
    pub weight_raw: f64,
    /// `ln(income + 1)`.
    pub t_income: f64,
    /// Raw weight divided by the comuna's raw weight total.
    pub weight_scaled: f64,
}

impl HouseholdRecord {
    /// Builds a record with the transformed income filled in. The scaled
    /// weight stays at zero until the record joins a [`HouseholdTable`].
    pub fn new(
        comuna_id: impl Into<String>,
        urbanicity: Urbanicity,
        psu_id: impl Into<String>,
        household_id: impl Into<String>,
        income: f64,
        weight_raw: f64,
    ) -> Result<Self, DataError> {
        let t_income = transform_income(income)?;
        if !weight_raw.is_finite() {
            return Err(DataError::NonFiniteInput {
                row: None,
                column: "weight".into(),
            });
        }
        if weight_raw <= 0.0 {
            return Err(DataError::NonPositiveWeight {
                row: 0,
                value: weight_raw,
            });
        }
        Ok(HouseholdRecord {
            comuna_id: comuna_id.into(),
            urbanicity,
            psu_id: psu_id.into(),
            household_id: household_id.into(),
            income,
            weight_raw,
            t_income,
            weight_scaled: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comuna {
    pub id: String,
    /// Indices into [`HouseholdTable::strata`], urban first.
    pub strata: Vec<usize>,
}

/// One (comuna, urbanicity) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub comuna: usize,
    pub urbanicity: Urbanicity,
    /// Indices into [`HouseholdTable::psus`].
    pub psus: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Psu {
    pub comuna: usize,
    pub stratum: usize,
    pub id: String,
    /// Indices into [`HouseholdTable::records`].
    pub households: Vec<usize>,
}

/// Validated household records plus the comuna / stratum / PSU roster.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdTable {
    pub records: Vec<HouseholdRecord>,
    pub comunas: Vec<Comuna>,
    pub strata: Vec<Stratum>,
    pub psus: Vec<Psu>,
}

type HouseholdKey<'a> = (&'a str, Urbanicity, &'a str, &'a str);

/// PSU ids with their household row indices, in first-appearance order.
type PsuCells<'a> = Vec<(&'a str, Vec<usize>)>;

impl HouseholdTable {
    /// Indexes the records into a roster and scales the weights.
    pub fn from_records(records: Vec<HouseholdRecord>) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::EmptyTable);
        }
        if let Some(err) = duplicate_households(&records).into_iter().next() {
            return Err(err);
        }
        for (i, r) in records.iter().enumerate() {
            if !(r.weight_raw > 0.0) || !r.weight_raw.is_finite() {
                return Err(DataError::NonPositiveWeight {
                    row: i + 1,
                    value: r.weight_raw,
                });
            }
        }

        // comuna -> urbanicity -> psu -> households, in first-appearance order
        let mut comuna_order: Vec<&str> = Vec::new();
        let mut comuna_pos: HashMap<&str, usize> = HashMap::new();
        let mut cells: Vec<[PsuCells; 2]> = Vec::new();
        for (i, r) in records.iter().enumerate() {
            let c = *comuna_pos.entry(r.comuna_id.as_str()).or_insert_with(|| {
                comuna_order.push(r.comuna_id.as_str());
                cells.push([Vec::new(), Vec::new()]);
                comuna_order.len() - 1
            });
            let psus = &mut cells[c][r.urbanicity.index()];
            match psus.iter_mut().find(|(id, _)| *id == r.psu_id) {
                Some((_, hh)) => hh.push(i),
                None => psus.push((r.psu_id.as_str(), vec![i])),
            }
        }

        let mut comunas = Vec::with_capacity(comuna_order.len());
        let mut strata = Vec::new();
        let mut psus = Vec::new();
        for (c, id) in comuna_order.iter().enumerate() {
            let mut comuna = Comuna {
                id: id.to_string(),
                strata: Vec::new(),
            };
            for u in Urbanicity::ALL {
                let cell = &cells[c][u.index()];
                if cell.is_empty() {
                    continue;
                }
                let s = strata.len();
                let mut stratum = Stratum {
                    comuna: c,
                    urbanicity: u,
                    psus: Vec::with_capacity(cell.len()),
                };
                for (psu_id, households) in cell {
                    stratum.psus.push(psus.len());
                    psus.push(Psu {
                        comuna: c,
                        stratum: s,
                        id: psu_id.to_string(),
                        households: households.clone(),
                    });
                }
                comuna.strata.push(s);
                strata.push(stratum);
            }
            comunas.push(comuna);
        }

        let table = HouseholdTable {
            records,
            comunas,
            strata,
            psus,
        };
        scale_weights(table)
    }

    pub fn n_comunas(&self) -> usize {
        self.comunas.len()
    }

    /// Number of urbanicity strata present in comuna `c` (1 or 2).
    pub fn u_c(&self, c: usize) -> usize {
        self.comunas[c].strata.len()
    }

    /// Number of sampled PSUs in stratum `s`.
    pub fn m_cu(&self, s: usize) -> usize {
        self.strata[s].psus.len()
    }

    /// Number of sampled households in PSU `p`.
    pub fn n_cup(&self, p: usize) -> usize {
        self.psus[p].households.len()
    }

    pub fn comuna_index(&self, id: &str) -> Option<usize> {
        self.comunas.iter().position(|c| c.id == id)
    }

    /// Scaled weight mass of each PSU; within a comuna these sum to 1.
    pub fn psu_weight_masses(&self) -> Vec<f64> {
        self.psus
            .iter()
            .map(|p| {
                p.households
                    .iter()
                    .map(|&h| self.records[h].weight_scaled)
                    .sum()
            })
            .collect()
    }

    /// Records belonging to comuna `c`, in file order.
    pub fn comuna_records(&self, c: usize) -> impl Iterator<Item = &HouseholdRecord> {
        let id = self.comunas[c].id.as_str();
        self.records.iter().filter(move |r| r.comuna_id == id)
    }
}

fn duplicate_households(records: &[HouseholdRecord]) -> Vec<DataError> {
    let mut seen: HashMap<HouseholdKey<'_>, usize> = HashMap::new();
    let mut errors = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let key = (
            r.comuna_id.as_str(),
            r.urbanicity,
            r.psu_id.as_str(),
            r.household_id.as_str(),
        );
        if let Some(&first) = seen.get(&key) {
            errors.push(DataError::DuplicateHousehold {
                row: i + 1,
                first_row: first + 1,
            });
        } else {
            seen.insert(key, i);
        }
    }
    errors
}

/// Recomputes `weight_scaled = weight_raw / (comuna total of weight_raw)`.
pub fn scale_weights(mut table: HouseholdTable) -> Result<HouseholdTable, DataError> {
    let mut totals: HashMap<&str, f64> = HashMap::new();
    for (i, r) in table.records.iter().enumerate() {
        if !(r.weight_raw > 0.0) || !r.weight_raw.is_finite() {
            return Err(DataError::NonPositiveWeight {
                row: i + 1,
                value: r.weight_raw,
            });
        }
        *totals.entry(r.comuna_id.as_str()).or_insert(0.0) += r.weight_raw;
    }
    let totals: HashMap<String, f64> = totals
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    for r in &mut table.records {
        r.weight_scaled = r.weight_raw / totals[&r.comuna_id];
    }
    Ok(table)
}

/// Reads and validates a household file, failing on the first problem.
pub fn load_households(path: impl AsRef<Path>) -> Result<HouseholdTable, DataError> {
    let file = open(path.as_ref())?;
    read_households(file)
}

pub fn read_households<R: Read>(reader: R) -> Result<HouseholdTable, DataError> {
    let (records, errors) = parse_households(reader);
    if let Some(err) = errors.into_iter().next() {
        return Err(err);
    }
    HouseholdTable::from_records(records)
}

/// Validates a household file and returns every problem found.
pub fn check_households(path: impl AsRef<Path>) -> Vec<DataError> {
    match open(path.as_ref()) {
        Ok(file) => {
            let (records, mut errors) = parse_households(file);
            errors.extend(duplicate_households(&records));
            if errors.is_empty() && records.is_empty() {
                errors.push(DataError::EmptyTable);
            }
            errors
        }
        Err(e) => vec![e],
    }
}

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn column_positions(
    headers: &csv::StringRecord,
    wanted: &[&str],
) -> Result<Vec<usize>, Vec<DataError>> {
    let mut positions = Vec::with_capacity(wanted.len());
    let mut missing = Vec::new();
    for name in wanted {
        match headers.iter().position(|h| h.trim() == *name) {
            Some(p) => positions.push(p),
            None => missing.push(DataError::MissingColumn(name.to_string())),
        }
    }
    if missing.is_empty() {
        Ok(positions)
    } else {
        Err(missing)
    }
}

fn parse_f64(row: usize, column: &str, raw: &str) -> Result<f64, DataError> {
    raw.trim().parse::<f64>().map_err(|_| DataError::Parse {
        row,
        column: column.into(),
        value: raw.into(),
    })
}

/// Parses every row, collecting all row-level errors. Rows with errors are
/// dropped from the returned records.
fn parse_households<R: Read>(reader: R) -> (Vec<HouseholdRecord>, Vec<DataError>) {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => {
            return (
                Vec::new(),
                vec![DataError::Csv {
                    row: 0,
                    message: e.to_string(),
                }],
            )
        }
    };
    let cols = match column_positions(&headers, &HOUSEHOLD_COLUMNS) {
        Ok(c) => c,
        Err(errors) => return (Vec::new(), errors),
    };

    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = match result {
            Ok(r) => r,
            Err(e) => {
                errors.push(DataError::Csv {
                    row,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match parse_household_row(row, &rec, &cols) {
            Ok(r) => records.push(r),
            Err(e) => errors.push(e),
        }
    }
    (records, errors)
}

fn parse_household_row(
    row: usize,
    rec: &csv::StringRecord,
    cols: &[usize],
) -> Result<HouseholdRecord, DataError> {
    let field = |k: usize| rec.get(cols[k]).unwrap_or("");
    let urbanicity = field(1)
        .parse::<u8>()
        .ok()
        .and_then(Urbanicity::from_code)
        .ok_or_else(|| DataError::UrbanicityOutOfRange {
            row,
            value: field(1).to_string(),
        })?;
    let income = parse_f64(row, "income", field(4))?;
    let weight = parse_f64(row, "weight", field(5))?;
    if !weight.is_finite() {
        return Err(DataError::NonFiniteInput {
            row: Some(row),
            column: "weight".into(),
        });
    }
    if weight <= 0.0 {
        return Err(DataError::NonPositiveWeight { row, value: weight });
    }
    HouseholdRecord::new(field(0), urbanicity, field(2), field(3), income, weight).map_err(|e| {
        match e {
            DataError::NegativeIncome { value, .. } => DataError::NegativeIncome {
                row: Some(row),
                value,
            },
            DataError::NonFiniteInput { column, .. } => DataError::NonFiniteInput {
                row: Some(row),
                column,
            },
            other => other,
        }
    })
}

/// Writes records in the household file schema. Floats carry 17
/// significant digits so a reload reproduces every bit.
pub fn write_households<W: Write>(table: &HouseholdTable, writer: W) -> Result<(), DataError> {
    write_household_records(&table.records, writer)
}

pub fn write_household_records<W: Write>(
    records: &[HouseholdRecord],
    writer: W,
) -> Result<(), DataError> {
    let csv_err = |e: csv::Error| DataError::Csv {
        row: 0,
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HOUSEHOLD_COLUMNS).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.comuna_id.as_str(),
            &r.urbanicity.to_string(),
            r.psu_id.as_str(),
            r.household_id.as_str(),
            &format_float(r.income),
            &format_float(r.weight_raw),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| DataError::Io {
        path: "<writer>".into(),
        message: e.to_string(),
    })
}

/// Per-column covariate transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateTransform {
    /// `ln(v)`, for strictly positive amounts such as wages.
    Log,
    /// `asin(sqrt(v))`, for proportions in [0, 1].
    ArcsinSqrt,
    Identity,
}

impl CovariateTransform {
    pub fn apply(self, column: &str, comuna: &str, v: f64) -> Result<f64, DataError> {
        if !v.is_finite() {
            return Err(DataError::NonFiniteInput {
                row: None,
                column: column.into(),
            });
        }
        match self {
            CovariateTransform::Log => {
                if v <= 0.0 {
                    return Err(DataError::NonPositiveWage {
                        column: column.into(),
                        comuna: comuna.into(),
                        value: v,
                    });
                }
                Ok(v.ln())
            }
            CovariateTransform::ArcsinSqrt => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(DataError::PercentOutOfRange {
                        column: column.into(),
                        comuna: comuna.into(),
                        value: v,
                    });
                }
                Ok(v.sqrt().asin())
            }
            CovariateTransform::Identity => Ok(v),
        }
    }
}

impl FromStr for CovariateTransform {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "log" => Ok(CovariateTransform::Log),
            "arcsin_sqrt" => Ok(CovariateTransform::ArcsinSqrt),
            "identity" => Ok(CovariateTransform::Identity),
            other => Err(DataError::UnknownTransform(other.into())),
        }
    }
}

impl fmt::Display for CovariateTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovariateTransform::Log => "log",
            CovariateTransform::ArcsinSqrt => "arcsin_sqrt",
            CovariateTransform::Identity => "identity",
        })
    }
}

/// Comuna covariates as read from file, before any transform.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCovariates {
    pub names: Vec<String>,
    pub comunas: Vec<String>,
    /// One row per comuna, one entry per name.
    pub values: Vec<Vec<f64>>,
}

pub fn load_raw_covariates(path: impl AsRef<Path>) -> Result<RawCovariates, DataError> {
    read_raw_covariates(open(path.as_ref())?)
}

pub fn read_raw_covariates<R: Read>(reader: R) -> Result<RawCovariates, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Csv {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let id_col = headers
        .iter()
        .position(|h| h == "comuna_id")
        .ok_or_else(|| DataError::MissingColumn("comuna_id".into()))?;
    let value_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != id_col).collect();
    let names = value_cols.iter().map(|&i| headers[i].to_string()).collect();

    let mut seen = HashSet::new();
    let mut comunas = Vec::new();
    let mut values = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = result.map_err(|e| DataError::Csv {
            row,
            message: e.to_string(),
        })?;
        let id = rec.get(id_col).unwrap_or("").to_string();
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateComuna(id));
        }
        let row_values = value_cols
            .iter()
            .map(|&j| parse_f64(row, &headers[j], rec.get(j).unwrap_or("")))
            .collect::<Result<Vec<_>, _>>()?;
        comunas.push(id);
        values.push(row_values);
    }
    Ok(RawCovariates {
        names,
        comunas,
        values,
    })
}

/// Writes covariates with a leading `comuna_id` column.
pub fn write_raw_covariates<W: Write>(raw: &RawCovariates, writer: W) -> Result<(), DataError> {
    let csv_err = |e: csv::Error| DataError::Csv {
        row: 0,
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["comuna_id".to_string()];
    header.extend(raw.names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (id, row) in raw.comunas.iter().zip(&raw.values) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| format_float(*v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| DataError::Io {
        path: "<writer>".into(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateRow {
    pub comuna_id: String,
    /// Leading 1 followed by the transformed, standardized covariates.
    pub x: Vec<f64>,
    /// Untransformed values, same order as [`CovariateTable::names`].
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub transforms: Vec<CovariateTransform>,
    pub rows: Vec<CovariateRow>,
    /// Mean of each transformed column before standardization.
    pub centers: Vec<f64>,
    /// Sample SD of each transformed column before standardization.
    pub scales: Vec<f64>,
}

impl CovariateTable {
    /// Length of `x`, intercept included.
    pub fn p(&self) -> usize {
        self.names.len() + 1
    }

    pub fn row(&self, comuna_id: &str) -> Option<&CovariateRow> {
        self.rows.iter().find(|r| r.comuna_id == comuna_id)
    }
}

/// Applies the per-column transforms, z-scores each transformed column
/// across comunas (sample SD, n - 1) and prepends the intercept.
pub fn transform_covariates(
    raw: &RawCovariates,
    chosen: &BTreeMap<String, CovariateTransform>,
) -> Result<CovariateTable, DataError> {
    let transforms = raw
        .names
        .iter()
        .map(|n| {
            chosen
                .get(n)
                .copied()
                .ok_or_else(|| DataError::MissingTransform(n.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(extra) = chosen.keys().find(|k| !raw.names.contains(k)) {
        return Err(DataError::MissingColumn(extra.clone()));
    }

    let n = raw.comunas.len();
    let p = raw.names.len();
    let mut columns = vec![Vec::with_capacity(n); p];
    for (comuna, row) in raw.comunas.iter().zip(&raw.values) {
        for j in 0..p {
            columns[j].push(transforms[j].apply(&raw.names[j], comuna, row[j])?);
        }
    }

    let mut centers = Vec::with_capacity(p);
    let mut scales = Vec::with_capacity(p);
    for (j, col) in columns.iter_mut().enumerate() {
        let (mean, sd) = mean_sd(col);
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(DataError::ZeroVarianceColumn(raw.names[j].clone()));
        }
        for v in col.iter_mut() {
            *v = (*v - mean) / sd;
        }
        centers.push(mean);
        scales.push(sd);
    }

    let rows = raw
        .comunas
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut x = Vec::with_capacity(p + 1);
            x.push(1.0);
            x.extend(columns.iter().map(|col| col[i]));
            CovariateRow {
                comuna_id: id.clone(),
                x,
                raw: raw.values[i].clone(),
            }
        })
        .collect();

    Ok(CovariateTable {
        names: raw.names.clone(),
        transforms,
        rows,
        centers,
        scales,
    })
}

/// Mean and sample SD; SD is NaN for fewer than two values.
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Survey data joined with the covariate row of each sampled comuna, plus
/// the per-PSU sufficient statistics the sampler needs.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub households: HouseholdTable,
    /// `x_c` for each roster comuna, aligned with `households.comunas`.
    pub design: Vec<Vec<f64>>,
    /// Sum of `t_income` per PSU.
    pub psu_sums: Vec<f64>,
}

impl ModelData {
    pub fn new(households: HouseholdTable, covariates: &CovariateTable) -> Result<Self, DataError> {
        let mut design = Vec::with_capacity(households.n_comunas());
        for c in &households.comunas {
            match covariates.row(&c.id) {
                Some(row) => design.push(row.x.clone()),
                None => return Err(DataError::RosterMismatch(c.id.clone())),
            }
        }
        Ok(Self::with_design(households, design))
    }

    /// Builds from an explicit per-comuna design; rows must align with the
    /// household roster and share one length.
    pub fn with_design(households: HouseholdTable, design: Vec<Vec<f64>>) -> Self {
        assert_eq!(
            design.len(),
            households.n_comunas(),
            "design rows != comunas"
        );
        let p = design.first().map_or(0, Vec::len);
        assert!(
            p > 0 && design.iter().all(|x| x.len() == p),
            "ragged design"
        );
        let psu_sums = households
            .psus
            .iter()
            .map(|psu| {
                psu.households
                    .iter()
                    .map(|&h| households.records[h].t_income)
                    .sum()
            })
            .collect();
        ModelData {
            households,
            design,
            psu_sums,
        }
    }

    /// Number of regression coefficients per urbanicity.
    pub fn p(&self) -> usize {
        self.design[0].len()
    }

    pub fn n_psus(&self) -> usize {
        self.households.psus.len()
    }

    pub fn n_strata(&self) -> usize {
        self.households.strata.len()
    }
}

/// Comunas of the household table that have no covariate row.
pub fn roster_mismatches(
    households: &HouseholdTable,
    covariates: &CovariateTable,
) -> Vec<DataError> {
    households
        .comunas
        .iter()
        .filter(|c| covariates.row(&c.id).is_none())
        .map(|c| DataError::RosterMismatch(c.id.clone()))
        .collect()
}
