//! Cohort and pair files.
//!
//! A cohort CSV has one row per unit: an id column, a treatment flag, the
//! outcome and any number of covariates. A pair file links treated and
//! control units of a cohort into matched pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CovariateKind, CovariateSpec, MatchedPair, MatchedPairSet, ObservationRecord, OutcomeKind, Schema};

/// A declared covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Level labels, in code order, for categorical columns. Levels seen
    /// in the data but not listed here are rejected.
    #[serde(default)]
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Binary,
    Numeric,
    Categorical,
}

/// How to read a cohort file. Unset fields are inferred from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormatConfig {
    pub id_column: String,
    pub treatment_column: String,
    pub outcome_column: String,
    pub delimiter: char,
    pub outcome: Option<OutcomeKind>,
    /// Covariate columns to keep; all remaining columns when absent.
    pub covariates: Option<Vec<ColumnSpec>>,
}

impl Default for FormatConfig {
    fn default() -> Self {
        FormatConfig {
            id_column: "id".into(),
            treatment_column: "z".into(),
            outcome_column: "y".into(),
            delimiter: ',',
            outcome: None,
            covariates: None,
        }
    }
}

impl FormatConfig {
    /// A config that reads back exactly the given schema.
    pub fn for_schema(schema: &Schema) -> Self {
        FormatConfig {
            outcome: Some(schema.outcome),
            covariates: Some(
                schema
                    .covariates
                    .iter()
                    .map(|c| match &c.kind {
                        CovariateKind::Binary => ColumnSpec {
                            name: c.name.clone(),
                            kind: ColumnKind::Binary,
                            levels: Vec::new(),
                        },
                        CovariateKind::Numeric => ColumnSpec {
                            name: c.name.clone(),
                            kind: ColumnKind::Numeric,
                            levels: Vec::new(),
                        },
                        CovariateKind::Categorical { levels } => ColumnSpec {
                            name: c.name.clone(),
                            kind: ColumnKind::Categorical,
                            levels: levels.clone(),
                        },
                    })
                    .collect(),
            ),
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Unit-level data before matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTable {
    pub schema: Schema,
    pub rows: Vec<ObservationRecord>,
}

impl CohortTable {
    pub fn new(schema: Schema, rows: Vec<ObservationRecord>) -> Result<Self> {
        let t = CohortTable { schema, rows };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.rows {
            if !seen.insert(r.unit_id.as_str()) {
                return Err(Error::Data(format!("duplicate unit id '{}'", r.unit_id)));
            }
            if r.covariates.len() != self.schema.covariates.len() {
                return Err(Error::Schema(format!("unit '{}' has the wrong number of covariates", r.unit_id)));
            }
        }
        if !self.rows.iter().any(|r| r.treated) || !self.rows.iter().any(|r| !r.treated) {
            return Err(Error::Data("the cohort needs at least one treated and one control unit".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn unit(&self, id: &str) -> Option<&ObservationRecord> {
        self.rows.iter().find(|r| r.unit_id == id)
    }

    fn index(&self) -> HashMap<&str, usize> {
        self.rows.iter().enumerate().map(|(i, r)| (r.unit_id.as_str(), i)).collect()
    }
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "t" | "true" | "treated" => Some(true),
        "0" | "c" | "false" | "control" => Some(false),
        _ => None,
    }
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn is_binary_value(v: f64) -> bool {
    v == 0.0 || v == 1.0
}

pub fn load_cohort(path: &Path, config: &FormatConfig) -> Result<CohortTable> {
    read_cohort(std::fs::File::open(path)?, config)
}

/// Reads a cohort CSV. Line numbers in errors count the header as line 1.
pub fn read_cohort<R: Read>(reader: R, config: &FormatConfig) -> Result<CohortTable> {
    if !config.delimiter.is_ascii() {
        return Err(Error::Config("delimiter must be a single ASCII character".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(config.delimiter as u8)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };
    let id_col = position(&config.id_column)?;
    let z_col = position(&config.treatment_column)?;
    let y_col = position(&config.outcome_column)?;
    {
        let mut names = BTreeSet::new();
        if let Some(dup) = header.iter().find(|h| !names.insert(h.as_str())) {
            return Err(Error::Schema(format!("column '{dup}' appears twice")));
        }
    }
    let declared: Vec<(usize, Option<ColumnSpec>)> = match &config.covariates {
        Some(specs) => specs.iter().map(|s| Ok((position(&s.name)?, Some(s.clone())))).collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|i| ![id_col, z_col, y_col].contains(i))
            .map(|i| (i, None))
            .collect(),
    };

    struct Raw {
        line: usize,
        id: String,
        treated: bool,
        outcome: f64,
        cells: Vec<String>,
    }
    let mut raw = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |message: String| Error::MalformedRow { line, message };
        if record.len() != header.len() {
            return Err(bad(format!("expected {} fields, found {}", header.len(), record.len())));
        }
        let id = record[id_col].trim().to_string();
        if id.is_empty() {
            return Err(bad("missing unit id".into()));
        }
        let z = record[z_col].trim();
        if z.is_empty() {
            return Err(bad("missing treatment flag".into()));
        }
        let treated = parse_flag(z).ok_or_else(|| bad(format!("unrecognised treatment flag '{z}'")))?;
        let y = record[y_col].trim();
        if y.is_empty() {
            return Err(bad("missing outcome".into()));
        }
        let outcome = parse_number(y).ok_or_else(|| bad(format!("outcome '{y}' is not a finite number")))?;
        raw.push(Raw {
            line,
            id,
            treated,
            outcome,
            cells: declared.iter().map(|(c, _)| record[*c].trim().to_string()).collect(),
        });
    }

    let outcome_kind = config.outcome.unwrap_or_else(|| {
        if !raw.is_empty() && raw.iter().all(|r| is_binary_value(r.outcome)) {
            OutcomeKind::Binary
        } else {
            OutcomeKind::Continuous
        }
    });
    if outcome_kind == OutcomeKind::Binary {
        if let Some(r) = raw.iter().find(|r| !is_binary_value(r.outcome)) {
            return Err(Error::Schema(format!(
                "line {}: outcome {} mixes with binary outcomes",
                r.line, r.outcome
            )));
        }
    }

    let mut covariates = Vec::with_capacity(declared.len());
    let mut codes: Vec<Vec<f64>> = Vec::with_capacity(declared.len());
    for (j, (col, spec)) in declared.iter().enumerate() {
        let name = header[*col].clone();
        let cells: Vec<&str> = raw.iter().map(|r| r.cells[j].as_str()).collect();
        let kind = match spec {
            Some(s) => s.kind,
            None => infer_kind(&cells),
        };
        let (cov, values) = match kind {
            ColumnKind::Binary | ColumnKind::Numeric => {
                let mut values = Vec::with_capacity(cells.len());
                for (r, cell) in raw.iter().zip(&cells) {
                    let v = parse_number(cell).ok_or_else(|| Error::MalformedRow {
                        line: r.line,
                        message: format!("covariate '{name}' value '{cell}' is not a finite number"),
                    })?;
                    if kind == ColumnKind::Binary && !is_binary_value(v) {
                        return Err(Error::MalformedRow {
                            line: r.line,
                            message: format!("binary covariate '{name}' has value {v}"),
                        });
                    }
                    values.push(v);
                }
                let kind = if kind == ColumnKind::Binary {
                    CovariateKind::Binary
                } else {
                    CovariateKind::Numeric
                };
                (CovariateSpec { name, kind }, values)
            }
            ColumnKind::Categorical => {
                let levels: Vec<String> = match spec {
                    Some(s) if !s.levels.is_empty() => s.levels.clone(),
                    _ => cells.iter().map(|c| c.to_string()).collect::<BTreeSet<_>>().into_iter().collect(),
                };
                let lookup: HashMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
                let mut values = Vec::with_capacity(cells.len());
                for (r, cell) in raw.iter().zip(&cells) {
                    let code = lookup.get(cell).ok_or_else(|| Error::MalformedRow {
                        line: r.line,
                        message: format!("level '{cell}' of '{name}' is not declared"),
                    })?;
                    values.push(*code as f64);
                }
                (
                    CovariateSpec {
                        name,
                        kind: CovariateKind::Categorical { levels },
                    },
                    values,
                )
            }
        };
        covariates.push(cov);
        codes.push(values);
    }

    let rows = raw
        .into_iter()
        .enumerate()
        .map(|(i, r)| ObservationRecord {
            unit_id: r.id,
            treated: r.treated,
            outcome: r.outcome,
            covariates: codes.iter().map(|c| c[i]).collect(),
        })
        .collect();
    CohortTable::new(
        Schema {
            covariates,
            outcome: outcome_kind,
        },
        rows,
    )
}

fn infer_kind(cells: &[&str]) -> ColumnKind {
    let numbers: Option<Vec<f64>> = cells.iter().map(|c| parse_number(c)).collect();
    match numbers {
        Some(v) if !v.is_empty() && v.iter().all(|x| is_binary_value(*x)) => ColumnKind::Binary,
        Some(_) if !cells.is_empty() => ColumnKind::Numeric,
        _ => ColumnKind::Categorical,
    }
}

fn label(schema: &Schema, j: usize, v: f64) -> String {
    match &schema.covariates[j].kind {
        CovariateKind::Categorical { levels } => levels[v as usize].clone(),
        _ => v.to_string(),
    }
}

/// Writes a cohort with the default column names.
pub fn write_cohort<W: Write>(table: &CohortTable, writer: W) -> Result<()> {
    let defaults = FormatConfig::default();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![defaults.id_column, defaults.treatment_column, defaults.outcome_column];
    header.extend(table.schema.covariates.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for r in &table.rows {
        let mut row = vec![r.unit_id.clone(), (r.treated as u8).to_string(), r.outcome.to_string()];
        row.extend(r.covariates.iter().enumerate().map(|(j, v)| label(&table.schema, j, *v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_cohort(table: &CohortTable, path: &Path) -> Result<()> {
    write_cohort(table, std::fs::File::create(path)?)
}

/// Unit-level view of a pair set.
pub fn cohort_from_pairs(pairs: &MatchedPairSet) -> Result<CohortTable> {
    let rows = pairs
        .pairs
        .iter()
        .flat_map(|p| [p.treated.clone(), p.control.clone()])
        .collect();
    CohortTable::new(pairs.schema.clone(), rows)
}

#[derive(Debug, Deserialize, Serialize)]
struct PairRow {
    pair_id: String,
    role: String,
    unit_id: String,
}

/// Reads a pair file with columns `pair_id,role,unit_id`, role T or C.
pub fn read_pairs<R: Read>(reader: R, cohort: &CohortTable) -> Result<MatchedPairSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    for need in ["pair_id", "role", "unit_id"] {
        if !header.iter().any(|h| h == need) {
            return Err(Error::Schema(format!("pair file lacks column '{need}'")));
        }
    }
    let index = cohort.index();
    let mut members: BTreeMap<String, (Option<usize>, Option<usize>)> = BTreeMap::new();
    let mut used = BTreeSet::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |message: String| Error::MalformedRow { line, message };
        let row: PairRow = record.deserialize(Some(&csv::StringRecord::from(header.clone()))).map_err(|e| bad(e.to_string()))?;
        if row.pair_id.is_empty() {
            return Err(bad("missing pair id".into()));
        }
        let &unit = index
            .get(row.unit_id.as_str())
            .ok_or_else(|| bad(format!("unit '{}' is not in the cohort", row.unit_id)))?;
        if !used.insert(unit) {
            return Err(bad(format!("unit '{}' appears in more than one pair", row.unit_id)));
        }
        let treated = match row.role.to_ascii_uppercase().as_str() {
            "T" => true,
            "C" => false,
            other => return Err(bad(format!("role '{other}' must be T or C"))),
        };
        if cohort.rows[unit].treated != treated {
            return Err(bad(format!("unit '{}' has role {} but the opposite treatment flag", row.unit_id, row.role)));
        }
        let slot = members.entry(row.pair_id.clone()).or_default();
        let target = if treated { &mut slot.0 } else { &mut slot.1 };
        if target.replace(unit).is_some() {
            return Err(bad(format!("pair '{}' has two {} members", row.pair_id, row.role)));
        }
    }
    let mut pairs = Vec::with_capacity(members.len());
    for (pair_id, (t, c)) in members {
        match (t, c) {
            (Some(t), Some(c)) => pairs.push(MatchedPair {
                pair_id,
                treated: cohort.rows[t].clone(),
                control: cohort.rows[c].clone(),
            }),
            _ => return Err(Error::Data(format!("pair '{pair_id}' lacks a treated or control member"))),
        }
    }
    MatchedPairSet::new(cohort.schema.clone(), pairs)
}

pub fn load_pairs(path: &Path, cohort: &CohortTable) -> Result<MatchedPairSet> {
    read_pairs(std::fs::File::open(path)?, cohort)
}

pub fn write_pairs<W: Write>(pairs: &MatchedPairSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in &pairs.pairs {
        for (role, unit) in [("T", &p.treated), ("C", &p.control)] {
            w.serialize(PairRow {
                pair_id: p.pair_id.clone(),
                role: role.into(),
                unit_id: unit.unit_id.clone(),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_pairs(pairs: &MatchedPairSet, path: &Path) -> Result<()> {
    write_pairs(pairs, std::fs::File::create(path)?)
}
