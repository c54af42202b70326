//! Schema'd categorical survey data with explicit missingness structure.
//!
//! Every record is one of three kinds:
//!
//! * a **respondent** row (`unit = Some(false)`): item indicators are known,
//!   and a variable's indicator is 1 exactly when its value is absent;
//! * a **unit nonrespondent** row (`unit = Some(true)`): no values beyond
//!   variables declared always-observed, and all item indicators unknown;
//! * a **synthetic** row (`unit = None`): exactly one variable observed,
//!   appended by [`crate::augment`] to encode an auxiliary margin.
//!
//! Datasets are immutable after load; the sampler works on its own completed
//! copies.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel for an absent value in the compact per-record level storage.
pub const MISSING: u8 = u8::MAX;

/// Index of a variable within a [`VariableSchema`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub usize);

/// Role of a survey variable relative to the auxiliary database.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarRole {
    /// Variable with an auxiliary population margin (an "X" variable).
    /// A matching margin must be supplied at fit time.
    X,
    /// Variable without an auxiliary margin (a "Y" variable).
    Y,
}

/// A categorical survey variable: name, ordered level labels (reference
/// level first), margin role and modeling flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoricalVariable {
    pub name: String,
    pub levels: Vec<String>,
    pub role: VarRole,
    #[serde(default)]
    pub ordinal: bool,
    /// Present on every real record, including unit nonrespondent rows
    /// (e.g. state of residence known from the sampling frame).
    #[serde(default)]
    pub always_observed: bool,
}

impl CategoricalVariable {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_index(&self, label: &str) -> Option<u8> {
        self.levels.iter().position(|l| l == label).map(|i| i as u8)
    }
}

/// Ordered collection of survey variables.
#[derive(Debug, Clone)]
pub struct VariableSchema {
    vars: Vec<CategoricalVariable>,
    by_name: HashMap<String, usize>,
}

impl VariableSchema {
    pub fn new(vars: Vec<CategoricalVariable>) -> Result<Self> {
        if vars.is_empty() {
            return Err(Error::validation("schema has no variables"));
        }
        let mut by_name = HashMap::new();
        for (i, v) in vars.iter().enumerate() {
            if v.levels.len() < 2 {
                return Err(Error::validation(format!(
                    "variable '{}' needs at least 2 levels",
                    v.name
                )));
            }
            if v.levels.len() >= usize::from(MISSING) {
                return Err(Error::validation(format!(
                    "variable '{}' has too many levels",
                    v.name
                )));
            }
            let mut seen = vars[i].levels.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != v.levels.len() {
                return Err(Error::validation(format!(
                    "variable '{}' has duplicate level labels",
                    v.name
                )));
            }
            if by_name.insert(v.name.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate variable '{}'", v.name)));
            }
        }
        Ok(VariableSchema { vars, by_name })
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var(&self, id: VarId) -> &CategoricalVariable {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> impl Iterator<Item = (VarId, &CategoricalVariable)> {
        self.vars.iter().enumerate().map(|(i, v)| (VarId(i), v))
    }

    pub fn lookup(&self, name: &str) -> Option<VarId> {
        self.by_name.get(name).copied().map(VarId)
    }

    pub fn require(&self, name: &str) -> Result<VarId> {
        self.lookup(name)
            .ok_or_else(|| Error::validation(format!("unknown variable '{name}'")))
    }

    /// Number of cells in the joint contingency table over all variables.
    pub fn joint_cells(&self) -> usize {
        self.vars.iter().map(|v| v.n_levels()).product()
    }

    /// Mixed-radix index of a fully observed value vector, first variable
    /// slowest.
    pub fn cell_index(&self, values: &[u8]) -> usize {
        debug_assert_eq!(values.len(), self.vars.len());
        let mut ix = 0usize;
        for (v, &val) in self.vars.iter().zip(values) {
            debug_assert!(val != MISSING && (val as usize) < v.n_levels());
            ix = ix * v.n_levels() + val as usize;
        }
        ix
    }

    /// Inverse of [`Self::cell_index`].
    pub fn cell_values(&self, mut ix: usize) -> Vec<u8> {
        let mut out = vec![0u8; self.vars.len()];
        for (k, v) in self.vars.iter().enumerate().rev() {
            out[k] = (ix % v.n_levels()) as u8;
            ix /= v.n_levels();
        }
        out
    }

    /// Human-readable label for a joint cell, e.g. `state=FL,vote=1`.
    pub fn cell_label(&self, ix: usize) -> String {
        let vals = self.cell_values(ix);
        let mut s = String::new();
        for (k, v) in self.vars.iter().enumerate() {
            if k > 0 {
                s.push(';');
            }
            let _ = write!(s, "{}={}", v.name, v.levels[vals[k] as usize]);
        }
        s
    }
}

/// Provenance of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

/// Item nonresponse indicator state for one variable of one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Indicator {
    /// `Known(true)` means the item is missing (R = 1).
    Known(bool),
    /// Indicator itself unobserved (unit nonrespondents, synthetic rows).
    Unknown,
}

/// One survey record. Values are level indices with [`MISSING`] for absent.
///
/// Invariants are enforced by the constructors: item indicators are fully
/// determined by (values, unit, origin), so they are derived rather than
/// stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurveyRecord {
    values: Vec<u8>,
    /// `Some(true)` unit nonrespondent, `Some(false)` respondent,
    /// `None` unknown (synthetic rows).
    unit: Option<bool>,
    origin: Origin,
}

impl SurveyRecord {
    pub fn respondent(values: Vec<u8>) -> Self {
        SurveyRecord {
            values,
            unit: Some(false),
            origin: Origin::Real,
        }
    }

    pub fn unit_nonrespondent(values: Vec<u8>) -> Self {
        SurveyRecord {
            values,
            unit: Some(true),
            origin: Origin::Real,
        }
    }

    pub fn synthetic(values: Vec<u8>) -> Self {
        SurveyRecord {
            values,
            unit: None,
            origin: Origin::Synthetic,
        }
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn value(&self, var: VarId) -> Option<u8> {
        let v = self.values[var.0];
        (v != MISSING).then_some(v)
    }

    pub fn is_observed(&self, var: VarId) -> bool {
        self.values[var.0] != MISSING
    }

    /// `Some(true)` = unit nonrespondent; `None` = unknown (synthetic).
    pub fn unit(&self) -> Option<bool> {
        self.unit
    }

    pub fn is_respondent(&self) -> bool {
        self.unit == Some(false)
    }

    pub fn is_unit_row(&self) -> bool {
        self.unit == Some(true)
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    /// Item indicator for `var`: known only on respondent rows.
    pub fn item_indicator(&self, var: VarId) -> Indicator {
        match (self.origin, self.unit) {
            (Origin::Real, Some(false)) => Indicator::Known(self.values[var.0] == MISSING),
            _ => Indicator::Unknown,
        }
    }

    fn validate(&self, schema: &VariableSchema) -> Result<()> {
        if self.values.len() != schema.len() {
            return Err(Error::data("record width does not match schema"));
        }
        for (k, v) in schema.vars() {
            let val = self.values[k.0];
            if val != MISSING && val as usize >= v.n_levels() {
                return Err(Error::data(format!(
                    "level index {} out of range for variable '{}'",
                    val, v.name
                )));
            }
        }
        match (self.origin, self.unit) {
            (Origin::Real, Some(true)) => {
                for (k, v) in schema.vars() {
                    if !v.always_observed && self.values[k.0] != MISSING {
                        return Err(Error::data(format!(
                            "unit nonrespondent row has a value for '{}'",
                            v.name
                        )));
                    }
                }
            }
            (Origin::Real, Some(false)) => {}
            (Origin::Real, None) => {
                return Err(Error::data("real record with unknown unit status"));
            }
            (Origin::Synthetic, None) => {
                // Exactly the margin variable observed; an always-observed
                // stratifier may ride along (stratified margins), like the
                // stratum kept on unit nonrespondent rows.
                let observed = schema
                    .vars()
                    .filter(|(k, v)| !v.always_observed && self.values[k.0] != MISSING)
                    .count();
                if observed != 1 {
                    return Err(Error::data(
                        "synthetic record must observe exactly one variable beyond always-observed strata",
                    ));
                }
            }
            (Origin::Synthetic, Some(_)) => {
                return Err(Error::data("synthetic record with known unit status"));
            }
        }
        Ok(())
    }
}

/// An auxiliary population margin for one survey variable.
///
/// Margins published per stratum of an always-observed variable (state-level
/// turnout, state-level age distributions) can carry the per-stratum rows in
/// `stratum_probabilities`; the synthetic block is then built stratum by
/// stratum so the fitted model calibrates within each stratum. The pooled
/// `probabilities` still drive the identification budget and standard-error
/// sizing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxiliaryMargin {
    pub variable: String,
    /// Probabilities over the variable's levels, in schema level order.
    pub probabilities: Vec<f64>,
    /// Margin treated as exact (negligible standard error).
    #[serde(default = "default_true")]
    pub treated_as_exact: bool,
    /// Synthetic block size as a multiple of the respondent count.
    #[serde(default = "default_multiplier")]
    pub effective_multiplier: f64,
    /// Always-observed variable whose levels index `stratum_probabilities`.
    #[serde(default)]
    pub stratify_by: Option<String>,
    /// One probability row per stratum level; empty unless stratified.
    #[serde(default)]
    pub stratum_probabilities: Vec<Vec<f64>>,
}

fn default_true() -> bool {
    true
}

fn default_multiplier() -> f64 {
    3.0
}

impl AuxiliaryMargin {
    pub fn new(variable: impl Into<String>, probabilities: Vec<f64>) -> Result<Self> {
        let m = AuxiliaryMargin {
            variable: variable.into(),
            probabilities,
            treated_as_exact: true,
            effective_multiplier: 3.0,
            stratify_by: None,
            stratum_probabilities: Vec::new(),
        };
        m.validate_probs()?;
        Ok(m)
    }

    /// Stratified margin: per-stratum probability rows plus the pooled
    /// vector (weights = stratum person shares, supplied by the caller).
    pub fn stratified(
        variable: impl Into<String>,
        pooled: Vec<f64>,
        stratify_by: impl Into<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut m = AuxiliaryMargin::new(variable, pooled)?;
        m.stratify_by = Some(stratify_by.into());
        m.stratum_probabilities = rows;
        Ok(m)
    }

    pub fn validate_probs(&self) -> Result<()> {
        let check = |probs: &[f64], what: &str| -> Result<()> {
            if probs.iter().any(|&p| p < 0.0) {
                return Err(Error::validation(format!(
                    "{what} for '{}' has a negative probability",
                    self.variable
                )));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::validation(format!(
                    "{what} for '{}' sums to {sum}, not 1",
                    self.variable
                )));
            }
            Ok(())
        };
        check(&self.probabilities, "margin")?;
        for row in &self.stratum_probabilities {
            check(row, "stratum margin")?;
        }
        if self.stratify_by.is_none() && !self.stratum_probabilities.is_empty() {
            return Err(Error::validation(format!(
                "margin for '{}' has stratum rows but no stratify_by variable",
                self.variable
            )));
        }
        Ok(())
    }

    pub fn validate_against(&self, schema: &VariableSchema) -> Result<VarId> {
        let id = schema.require(&self.variable)?;
        if self.probabilities.len() != schema.var(id).n_levels() {
            return Err(Error::validation(format!(
                "margin for '{}' has {} probabilities but the variable has {} levels",
                self.variable,
                self.probabilities.len(),
                schema.var(id).n_levels()
            )));
        }
        if let Some(strat) = &self.stratify_by {
            let sid = schema.require(strat)?;
            if sid == id {
                return Err(Error::validation(format!(
                    "margin for '{}' cannot stratify by itself",
                    self.variable
                )));
            }
            if !schema.var(sid).always_observed {
                return Err(Error::validation(format!(
                    "margin stratifier '{strat}' must be declared always_observed"
                )));
            }
            if self.stratum_probabilities.len() != schema.var(sid).n_levels() {
                return Err(Error::validation(format!(
                    "margin for '{}' needs one probability row per '{strat}' level",
                    self.variable
                )));
            }
            for row in &self.stratum_probabilities {
                if row.len() != schema.var(id).n_levels() {
                    return Err(Error::validation(format!(
                        "stratum margin row for '{}' has the wrong length",
                        self.variable
                    )));
                }
            }
        }
        self.validate_probs()?;
        Ok(id)
    }
}

/// Immutable dataset: a schema plus records.
#[derive(Debug, Clone)]
pub struct SurveyDataset {
    schema: Arc<VariableSchema>,
    records: Vec<SurveyRecord>,
}

impl SurveyDataset {
    pub fn new(schema: Arc<VariableSchema>, records: Vec<SurveyRecord>) -> Result<Self> {
        for r in &records {
            r.validate(&schema)?;
        }
        Ok(SurveyDataset { schema, records })
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn schema_arc(&self) -> Arc<VariableSchema> {
        Arc::clone(&self.schema)
    }

    pub fn records(&self) -> &[SurveyRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Real respondent rows (the `n` used for synthetic block sizing).
    pub fn n_respondents(&self) -> usize {
        self.records.iter().filter(|r| r.is_respondent()).count()
    }

    pub fn n_unit_rows(&self) -> usize {
        self.records.iter().filter(|r| r.is_unit_row()).count()
    }

    pub fn n_synthetic(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.origin() == Origin::Synthetic)
            .count()
    }

    /// Dataset with the same schema and records extended by `extra`.
    pub fn with_appended(&self, extra: Vec<SurveyRecord>) -> Result<Self> {
        let mut records = self.records.clone();
        records.extend(extra);
        SurveyDataset::new(Arc::clone(&self.schema), records)
    }

    /// Real records only, dropping any synthetic blocks.
    pub fn without_synthetic(&self) -> Self {
        SurveyDataset {
            schema: Arc::clone(&self.schema),
            records: self
                .records
                .iter()
                .filter(|r| r.origin() == Origin::Real)
                .cloned()
                .collect(),
        }
    }
}

/// Conjunction of `variable = level` restrictions over survey variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predicate {
    pub clauses: Vec<(VarId, u8)>,
}

impl Predicate {
    pub fn all() -> Self {
        Predicate::default()
    }

    pub fn and(mut self, var: VarId, level: u8) -> Self {
        self.clauses.push((var, level));
        self
    }

    /// Parse `"state=FL & sex=F"` (also accepts `,` as the connective).
    /// An empty string means "all records".
    pub fn parse(s: &str, schema: &VariableSchema) -> Result<Self> {
        let mut p = Predicate::default();
        let s = s.trim();
        if s.is_empty() {
            return Ok(p);
        }
        for clause in s.split(['&', ',']) {
            let clause = clause.trim();
            let (name, level) = clause
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("bad predicate clause '{clause}'")))?;
            let var = schema.require(name.trim())?;
            let lev = schema
                .var(var)
                .level_index(level.trim())
                .ok_or_else(|| {
                    Error::validation(format!(
                        "unknown level '{}' for variable '{}'",
                        level.trim(),
                        name.trim()
                    ))
                })?;
            p.clauses.push((var, lev));
        }
        Ok(p)
    }

    pub fn matches_values(&self, values: &[u8]) -> bool {
        self.clauses.iter().all(|&(v, l)| values[v.0] == l)
    }

    pub fn label(&self, schema: &VariableSchema) -> String {
        if self.clauses.is_empty() {
            return "all".to_string();
        }
        let mut s = String::new();
        for (i, &(v, l)) in self.clauses.iter().enumerate() {
            if i > 0 {
                s.push_str(" & ");
            }
            let var = schema.var(v);
            let _ = write!(s, "{}={}", var.name, var.levels[l as usize]);
        }
        s
    }
}

/// Parse `"vote=1"` into a (variable, level) target.
pub fn parse_target(s: &str, schema: &VariableSchema) -> Result<(VarId, u8)> {
    let (name, level) = s
        .split_once('=')
        .ok_or_else(|| Error::validation(format!("bad target '{s}', expected var=level")))?;
    let var = schema.require(name.trim())?;
    let lev = schema
        .var(var)
        .level_index(level.trim())
        .ok_or_else(|| Error::validation(format!("unknown level '{}' in target", level.trim())))?;
    Ok((var, lev))
}

// ---------------------------------------------------------------------------
// Loading and writing
// ---------------------------------------------------------------------------

/// How unit nonrespondents enter the dataset.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnitRowRule {
    /// No unit nonrespondents in the file.
    #[default]
    None,
    /// A 0/1 column flags unit rows.
    Column(String),
    /// Append `count` all-missing unit rows per stratum level of an
    /// always-observed variable.
    StratumCounts {
        variable: String,
        counts: Vec<(String, i64)>,
    },
}

/// Options for [`load_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadOptions {
    #[serde(default = "default_missing_code")]
    pub missing_code: String,
    #[serde(default = "default_delim")]
    pub delimiter: char,
    #[serde(default)]
    pub unit_rule: UnitRowRule,
    /// Reclassify respondent rows missing every non-always-observed item as
    /// unit nonrespondents.
    #[serde(default)]
    pub all_items_missing_is_unit: bool,
}

fn default_missing_code() -> String {
    "NA".to_string()
}

fn default_delim() -> char {
    ','
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            missing_code: default_missing_code(),
            delimiter: default_delim(),
            unit_rule: UnitRowRule::None,
            all_items_missing_is_unit: false,
        }
    }
}

/// Load a delimiter-separated text file with a header row naming the schema
/// variables. Optional `R_<var>` columns carry explicit item indicators and
/// must agree with value presence; a unit flag column or per-stratum counts
/// introduce unit nonrespondent rows.
pub fn load_dataset(
    path: impl AsRef<Path>,
    schema: Arc<VariableSchema>,
    opts: &LoadOptions,
) -> Result<SurveyDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(path.display().to_string(), e))?,
        None => return Err(Error::data(format!("{}: empty file", path.display()))),
    };
    let cols: Vec<String> = split_row(&header, opts.delimiter);

    let mut var_col: Vec<Option<usize>> = vec![None; schema.len()];
    let mut ind_col: Vec<Option<usize>> = vec![None; schema.len()];
    let mut unit_col: Option<usize> = None;
    let unit_col_name = match &opts.unit_rule {
        UnitRowRule::Column(c) => Some(c.as_str()),
        _ => None,
    };
    for (ci, c) in cols.iter().enumerate() {
        if Some(c.as_str()) == unit_col_name {
            unit_col = Some(ci);
        } else if let Some(id) = schema.lookup(c) {
            var_col[id.0] = Some(ci);
        } else if let Some(base) = c.strip_prefix("R_") {
            if let Some(id) = schema.lookup(base) {
                ind_col[id.0] = Some(ci);
            }
        }
        // Unrecognized columns are ignored.
    }
    for (k, v) in schema.vars() {
        if var_col[k.0].is_none() {
            return Err(Error::data(format!(
                "{}: header lacks a column for variable '{}'",
                path.display(),
                v.name
            )));
        }
    }
    if unit_col_name.is_some() && unit_col.is_none() {
        return Err(Error::data(format!(
            "{}: unit flag column '{}' not found",
            path.display(),
            unit_col_name.unwrap()
        )));
    }

    let mut records = Vec::new();
    for (line_no, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_row(&line, opts.delimiter);
        if fields.len() != cols.len() {
            return Err(Error::data(format!(
                "{}:{}: expected {} fields, found {}",
                path.display(),
                line_no + 2,
                cols.len(),
                fields.len()
            )));
        }
        let at = |ci: usize| fields[ci].trim();

        let is_unit = match unit_col {
            Some(ci) => match at(ci) {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::data(format!(
                        "{}:{}: unit flag must be 0 or 1, found '{other}'",
                        path.display(),
                        line_no + 2
                    )))
                }
            },
            None => false,
        };

        let mut values = vec![MISSING; schema.len()];
        for (k, v) in schema.vars() {
            let raw = at(var_col[k.0].unwrap());
            if raw == opts.missing_code || raw.is_empty() {
                continue;
            }
            values[k.0] = v.level_index(raw).ok_or_else(|| {
                Error::data(format!(
                    "{}:{}: unknown level '{raw}' for variable '{}'",
                    path.display(),
                    line_no + 2,
                    v.name
                ))
            })?;
        }

        // Explicit indicator columns must agree with value presence.
        if !is_unit {
            for (k, v) in schema.vars() {
                if let Some(ci) = ind_col[k.0] {
                    let raw = at(ci);
                    if raw == opts.missing_code || raw.is_empty() {
                        continue;
                    }
                    let flag = match raw {
                        "0" => false,
                        "1" => true,
                        other => {
                            return Err(Error::data(format!(
                                "{}:{}: indicator for '{}' must be 0 or 1, found '{other}'",
                                path.display(),
                                line_no + 2,
                                v.name
                            )))
                        }
                    };
                    let absent = values[k.0] == MISSING;
                    if flag != absent {
                        return Err(Error::data(format!(
                            "{}:{}: value for '{}' is {} but its indicator says {}",
                            path.display(),
                            line_no + 2,
                            v.name,
                            if absent { "absent" } else { "present" },
                            if flag { "missing" } else { "observed" },
                        )));
                    }
                }
            }
        }

        let rec = if is_unit {
            for (k, v) in schema.vars() {
                if !v.always_observed && values[k.0] != MISSING {
                    return Err(Error::data(format!(
                        "{}:{}: unit row carries a value for '{}'",
                        path.display(),
                        line_no + 2,
                        v.name
                    )));
                }
            }
            SurveyRecord::unit_nonrespondent(values)
        } else {
            let all_items_missing = schema
                .vars()
                .all(|(k, v)| v.always_observed || values[k.0] == MISSING);
            if opts.all_items_missing_is_unit && all_items_missing {
                for (k, v) in schema.vars() {
                    if !v.always_observed {
                        values[k.0] = MISSING;
                    }
                }
                SurveyRecord::unit_nonrespondent(values)
            } else {
                SurveyRecord::respondent(values)
            }
        };
        records.push(rec);
    }

    if let UnitRowRule::StratumCounts { variable, counts } = &opts.unit_rule {
        let var = schema.require(variable)?;
        if !schema.var(var).always_observed {
            return Err(Error::validation(format!(
                "stratum variable '{variable}' must be declared always_observed"
            )));
        }
        for (label, count) in counts {
            if *count < 0 {
                return Err(Error::data(format!(
                    "negative unit count {count} for stratum '{label}'"
                )));
            }
            let lev = schema.var(var).level_index(label).ok_or_else(|| {
                Error::data(format!("unknown stratum level '{label}' for '{variable}'"))
            })?;
            for _ in 0..*count {
                let mut values = vec![MISSING; schema.len()];
                values[var.0] = lev;
                records.push(SurveyRecord::unit_nonrespondent(values));
            }
        }
    }

    SurveyDataset::new(schema, records)
}

fn split_row(line: &str, delim: char) -> Vec<String> {
    line.trim_end_matches(['\r', '\n'])
        .split(delim)
        .map(|s| s.to_string())
        .collect()
}

/// Write real records in the same delimiter-separated format used by
/// [`load_dataset`]: one column per schema variable plus a `U` unit flag
/// column. Synthetic rows are not written.
pub fn write_dataset(d: &SurveyDataset, path: impl AsRef<Path>, missing_code: &str) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let schema = d.schema();
    let mut header: Vec<&str> = schema.vars().map(|(_, v)| v.name.as_str()).collect();
    header.push("U");
    writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in d.records() {
        if r.origin() == Origin::Synthetic {
            continue;
        }
        let mut fields: Vec<String> = Vec::with_capacity(schema.len() + 1);
        for (k, v) in schema.vars() {
            match r.value(k) {
                Some(lev) => fields.push(v.levels[lev as usize].clone()),
                None => fields.push(missing_code.to_string()),
            }
        }
        fields.push(if r.is_unit_row() { "1" } else { "0" }.to_string());
        writeln!(w, "{}", fields.join(","))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Descriptive statistics
// ---------------------------------------------------------------------------

/// One row of a nonresponse rate table.
#[derive(Debug, Clone)]
pub struct RateRow {
    pub group: String,
    pub total_rows: usize,
    pub unit_rows: usize,
    pub unit_rate: f64,
    /// Per variable; `None` when there are no respondent rows in the group.
    pub item_rates: Vec<Option<f64>>,
}

/// Unit and item nonresponse rates, optionally by an always-observed
/// grouping variable. Unit rate = unit rows / total rows; item rate =
/// missing among respondent rows / respondent rows.
pub fn nonresponse_rates(d: &SurveyDataset, by: Option<VarId>) -> Result<Vec<RateRow>> {
    let schema = d.schema();
    let groups: Vec<(String, Option<u8>)> = match by {
        None => vec![("all".to_string(), None)],
        Some(v) => schema
            .var(v)
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), Some(i as u8)))
            .collect(),
    };
    if let Some(v) = by {
        for r in d.records() {
            if r.origin() == Origin::Real && !r.is_observed(v) {
                return Err(Error::data(format!(
                    "grouping variable '{}' has missing values",
                    schema.var(v).name
                )));
            }
        }
    }

    let mut out = Vec::new();
    for (label, level) in groups {
        let in_group = |r: &SurveyRecord| match (by, level) {
            (Some(v), Some(l)) => r.value(v) == Some(l),
            _ => true,
        };
        let rows: Vec<&SurveyRecord> = d
            .records()
            .iter()
            .filter(|r| r.origin() == Origin::Real && in_group(r))
            .collect();
        let total = rows.len();
        let units = rows.iter().filter(|r| r.is_unit_row()).count();
        let respondents = total - units;
        let mut item_rates = Vec::with_capacity(schema.len());
        for (k, _) in schema.vars() {
            if respondents == 0 {
                item_rates.push(None);
            } else {
                let miss = rows
                    .iter()
                    .filter(|r| r.is_respondent() && !r.is_observed(k))
                    .count();
                item_rates.push(Some(miss as f64 / respondents as f64));
            }
        }
        out.push(RateRow {
            group: label,
            total_rows: total,
            unit_rows: units,
            unit_rate: if total == 0 {
                0.0
            } else {
                units as f64 / total as f64
            },
            item_rates,
        });
    }
    Ok(out)
}

/// Proportion of `target` among fully observed respondents satisfying
/// `subgroup` (complete cases).
pub fn complete_case_estimate(
    d: &SurveyDataset,
    target: (VarId, u8),
    subgroup: &Predicate,
) -> Result<f64> {
    let mut den = 0usize;
    let mut num = 0usize;
    for r in d.records() {
        if !r.is_respondent() {
            continue;
        }
        if r.values().iter().any(|&v| v == MISSING) {
            continue;
        }
        if !subgroup.matches_values(r.values()) {
            continue;
        }
        den += 1;
        if r.values()[target.0 .0] == target.1 {
            num += 1;
        }
    }
    if den == 0 {
        return Err(Error::data("empty complete-case subgroup"));
    }
    Ok(num as f64 / den as f64)
}

/// Joint contingency table over all survey variables among fully observed
/// respondents.
#[derive(Debug, Clone)]
pub struct ObservedCellTable {
    pub counts: Vec<u64>,
    pub proportions: Vec<f64>,
    pub total: u64,
}

pub fn observed_cell_table(d: &SurveyDataset) -> Result<ObservedCellTable> {
    let schema = d.schema();
    let mut counts = vec![0u64; schema.joint_cells()];
    let mut total = 0u64;
    for r in d.records() {
        if !r.is_respondent() || r.values().iter().any(|&v| v == MISSING) {
            continue;
        }
        counts[schema.cell_index(r.values())] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::data("no fully observed respondent rows"));
    }
    let proportions = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(ObservedCellTable {
        counts,
        proportions,
        total,
    })
}

// ---------------------------------------------------------------------------
// Missingness pattern summary
// ---------------------------------------------------------------------------

/// Per-variable observability facts used by the identification counter and
/// ordering diagnostics. Computed on real records only.
#[derive(Debug, Clone)]
pub struct VarMissingness {
    pub observed_on_respondents: usize,
    pub missing_on_respondents: usize,
    /// Observed on every unit nonrespondent row (vacuously true when there
    /// are none).
    pub observed_on_unit_rows: bool,
}

#[derive(Debug, Clone)]
pub struct MissingnessSummary {
    pub per_var: Vec<VarMissingness>,
    pub n_respondents: usize,
    pub n_unit_rows: usize,
    pub complete_cases: usize,
}

impl MissingnessSummary {
    pub fn from_dataset(d: &SurveyDataset) -> Self {
        let schema = d.schema();
        let mut per_var: Vec<VarMissingness> = (0..schema.len())
            .map(|_| VarMissingness {
                observed_on_respondents: 0,
                missing_on_respondents: 0,
                observed_on_unit_rows: true,
            })
            .collect();
        let mut n_respondents = 0;
        let mut n_unit_rows = 0;
        let mut complete_cases = 0;
        for r in d.records() {
            match (r.origin(), r.unit()) {
                (Origin::Real, Some(false)) => {
                    n_respondents += 1;
                    let mut complete = true;
                    for k in 0..schema.len() {
                        if r.values()[k] == MISSING {
                            per_var[k].missing_on_respondents += 1;
                            complete = false;
                        } else {
                            per_var[k].observed_on_respondents += 1;
                        }
                    }
                    if complete {
                        complete_cases += 1;
                    }
                }
                (Origin::Real, Some(true)) => {
                    n_unit_rows += 1;
                    for k in 0..schema.len() {
                        if r.values()[k] == MISSING {
                            per_var[k].observed_on_unit_rows = false;
                        }
                    }
                }
                _ => {}
            }
        }
        MissingnessSummary {
            per_var,
            n_respondents,
            n_unit_rows,
            complete_cases,
        }
    }

    /// Summary from schema flags alone (no data): only `always_observed`
    /// variables count as observed on unit rows, every other variable is
    /// assumed to have missing values somewhere.
    pub fn worst_case(schema: &VariableSchema) -> Self {
        MissingnessSummary {
            per_var: schema
                .vars()
                .map(|(_, v)| VarMissingness {
                    observed_on_respondents: 1,
                    missing_on_respondents: usize::from(!v.always_observed),
                    observed_on_unit_rows: v.always_observed,
                })
                .collect(),
            n_respondents: 1,
            n_unit_rows: 1,
            complete_cases: 1,
        }
    }

    /// A variable observed on every real row, unit nonrespondents included.
    pub fn always_observed(&self, var: VarId) -> bool {
        let v = &self.per_var[var.0];
        v.missing_on_respondents == 0 && (self.n_unit_rows == 0 || v.observed_on_unit_rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_binary_schema() -> Arc<VariableSchema> {
        Arc::new(
            VariableSchema::new(vec![
                CategoricalVariable {
                    name: "x1".into(),
                    levels: vec!["0".into(), "1".into()],
                    role: VarRole::X,
                    ordinal: false,
                    always_observed: false,
                },
                CategoricalVariable {
                    name: "x2".into(),
                    levels: vec!["0".into(), "1".into()],
                    role: VarRole::X,
                    ordinal: false,
                    always_observed: false,
                },
            ])
            .unwrap(),
        )
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_basic_and_rates() {
        let schema = two_binary_schema();
        let f = write_tmp("x1,x2\n0,1\n1,NA\nNA,0\n1,1\n");
        let d = load_dataset(f.path(), schema, &LoadOptions::default()).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.n_respondents(), 4);
        let rates = nonresponse_rates(&d, None).unwrap();
        assert_eq!(rates[0].unit_rate, 0.0);
        assert_eq!(rates[0].item_rates[0], Some(0.25));
        assert_eq!(rates[0].item_rates[1], Some(0.25));
    }

    #[test]
    fn load_no_missing_codes() {
        let schema = two_binary_schema();
        let f = write_tmp("x1,x2\n0,1\n1,0\n");
        let d = load_dataset(f.path(), schema, &LoadOptions::default()).unwrap();
        assert!(d.records().iter().all(|r| r.is_respondent()));
        assert!(d
            .records()
            .iter()
            .all(|r| r.values().iter().all(|&v| v != MISSING)));
    }

    #[test]
    fn indicator_column_conflict_is_an_error() {
        let schema = two_binary_schema();
        let f = write_tmp("x1,x2,R_x2\n0,1,1\n");
        let err = load_dataset(f.path(), schema, &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("indicator"));
    }

    #[test]
    fn unknown_level_is_an_error() {
        let schema = two_binary_schema();
        let f = write_tmp("x1,x2\n0,2\n");
        let err = load_dataset(f.path(), schema, &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("unknown level"));
    }

    #[test]
    fn stratum_counts_append_unit_rows() {
        let schema = Arc::new(
            VariableSchema::new(vec![
                CategoricalVariable {
                    name: "state".into(),
                    levels: vec!["FL".into(), "GA".into()],
                    role: VarRole::Y,
                    ordinal: false,
                    always_observed: true,
                },
                CategoricalVariable {
                    name: "vote".into(),
                    levels: vec!["0".into(), "1".into()],
                    role: VarRole::X,
                    ordinal: false,
                    always_observed: false,
                },
            ])
            .unwrap(),
        );
        let f = write_tmp("state,vote\nFL,1\nFL,0\nGA,1\n");
        let opts = LoadOptions {
            unit_rule: UnitRowRule::StratumCounts {
                variable: "state".into(),
                counts: vec![("FL".into(), 2), ("GA".into(), 1)],
            },
            ..LoadOptions::default()
        };
        let d = load_dataset(f.path(), schema.clone(), &opts).unwrap();
        assert_eq!(d.n_respondents(), 3);
        assert_eq!(d.n_unit_rows(), 3);
        let st = schema.lookup("state").unwrap();
        let rates = nonresponse_rates(&d, Some(st)).unwrap();
        assert_eq!(rates[0].unit_rate, 0.5);
        // Unit rows keep the always-observed stratum value.
        assert!(d
            .records()
            .iter()
            .filter(|r| r.is_unit_row())
            .all(|r| r.is_observed(st)));
    }

    #[test]
    fn negative_unit_count_is_an_error() {
        let schema = two_binary_schema();
        let f = write_tmp("x1,x2\n0,1\n");
        let opts = LoadOptions {
            unit_rule: UnitRowRule::StratumCounts {
                variable: "x1".into(),
                counts: vec![("0".into(), -1)],
            },
            ..LoadOptions::default()
        };
        // x1 is not always-observed, so this fails either way; use a schema
        // where it is.
        let err = load_dataset(f.path(), schema, &opts).unwrap_err();
        assert!(err.to_string().contains("always_observed") || err.to_string().contains("negative"));
    }

    #[test]
    fn unit_value_conflict_is_an_error() {
        let schema = two_binary_schema();
        let f = write_tmp("x1,x2,U\n0,1,0\n1,NA,1\n");
        let opts = LoadOptions {
            unit_rule: UnitRowRule::Column("U".into()),
            ..LoadOptions::default()
        };
        let err = load_dataset(f.path(), schema, &opts).unwrap_err();
        assert!(err.to_string().contains("unit row"));
    }

    #[test]
    fn all_items_missing_reclassified_as_unit() {
        let schema = two_binary_schema();
        let f = write_tmp("x1,x2\n0,1\nNA,NA\n");
        let opts = LoadOptions {
            all_items_missing_is_unit: true,
            ..LoadOptions::default()
        };
        let d = load_dataset(f.path(), schema, &opts).unwrap();
        assert_eq!(d.n_respondents(), 1);
        assert_eq!(d.n_unit_rows(), 1);
    }

    #[test]
    fn rates_with_only_unit_rows_flags_items_undefined() {
        let schema = two_binary_schema();
        let recs = vec![
            SurveyRecord::unit_nonrespondent(vec![MISSING, MISSING]),
            SurveyRecord::unit_nonrespondent(vec![MISSING, MISSING]),
        ];
        let d = SurveyDataset::new(schema, recs).unwrap();
        let rates = nonresponse_rates(&d, None).unwrap();
        assert_eq!(rates[0].unit_rate, 1.0);
        assert!(rates[0].item_rates.iter().all(|r| r.is_none()));
    }

    #[test]
    fn complete_case_everyone_voted() {
        let schema = two_binary_schema();
        let recs = vec![
            SurveyRecord::respondent(vec![1, 0]),
            SurveyRecord::respondent(vec![1, 1]),
            SurveyRecord::respondent(vec![1, MISSING]),
        ];
        let d = SurveyDataset::new(schema.clone(), recs).unwrap();
        let x1 = schema.lookup("x1").unwrap();
        let est = complete_case_estimate(&d, (x1, 1), &Predicate::all()).unwrap();
        assert_eq!(est, 1.0);
    }

    #[test]
    fn cell_table_two_binary_has_four_cells() {
        let schema = two_binary_schema();
        let recs = vec![
            SurveyRecord::respondent(vec![0, 0]),
            SurveyRecord::respondent(vec![0, 1]),
            SurveyRecord::respondent(vec![1, 1]),
            SurveyRecord::respondent(vec![1, 1]),
        ];
        let d = SurveyDataset::new(schema, recs).unwrap();
        let t = observed_cell_table(&d).unwrap();
        assert_eq!(t.counts.len(), 4);
        assert_eq!(t.total, 4);
        assert!((t.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t.counts[3], 2);
    }

    #[test]
    fn cell_table_requires_a_complete_case() {
        let schema = two_binary_schema();
        let recs = vec![SurveyRecord::respondent(vec![0, MISSING])];
        let d = SurveyDataset::new(schema, recs).unwrap();
        assert!(observed_cell_table(&d).is_err());
    }

    #[test]
    fn partition_units_item_missing_complete() {
        let schema = two_binary_schema();
        let recs = vec![
            SurveyRecord::respondent(vec![0, 0]),
            SurveyRecord::respondent(vec![MISSING, 0]),
            SurveyRecord::unit_nonrespondent(vec![MISSING, MISSING]),
        ];
        let d = SurveyDataset::new(schema, recs).unwrap();
        let units = d.n_unit_rows();
        let complete = d
            .records()
            .iter()
            .filter(|r| r.is_respondent() && r.values().iter().all(|&v| v != MISSING))
            .count();
        let item_missing = d
            .records()
            .iter()
            .filter(|r| r.is_respondent() && r.values().iter().any(|&v| v == MISSING))
            .count();
        assert_eq!(units + complete + item_missing, d.len());
    }
}
