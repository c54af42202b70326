//! Run configuration: one TOML file describing the dataset and schema, the
//! model (named or inline), auxiliary margins, chain settings, estimands and
//! outputs. The grammar is documented in the repository README.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{
    AuxiliaryMargin, CategoricalVariable, LoadOptions, Predicate, UnitRowRule, VarRole,
    VariableSchema,
};
use crate::error::{Error, Result};
use crate::sampler::ChainConfig;
use crate::spec::{
    named_model, ConditionalModelSpec, Family, NamedModel, Outcome,
    SequenceSpec, Term,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<DataSection>,
    pub schema: SchemaSection,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub margins: BTreeMap<String, MarginSection>,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub output: Option<OutputSection>,
    #[serde(default)]
    pub estimands: Vec<EstimandSection>,
    #[serde(default)]
    pub estimand_grid: Option<EstimandGridSection>,
    #[serde(default)]
    pub ppc: PpcSection,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub path: String,
    #[serde(default = "default_missing_code")]
    pub missing_code: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default)]
    pub unit_rule: Option<UnitRuleSection>,
    #[serde(default)]
    pub all_missing_is_unit: bool,
}

fn default_missing_code() -> String {
    "NA".into()
}

fn default_delimiter() -> String {
    ",".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitRuleSection {
    #[serde(default)]
    pub column: Option<String>,
    #[serde(default)]
    pub variable: Option<String>,
    #[serde(default)]
    pub counts: Vec<(String, i64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaSection {
    pub variables: Vec<SchemaVariable>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaVariable {
    pub name: String,
    pub levels: Vec<String>,
    #[serde(default = "default_role")]
    pub role: String,
    #[serde(default)]
    pub ordinal: bool,
    #[serde(default)]
    pub always_observed: bool,
}

fn default_role() -> String {
    "y".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub inline: Option<InlineModel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InlineModel {
    #[serde(default)]
    pub head: Vec<String>,
    #[serde(default)]
    pub survey: Vec<InlineConditional>,
    pub unit: InlineUnit,
    #[serde(default)]
    pub items: Vec<InlineConditional>,
    #[serde(default)]
    pub margin_allocation: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InlineConditional {
    pub outcome: String,
    #[serde(default)]
    pub family: Option<String>,
    pub predictors: Vec<String>,
    #[serde(default)]
    pub monotone_parent: Option<String>,
    /// Optional declared mechanism tag, validated against the derived one.
    #[serde(default)]
    pub mechanism: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InlineUnit {
    pub predictors: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginSection {
    pub probabilities: Vec<f64>,
    #[serde(default)]
    pub multiplier: Option<f64>,
    #[serde(default)]
    pub target_se: Option<f64>,
    #[serde(default)]
    pub treated_as_exact: Option<bool>,
    /// Always-observed stratifier for per-stratum margin rows.
    #[serde(default)]
    pub stratify_by: Option<String>,
    #[serde(default)]
    pub stratum_probabilities: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSection {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_window")]
    pub adaptation_window: usize,
    #[serde(default = "default_target_acc")]
    pub target_acceptance: f64,
}

fn default_iterations() -> usize {
    10_000
}
fn default_burn_in() -> usize {
    5_000
}
fn default_thin() -> usize {
    1
}
fn default_chains() -> usize {
    1
}
fn default_window() -> usize {
    50
}
fn default_target_acc() -> f64 {
    0.35
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection {
            iterations: default_iterations(),
            burn_in: default_burn_in(),
            thin: default_thin(),
            seed: 0,
            chains: default_chains(),
            adaptation_window: default_window(),
            target_acceptance: default_target_acc(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimandSection {
    #[serde(default)]
    pub label: Option<String>,
    pub target: String,
    #[serde(default)]
    pub subgroup: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimandGridSection {
    pub target: String,
    /// First variable stratifies every row; the rest enter as none-or-level
    /// combinations, mirroring survey subgroup tables.
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpcSection {
    #[serde(default = "default_replicates")]
    pub replicates_per_draw: usize,
    #[serde(default = "default_ppc_draws")]
    pub max_draws: usize,
}

fn default_replicates() -> usize {
    1
}
fn default_ppc_draws() -> usize {
    500
}

impl Default for PpcSection {
    fn default() -> Self {
        PpcSection {
            replicates_per_draw: default_replicates(),
            max_draws: default_ppc_draws(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateSection {
    pub kind: String,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub scenario: Option<crate::simgen::ScenarioTruth>,
    #[serde(default)]
    pub cps: Option<CpsSimSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpsSimSection {
    pub truth_file: String,
    pub variant: String,
}

impl RunConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn build_schema(&self) -> Result<Arc<VariableSchema>> {
        let vars = self
            .schema
            .variables
            .iter()
            .map(|v| {
                let role = match v.role.as_str() {
                    "x" | "X" => VarRole::X,
                    "y" | "Y" => VarRole::Y,
                    other => {
                        return Err(Error::config(format!(
                            "variable '{}' has unknown role '{other}' (use \"x\" or \"y\")",
                            v.name
                        )))
                    }
                };
                Ok(CategoricalVariable {
                    name: v.name.clone(),
                    levels: v.levels.clone(),
                    role,
                    ordinal: v.ordinal,
                    always_observed: v.always_observed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Arc::new(VariableSchema::new(vars)?))
    }

    pub fn load_options(&self) -> Result<LoadOptions> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| Error::config("config has no [data] section"))?;
        let delimiter = {
            let mut it = data.delimiter.chars();
            let c = it
                .next()
                .ok_or_else(|| Error::config("delimiter must be one character"))?;
            if it.next().is_some() {
                return Err(Error::config("delimiter must be one character"));
            }
            c
        };
        let unit_rule = match &data.unit_rule {
            None => UnitRowRule::None,
            Some(u) => match (&u.column, &u.variable) {
                (Some(c), None) => UnitRowRule::Column(c.clone()),
                (None, Some(v)) => UnitRowRule::StratumCounts {
                    variable: v.clone(),
                    counts: u.counts.clone(),
                },
                _ => {
                    return Err(Error::config(
                        "unit_rule needs either a column or a variable with counts",
                    ))
                }
            },
        };
        Ok(LoadOptions {
            missing_code: data.missing_code.clone(),
            delimiter,
            unit_rule,
            all_items_missing_is_unit: data.all_missing_is_unit,
        })
    }

    /// Margins in schema variable order. `target_se` overrides the
    /// multiplier once the respondent count is known.
    pub fn build_margins(
        &self,
        schema: &VariableSchema,
        n_respondents: Option<usize>,
    ) -> Result<Vec<AuxiliaryMargin>> {
        let mut out = Vec::new();
        for (name, m) in &self.margins {
            let mut margin = AuxiliaryMargin::new(name.clone(), m.probabilities.clone())?;
            margin.stratify_by = m.stratify_by.clone();
            margin.stratum_probabilities = m.stratum_probabilities.clone();
            if let Some(e) = m.treated_as_exact {
                margin.treated_as_exact = e;
            }
            if let Some(mult) = m.multiplier {
                margin.effective_multiplier = mult;
            }
            if let Some(se) = m.target_se {
                let n = n_respondents.ok_or_else(|| {
                    Error::config("target_se needs a dataset to size the block against")
                })?;
                margin.effective_multiplier = crate::augment::multiplier_for_se(&margin, se, n)?;
                margin.treated_as_exact = false;
            }
            margin.validate_against(schema)?;
            out.push(margin);
        }
        // Deterministic order: schema order.
        out.sort_by_key(|m| schema.lookup(&m.variable).map(|v| v.0).unwrap_or(usize::MAX));
        Ok(out)
    }

    pub fn build_spec(&self, schema: &VariableSchema) -> Result<(SequenceSpec, String)> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::config("config has no [model] section"))?;
        match (&model.name, &model.inline) {
            (Some(_), Some(_)) => Err(Error::config(
                "named model and inline specification are mutually exclusive",
            )),
            (Some(name), None) => {
                let named = NamedModel::parse(name)?;
                Ok((named_model(named, schema)?, name.clone()))
            }
            (None, Some(inline)) => Ok((build_inline(inline, schema)?, "inline".to_string())),
            (None, None) => Err(Error::config("[model] needs a name or an inline spec")),
        }
    }

    pub fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            iterations: self.chain.iterations,
            burn_in: self.chain.burn_in,
            thin: self.chain.thin,
            seed: self.chain.seed,
            adaptation_window: self.chain.adaptation_window,
            target_acceptance: self.chain.target_acceptance,
        }
    }

    /// Explicit estimands plus the expanded grid, as (label, target,
    /// subgroup) triples.
    pub fn estimand_list(&self, schema: &VariableSchema) -> Result<Vec<(String, String, String)>> {
        let mut out = Vec::new();
        for e in &self.estimands {
            let label = e
                .label
                .clone()
                .unwrap_or_else(|| format!("{} | {}", e.target, e.subgroup));
            out.push((label, e.target.clone(), e.subgroup.clone()));
        }
        if let Some(grid) = &self.estimand_grid {
            let vars: Vec<_> = grid
                .groups
                .iter()
                .map(|g| schema.require(g))
                .collect::<Result<Vec<_>>>()?;
            if vars.is_empty() {
                return Err(Error::config("estimand grid needs at least one group"));
            }
            let (first, rest) = vars.split_first().unwrap();
            // none-or-level combinations over the non-stratifying groups.
            let mut combos: Vec<Vec<(String, String)>> = vec![vec![]];
            for v in rest {
                let var = schema.var(*v);
                let mut next = Vec::new();
                for c in &combos {
                    next.push(c.clone());
                    for l in &var.levels {
                        let mut c2 = c.clone();
                        c2.push((var.name.clone(), l.clone()));
                        next.push(c2);
                    }
                }
                combos = next;
            }
            let fvar = schema.var(*first);
            for l in &fvar.levels {
                for combo in &combos {
                    let mut clauses = vec![format!("{}={}", fvar.name, l)];
                    clauses.extend(combo.iter().map(|(n, v)| format!("{n}={v}")));
                    let subgroup = clauses.join(" & ");
                    let label = if combo.is_empty() {
                        format!("{l} full")
                    } else {
                        let parts: Vec<String> =
                            combo.iter().map(|(_, v)| v.clone()).collect();
                        format!("{l} {}", parts.join(" "))
                    };
                    out.push((label, grid.target.clone(), subgroup));
                }
            }
        }
        Ok(out)
    }
}

fn parse_term(s: &str, schema: &VariableSchema) -> Result<Term> {
    let s = s.trim();
    if s == "1" || s.eq_ignore_ascii_case("intercept") {
        return Ok(Term::Intercept);
    }
    if let Some((a, b)) = s.split_once('*') {
        return Ok(Term::Interaction(
            schema.require(a.trim())?,
            schema.require(b.trim())?,
        ));
    }
    if let Some((name, rest)) = s.split_once('[') {
        let inner = rest
            .strip_suffix(']')
            .ok_or_else(|| Error::config(format!("bad level-set term '{s}'")))?;
        let var = schema.require(name.trim())?;
        let levels = inner
            .split('|')
            .map(|l| {
                schema
                    .var(var)
                    .level_index(l.trim())
                    .ok_or_else(|| Error::config(format!("unknown level '{l}' in '{s}'")))
            })
            .collect::<Result<Vec<u8>>>()?;
        return Ok(Term::LevelSet(var, levels));
    }
    Ok(Term::Main(schema.require(s)?))
}

fn parse_outcome(s: &str, schema: &VariableSchema) -> Result<Outcome> {
    if s == "U" {
        return Ok(Outcome::Unit);
    }
    if let Some(name) = s.strip_prefix("R(").and_then(|r| r.strip_suffix(')')) {
        return Ok(Outcome::Item(schema.require(name)?));
    }
    if let Some(name) = s.strip_prefix("R_") {
        if let Some(v) = schema.lookup(name) {
            return Ok(Outcome::Item(v));
        }
    }
    Ok(Outcome::Var(schema.require(s)?))
}

fn build_inline(inline: &InlineModel, schema: &VariableSchema) -> Result<SequenceSpec> {
    let head_vars = inline
        .head
        .iter()
        .map(|h| schema.require(h))
        .collect::<Result<Vec<_>>>()?;
    let build_cond = |c: &InlineConditional, indicator: bool| -> Result<ConditionalModelSpec> {
        let outcome = if indicator {
            Outcome::Item(schema.require(&c.outcome)?)
        } else {
            parse_outcome(&c.outcome, schema)?
        };
        let terms = c
            .predictors
            .iter()
            .map(|t| parse_term(t, schema))
            .collect::<Result<Vec<_>>>()?;
        let family = match c.family.as_deref() {
            None | Some("bernoulli_logit") => Family::BernoulliLogit,
            Some("proportional_odds_logit") | Some("proportional_odds") => {
                Family::ProportionalOddsLogit
            }
            Some(other) => return Err(Error::config(format!("unknown family '{other}'"))),
        };
        let mut m = match family {
            Family::BernoulliLogit => ConditionalModelSpec::bernoulli(outcome, terms),
            Family::ProportionalOddsLogit => {
                let v = match outcome {
                    Outcome::Var(v) => v,
                    _ => return Err(Error::config("proportional odds needs a survey outcome")),
                };
                ConditionalModelSpec::proportional_odds(
                    outcome,
                    schema.var(v).n_levels() - 1,
                    terms,
                )
            }
        };
        if let Some(p) = &c.monotone_parent {
            m = m.with_monotone_parent(schema.require(p)?);
        }
        if let Some(tag) = &c.mechanism {
            // Recorded for the validation pass; checked in build_spec caller
            // via SequenceSpec::mechanism_tags.
            let _ = tag;
        }
        Ok(m)
    };
    let survey_models = inline
        .survey
        .iter()
        .map(|c| build_cond(c, false))
        .collect::<Result<Vec<_>>>()?;
    let unit_model = ConditionalModelSpec::bernoulli(
        Outcome::Unit,
        inline
            .unit
            .predictors
            .iter()
            .map(|t| parse_term(t, schema))
            .collect::<Result<Vec<_>>>()?,
    );
    let item_models = inline
        .items
        .iter()
        .map(|c| build_cond(c, true))
        .collect::<Result<Vec<_>>>()?;
    let margin_allocation = inline
        .margin_allocation
        .iter()
        .map(|v| schema.require(v))
        .collect::<Result<_>>()?;
    let spec = SequenceSpec {
        head_vars,
        survey_models,
        unit_model,
        item_models,
        margin_allocation,
    };
    // Declared mechanism tags must match the derived ones.
    for c in inline.items.iter() {
        if let Some(tag) = &c.mechanism {
            let derived = spec.mechanism_tags(schema);
            let label = format!("R_{}", c.outcome);
            if let Some((_, mech)) = derived.iter().find(|(l, _)| *l == label) {
                if !tag.eq_ignore_ascii_case(&mech.to_string()) {
                    return Err(Error::config(format!(
                        "model for '{label}' declares mechanism {tag} but the structure implies {mech}"
                    )));
                }
            }
        }
    }
    Ok(spec)
}

/// Parse a subgroup string into a predicate (empty means all records).
pub fn parse_subgroup(s: &str, schema: &VariableSchema) -> Result<Predicate> {
    Predicate::parse(s, schema)
}
