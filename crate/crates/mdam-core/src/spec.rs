//! Declarative specification of the sequential model: a saturated
//! multinomial head over leading survey variables, conditional regressions
//! for the remaining survey variables, a unit nonresponse model and one item
//! nonresponse model per variable, together with the margin allocation set
//! that says where auxiliary margins spend their identification budget.
//!
//! Identification is checked by rule-based counting rather than numerical
//! information-matrix rank. Coefficients classify as:
//!
//! * `observable-together` — estimable from the observed data alone. All
//!   survey-block coefficients qualify (complete cases exist), as do
//!   nonresponse-model terms on always-observed variables and cross-variable
//!   terms in item models (a variable's indicator may depend on the *other*
//!   survey variables; the sequential itemwise-conditional-independence
//!   structure identifies those even when the predictor itself has missing
//!   values).
//! * `margin-funded` — a term in its own variable (in the variable's item
//!   model) or a survey-variable term in the unit model. Those relationships
//!   are never jointly observed, so each expanded coefficient consumes one
//!   unit of the variable's margin budget (levels − 1 per margin).
//! * `unfunded` — needs funding with no budget left; the model is
//!   overparameterized.

use std::collections::BTreeSet;
use std::fmt;

use crate::data::{AuxiliaryMargin, MissingnessSummary, VarId, VarRole, VariableSchema, MISSING};
use crate::error::{Error, Result};

/// One additive term of a linear predictor. Dummy expansion uses the first
/// schema level as the reference: a main effect on a K-level variable
/// contributes K−1 coefficients, an interaction (K_A−1)(K_B−1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Intercept,
    Main(VarId),
    Interaction(VarId, VarId),
    /// Single 0/1 indicator of membership in a level set.
    LevelSet(VarId, Vec<u8>),
}

impl Term {
    /// Variables the term references.
    pub fn vars(&self) -> Vec<VarId> {
        match self {
            Term::Intercept => vec![],
            Term::Main(v) | Term::LevelSet(v, _) => vec![*v],
            Term::Interaction(a, b) => vec![*a, *b],
        }
    }

    /// Number of coefficients after dummy expansion.
    pub fn width(&self, schema: &VariableSchema) -> usize {
        match self {
            Term::Intercept => 1,
            Term::Main(v) => schema.var(*v).n_levels() - 1,
            Term::Interaction(a, b) => {
                (schema.var(*a).n_levels() - 1) * (schema.var(*b).n_levels() - 1)
            }
            Term::LevelSet(..) => 1,
        }
    }

    pub fn label(&self, schema: &VariableSchema) -> String {
        match self {
            Term::Intercept => "intercept".to_string(),
            Term::Main(v) => schema.var(*v).name.clone(),
            Term::Interaction(a, b) => {
                format!("{}*{}", schema.var(*a).name, schema.var(*b).name)
            }
            Term::LevelSet(v, levels) => {
                let var = schema.var(*v);
                let labels: Vec<&str> =
                    levels.iter().map(|&l| var.levels[l as usize].as_str()).collect();
                format!("{}[{}]", var.name, labels.join("|"))
            }
        }
    }

    /// Name of expanded coefficient `j` within this term.
    pub fn coeff_label(&self, schema: &VariableSchema, j: usize) -> String {
        match self {
            Term::Intercept => "intercept".to_string(),
            Term::Main(v) => {
                let var = schema.var(*v);
                format!("{}={}", var.name, var.levels[j + 1])
            }
            Term::Interaction(a, b) => {
                let (va, vb) = (schema.var(*a), schema.var(*b));
                let wb = vb.n_levels() - 1;
                let (ia, ib) = (j / wb, j % wb);
                format!("{}={}:{}={}", va.name, va.levels[ia + 1], vb.name, vb.levels[ib + 1])
            }
            Term::LevelSet(..) => self.label(schema),
        }
    }

    /// Whether expanded coefficient `j` is active (design value 1) for a
    /// completed value vector.
    pub fn active(&self, values: &[u8], j: usize, schema: &VariableSchema) -> bool {
        match self {
            Term::Intercept => true,
            Term::Main(v) => values[v.0] as usize == j + 1,
            Term::Interaction(a, b) => {
                let wb = schema.var(*b).n_levels() - 1;
                values[a.0] as usize == j / wb + 1 && values[b.0] as usize == j % wb + 1
            }
            Term::LevelSet(v, levels) => levels.contains(&values[v.0]),
        }
    }
}

/// Linear predictor: additive terms plus, for proportional-odds outcomes,
/// a strictly increasing cutpoint vector that replaces the intercept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearPredictorSpec {
    pub terms: Vec<Term>,
    pub cutpoint_count: usize,
}

impl LinearPredictorSpec {
    pub fn with_terms(terms: Vec<Term>) -> Self {
        LinearPredictorSpec {
            terms,
            cutpoint_count: 0,
        }
    }

    /// Total coefficients: cutpoints first, then dummy-expanded terms.
    pub fn coeff_count(&self, schema: &VariableSchema) -> usize {
        self.cutpoint_count + self.slope_count(schema)
    }

    pub fn slope_count(&self, schema: &VariableSchema) -> usize {
        self.terms.iter().map(|t| t.width(schema)).sum()
    }

    /// Slope part of the linear predictor (cutpoints excluded) for a value
    /// vector with every referenced variable present.
    pub fn slope(&self, schema: &VariableSchema, slope_coeffs: &[f64], values: &[u8]) -> f64 {
        let mut lp = 0.0;
        let mut off = 0usize;
        for t in &self.terms {
            let w = t.width(schema);
            match t {
                Term::Intercept => lp += slope_coeffs[off],
                Term::Main(v) => {
                    let val = values[v.0] as usize;
                    if val > 0 {
                        lp += slope_coeffs[off + val - 1];
                    }
                }
                Term::Interaction(a, b) => {
                    let (va, vb) = (values[a.0] as usize, values[b.0] as usize);
                    if va > 0 && vb > 0 {
                        let wb = schema.var(*b).n_levels() - 1;
                        lp += slope_coeffs[off + (va - 1) * wb + (vb - 1)];
                    }
                }
                Term::LevelSet(v, levels) => {
                    if levels.contains(&values[v.0]) {
                        lp += slope_coeffs[off];
                    }
                }
            }
            off += w;
        }
        lp
    }

    pub fn referenced_vars(&self) -> BTreeSet<VarId> {
        self.terms.iter().flat_map(|t| t.vars()).collect()
    }
}

/// Evaluate a linear predictor against a completed record.
///
/// For a proportional-odds predictor, `cutpoint = Some(a)` selects the a-th
/// cumulative logit; plain predictors pass `None`.
pub fn linear_predictor(
    schema: &VariableSchema,
    predictor: &LinearPredictorSpec,
    coeffs: &[f64],
    values: &[u8],
    cutpoint: Option<usize>,
) -> Result<f64> {
    if coeffs.len() != predictor.coeff_count(schema) {
        return Err(Error::validation(format!(
            "coefficient vector has length {}, dummy expansion needs {}",
            coeffs.len(),
            predictor.coeff_count(schema)
        )));
    }
    for v in predictor.referenced_vars() {
        if values[v.0] == MISSING {
            return Err(Error::validation(format!(
                "record has no value for '{}'",
                schema.var(v).name
            )));
        }
    }
    let slope = predictor.slope(schema, &coeffs[predictor.cutpoint_count..], values);
    match (predictor.cutpoint_count, cutpoint) {
        (0, None) => Ok(slope),
        (0, Some(_)) => Err(Error::validation("predictor has no cutpoints")),
        (_, None) => Err(Error::validation(
            "proportional-odds predictor needs a cutpoint index",
        )),
        (k, Some(a)) => {
            if a >= k {
                return Err(Error::validation(format!("cutpoint {a} out of range (<{k})")));
            }
            Ok(coeffs[a] + slope)
        }
    }
}

/// Outcome family of a conditional model. The saturated multinomial head is
/// represented separately on [`SequenceSpec`], which is what restricts it to
/// the head survey-variable block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    BernoulliLogit,
    ProportionalOddsLogit,
}

/// What a conditional model is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// A survey variable.
    Var(VarId),
    /// The item nonresponse indicator of a survey variable.
    Item(VarId),
    /// The unit nonresponse indicator.
    Unit,
}

impl Outcome {
    pub fn label(&self, schema: &VariableSchema) -> String {
        match self {
            Outcome::Var(v) => schema.var(*v).name.clone(),
            Outcome::Item(v) => format!("R_{}", schema.var(*v).name),
            Outcome::Unit => "U".to_string(),
        }
    }
}

/// One conditional model in the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalModelSpec {
    pub outcome: Outcome,
    pub family: Family,
    pub predictor: LinearPredictorSpec,
    /// For item-indicator outcomes: indicator variable whose missingness
    /// forces this one missing, the Bern([phi]^(1-R_parent)) construction.
    pub monotone_parent: Option<VarId>,
}

impl ConditionalModelSpec {
    pub fn bernoulli(outcome: Outcome, terms: Vec<Term>) -> Self {
        ConditionalModelSpec {
            outcome,
            family: Family::BernoulliLogit,
            predictor: LinearPredictorSpec::with_terms(terms),
            monotone_parent: None,
        }
    }

    pub fn proportional_odds(outcome: Outcome, cutpoints: usize, terms: Vec<Term>) -> Self {
        ConditionalModelSpec {
            outcome,
            family: Family::ProportionalOddsLogit,
            predictor: LinearPredictorSpec {
                terms,
                cutpoint_count: cutpoints,
            },
            monotone_parent: None,
        }
    }

    pub fn with_monotone_parent(mut self, parent: VarId) -> Self {
        self.monotone_parent = Some(parent);
        self
    }

    pub fn coeff_count(&self, schema: &VariableSchema) -> usize {
        self.predictor.coeff_count(schema)
    }
}

/// Missingness mechanism tag derived for a nonresponse model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Mcar,
    Cmar,
    Icin,
    An,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mechanism::Mcar => "MCAR",
            Mechanism::Cmar => "CMAR",
            Mechanism::Icin => "ICIN",
            Mechanism::An => "AN",
        };
        f.write_str(s)
    }
}

/// Ordered sequence of conditional models plus the margin allocation set.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    /// Variables covered by the saturated multinomial head, in schema order.
    pub head_vars: Vec<VarId>,
    /// Regression models for the remaining survey variables, in sequence
    /// order.
    pub survey_models: Vec<ConditionalModelSpec>,
    pub unit_model: ConditionalModelSpec,
    /// Item nonresponse models, in sequence order.
    pub item_models: Vec<ConditionalModelSpec>,
    /// The set of margin variables whose budget is spent in the unit model.
    pub margin_allocation: BTreeSet<VarId>,
}

impl SequenceSpec {
    /// All nonresponse models in sequence order: unit first, then items.
    pub fn selection_models(&self) -> impl Iterator<Item = &ConditionalModelSpec> {
        std::iter::once(&self.unit_model).chain(self.item_models.iter())
    }

    /// Total free parameters: head cells − 1 plus all model coefficients.
    pub fn free_parameter_count(&self, schema: &VariableSchema) -> usize {
        let head: usize = if self.head_vars.is_empty() {
            0
        } else {
            self.head_vars
                .iter()
                .map(|v| schema.var(*v).n_levels())
                .product::<usize>()
                - 1
        };
        head + self
            .survey_models
            .iter()
            .chain(self.selection_models())
            .map(|m| m.coeff_count(schema))
            .sum::<usize>()
    }

    /// The item model for a variable, if any.
    pub fn item_model(&self, var: VarId) -> Option<&ConditionalModelSpec> {
        self.item_models
            .iter()
            .find(|m| m.outcome == Outcome::Item(var))
    }

    /// Derived mechanism tags for the unit and item models.
    pub fn mechanism_tags(&self, schema: &VariableSchema) -> Vec<(String, Mechanism)> {
        let mut out = Vec::new();
        for m in self.selection_models() {
            let own = match m.outcome {
                Outcome::Item(v) => Some(v),
                _ => None,
            };
            let vars = m.predictor.referenced_vars();
            let tag = if let Some(w) = own {
                if vars.contains(&w) {
                    Mechanism::An
                } else if vars.is_empty() {
                    Mechanism::Mcar
                } else if vars.iter().all(|v| schema.var(*v).always_observed) {
                    Mechanism::Cmar
                } else {
                    Mechanism::Icin
                }
            } else {
                // Unit model: margin-allocated terms make it AN.
                if vars.iter().any(|v| self.margin_allocation.contains(v)) {
                    Mechanism::An
                } else if vars.is_empty() {
                    Mechanism::Mcar
                } else if vars.iter().all(|v| schema.var(*v).always_observed) {
                    Mechanism::Cmar
                } else {
                    Mechanism::Icin
                }
            };
            out.push((m.outcome.label(schema), tag));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Named model catalog
// ---------------------------------------------------------------------------

/// The named specifications from the two-binary illustrative scenario and
/// the survey application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NamedModel {
    McarIcin,
    AnR,
    AnU,
    AnRx1,
    AnRx2,
    MdR,
    MdU,
}

impl NamedModel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "MCAR+ICIN" => Ok(NamedModel::McarIcin),
            "AN-R" => Ok(NamedModel::AnR),
            "AN-U" => Ok(NamedModel::AnU),
            "AN-Rx1" => Ok(NamedModel::AnRx1),
            "AN-Rx2" => Ok(NamedModel::AnRx2),
            "MD-R" => Ok(NamedModel::MdR),
            "MD-U" => Ok(NamedModel::MdU),
            other => Err(Error::validation(format!("unknown named model '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NamedModel::McarIcin => "MCAR+ICIN",
            NamedModel::AnR => "AN-R",
            NamedModel::AnU => "AN-U",
            NamedModel::AnRx1 => "AN-Rx1",
            NamedModel::AnRx2 => "AN-Rx2",
            NamedModel::MdR => "MD-R",
            NamedModel::MdU => "MD-U",
        }
    }
}

impl fmt::Display for NamedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn expect_two_binary(schema: &VariableSchema) -> Result<(VarId, VarId)> {
    if schema.len() != 2
        || schema.var(VarId(0)).n_levels() != 2
        || schema.var(VarId(1)).n_levels() != 2
    {
        return Err(Error::validation(
            "this named model needs a schema of exactly two binary variables",
        ));
    }
    Ok((VarId(0), VarId(1)))
}

struct CpsVars {
    state: VarId,
    sex: VarId,
    age: VarId,
    vote: VarId,
}

fn expect_cps(schema: &VariableSchema) -> Result<CpsVars> {
    if schema.len() != 4 {
        return Err(Error::validation(
            "this named model needs a 4-variable schema (stratum, binary, ordinal, binary)",
        ));
    }
    let vars = CpsVars {
        state: VarId(0),
        sex: VarId(1),
        age: VarId(2),
        vote: VarId(3),
    };
    if !schema.var(vars.state).always_observed {
        return Err(Error::validation(
            "first variable must be declared always_observed",
        ));
    }
    if schema.var(vars.sex).n_levels() != 2 {
        return Err(Error::validation("second variable must be binary"));
    }
    if schema.var(vars.age).n_levels() < 3 || !schema.var(vars.age).ordinal {
        return Err(Error::validation(
            "third variable must be ordinal with at least 3 levels",
        ));
    }
    if schema.var(vars.vote).n_levels() != 2 {
        return Err(Error::validation("fourth variable must be binary"));
    }
    Ok(vars)
}

/// Build one of the named specifications against a matching schema.
pub fn named_model(name: NamedModel, schema: &VariableSchema) -> Result<SequenceSpec> {
    use Term::{Intercept, Interaction, Main};
    match name {
        NamedModel::McarIcin | NamedModel::AnR | NamedModel::AnU | NamedModel::AnRx1
        | NamedModel::AnRx2 => {
            let (x1, x2) = expect_two_binary(schema)?;
            let (unit_terms, r1_terms, r2_terms, alloc): (
                Vec<Term>,
                Vec<Term>,
                Vec<Term>,
                Vec<VarId>,
            ) = match name {
                NamedModel::McarIcin => (
                    vec![Intercept],
                    vec![Intercept, Main(x2)],
                    vec![Intercept, Main(x1)],
                    vec![],
                ),
                NamedModel::AnR => (
                    vec![Intercept],
                    vec![Intercept, Main(x2), Main(x1)],
                    vec![Intercept, Main(x1), Main(x2)],
                    vec![],
                ),
                NamedModel::AnU => (
                    vec![Intercept, Main(x1), Main(x2)],
                    vec![Intercept, Main(x2)],
                    vec![Intercept, Main(x1)],
                    vec![x1, x2],
                ),
                NamedModel::AnRx1 => (
                    vec![Intercept, Main(x2)],
                    vec![Intercept, Main(x2), Main(x1)],
                    vec![Intercept, Main(x1)],
                    vec![x2],
                ),
                NamedModel::AnRx2 => (
                    vec![Intercept, Main(x1)],
                    vec![Intercept, Main(x2)],
                    vec![Intercept, Main(x1), Main(x2)],
                    vec![x1],
                ),
                _ => unreachable!(),
            };
            Ok(SequenceSpec {
                head_vars: vec![x1, x2],
                survey_models: vec![],
                unit_model: ConditionalModelSpec::bernoulli(Outcome::Unit, unit_terms),
                item_models: vec![
                    ConditionalModelSpec::bernoulli(Outcome::Item(x1), r1_terms),
                    ConditionalModelSpec::bernoulli(Outcome::Item(x2), r2_terms),
                ],
                margin_allocation: alloc.into_iter().collect(),
            })
        }
        NamedModel::MdR | NamedModel::MdU => {
            let v = expect_cps(schema)?;
            let age_cuts = schema.var(v.age).n_levels() - 1;
            let survey_models = vec![
                ConditionalModelSpec::bernoulli(
                    Outcome::Var(v.sex),
                    vec![Intercept, Main(v.state)],
                ),
                ConditionalModelSpec::proportional_odds(
                    Outcome::Var(v.age),
                    age_cuts,
                    vec![Main(v.state), Main(v.sex)],
                ),
                ConditionalModelSpec::bernoulli(
                    Outcome::Var(v.vote),
                    vec![
                        Intercept,
                        Main(v.state),
                        Main(v.age),
                        Main(v.sex),
                        Interaction(v.state, v.age),
                    ],
                ),
            ];
            let mut unit_terms = vec![Intercept, Main(v.state), Main(v.age)];
            let mut rv_terms = vec![Intercept, Main(v.state), Main(v.age), Main(v.sex)];
            let alloc: Vec<VarId> = match name {
                NamedModel::MdR => {
                    // The vote margin funds the vote term in its own item
                    // model; the unit model must leave vote out.
                    rv_terms.push(Main(v.vote));
                    vec![v.age]
                }
                NamedModel::MdU => {
                    // The vote margin funds the vote term in the unit model;
                    // the vote item model must leave vote out.
                    unit_terms.push(Main(v.vote));
                    vec![v.age, v.vote]
                }
                _ => unreachable!(),
            };
            let item_models = vec![
                ConditionalModelSpec::bernoulli(
                    Outcome::Item(v.sex),
                    vec![Intercept, Main(v.state)],
                ),
                ConditionalModelSpec::bernoulli(
                    Outcome::Item(v.age),
                    vec![Intercept, Main(v.state), Main(v.sex), Main(v.vote)],
                )
                .with_monotone_parent(v.sex),
                ConditionalModelSpec::bernoulli(Outcome::Item(v.vote), rv_terms)
                    .with_monotone_parent(v.age),
            ];
            Ok(SequenceSpec {
                head_vars: vec![v.state],
                survey_models,
                unit_model: ConditionalModelSpec::bernoulli(Outcome::Unit, unit_terms),
                item_models,
                margin_allocation: alloc.into_iter().collect(),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn into_result(self) -> Result<ValidationReport> {
        if self.is_valid() {
            Ok(self)
        } else {
            Err(Error::Validation(self.errors.join("; ")))
        }
    }
}

/// Structural validation of a sequence spec against a schema and the margin
/// list. Hard violations (double margin allocation, unfundable self-terms,
/// monotone cycles, family mismatches) are errors; ordering advice is a
/// warning. Pass a data summary to also check the least-to-most-missing
/// ordering recommendation for survey variables.
pub fn validate_sequence(
    spec: &SequenceSpec,
    schema: &VariableSchema,
    margins: &[AuxiliaryMargin],
    data: Option<&MissingnessSummary>,
) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let mut margin_vars: BTreeSet<VarId> = BTreeSet::new();
    for m in margins {
        match m.validate_against(schema) {
            Ok(id) => {
                if schema.var(id).role == VarRole::Y {
                    rep.errors
                        .push(format!("margin supplied for '{}' which has no margin role", m.variable));
                }
                if !margin_vars.insert(id) {
                    rep.errors
                        .push(format!("duplicate margin for '{}'", m.variable));
                }
            }
            Err(e) => rep.errors.push(e.to_string()),
        }
    }
    for (k, v) in schema.vars() {
        if v.role == VarRole::X && !margin_vars.contains(&k) {
            rep.errors.push(format!(
                "variable '{}' expects an auxiliary margin but none was supplied",
                v.name
            ));
        }
    }

    // Every survey variable modeled exactly once.
    let mut covered = vec![0usize; schema.len()];
    for v in &spec.head_vars {
        covered[v.0] += 1;
    }
    for m in &spec.survey_models {
        match m.outcome {
            Outcome::Var(v) => covered[v.0] += 1,
            _ => rep
                .errors
                .push("survey block contains a non-survey outcome".to_string()),
        }
        if m.monotone_parent.is_some() {
            rep.errors
                .push("monotone parent is only meaningful on item indicator models".to_string());
        }
    }
    for (k, v) in schema.vars() {
        if covered[k.0] != 1 {
            rep.errors.push(format!(
                "survey variable '{}' must appear exactly once in the head or survey block",
                v.name
            ));
        }
    }

    if spec.unit_model.outcome != Outcome::Unit {
        rep.errors.push("unit model outcome must be U".to_string());
    }
    if spec.unit_model.monotone_parent.is_some() {
        rep.errors
            .push("monotone parent is only meaningful on item indicator models".to_string());
    }

    // Family and predictor checks.
    let check_model = |m: &ConditionalModelSpec, rep: &mut ValidationReport| {
        let label = m.outcome.label(schema);
        match (m.family, m.outcome) {
            (Family::BernoulliLogit, Outcome::Var(v)) => {
                if schema.var(v).n_levels() != 2 {
                    rep.errors
                        .push(format!("bernoulli-logit model for non-binary '{label}'"));
                }
                if m.predictor.cutpoint_count != 0 {
                    rep.errors
                        .push(format!("bernoulli-logit model '{label}' has cutpoints"));
                }
            }
            (Family::BernoulliLogit, _) => {
                if m.predictor.cutpoint_count != 0 {
                    rep.errors
                        .push(format!("bernoulli-logit model '{label}' has cutpoints"));
                }
            }
            (Family::ProportionalOddsLogit, Outcome::Var(v)) => {
                let var = schema.var(v);
                if !var.ordinal {
                    rep.warnings.push(format!(
                        "proportional-odds model on '{label}' which is not flagged ordinal"
                    ));
                }
                if m.predictor.cutpoint_count != var.n_levels() - 1 {
                    rep.errors.push(format!(
                        "proportional-odds model '{label}' needs {} cutpoints",
                        var.n_levels() - 1
                    ));
                }
                if m.predictor.terms.contains(&Term::Intercept) {
                    rep.errors.push(format!(
                        "proportional-odds model '{label}' must not also have an intercept"
                    ));
                }
            }
            (Family::ProportionalOddsLogit, _) => {
                rep.errors
                    .push(format!("proportional-odds family on indicator '{label}'"));
            }
        }
        // Survey models may not regress a variable on itself.
        if let Outcome::Var(v) = m.outcome {
            if m.predictor.referenced_vars().contains(&v) {
                rep.errors
                    .push(format!("survey model '{label}' references its own outcome"));
            }
        }
        for t in &m.predictor.terms {
            if let Term::Interaction(a, b) = t {
                if a == b {
                    rep.errors
                        .push(format!("interaction in '{label}' repeats a variable"));
                }
            }
            if let Term::LevelSet(v, levels) = t {
                let n = schema.var(*v).n_levels() as u8;
                if levels.is_empty() || levels.iter().any(|&l| l >= n) {
                    rep.errors
                        .push(format!("level set in '{label}' is empty or out of range"));
                }
            }
        }
    };
    for m in spec
        .survey_models
        .iter()
        .chain(std::iter::once(&spec.unit_model))
        .chain(spec.item_models.iter())
    {
        check_model(m, &mut rep);
    }

    // Sequencing order: survey-variable predictors must already be modeled
    // (head or earlier in the survey block).
    {
        let mut seen: BTreeSet<VarId> = spec.head_vars.iter().copied().collect();
        for m in &spec.survey_models {
            for v in m.predictor.referenced_vars() {
                if !seen.contains(&v) {
                    rep.errors.push(format!(
                        "survey model '{}' conditions on '{}' which comes later in the sequence",
                        m.outcome.label(schema),
                        schema.var(v).name
                    ));
                }
            }
            if let Outcome::Var(v) = m.outcome {
                seen.insert(v);
            }
        }
    }

    // Item models: one per variable at most, and margin-allocation rules.
    let mut item_vars: BTreeSet<VarId> = BTreeSet::new();
    for m in &spec.item_models {
        let w = match m.outcome {
            Outcome::Item(w) => w,
            _ => {
                rep.errors
                    .push("item block contains a non-indicator outcome".to_string());
                continue;
            }
        };
        if !item_vars.insert(w) {
            rep.errors.push(format!(
                "two item models for '{}'",
                schema.var(w).name
            ));
        }
        let self_term = m.predictor.referenced_vars().contains(&w);
        if self_term {
            if spec.margin_allocation.contains(&w) {
                rep.errors.push(format!(
                    "margin variable '{}' is both in the unit-model allocation set and in its own \
                     indicator model (double allocation)",
                    schema.var(w).name
                ));
            } else if !margin_vars.contains(&w) {
                rep.errors.push(format!(
                    "indicator model for '{}' has a term in its own variable but no margin funds it",
                    schema.var(w).name
                ));
            }
        }
    }

    // Unit model terms on survey variables need margin allocation, unless
    // the variable is always observed.
    for v in spec.unit_model.predictor.referenced_vars() {
        if schema.var(v).always_observed {
            continue;
        }
        if !spec.margin_allocation.contains(&v) {
            rep.errors.push(format!(
                "unit model uses '{}' which is not in the margin allocation set",
                schema.var(v).name
            ));
        }
    }
    for v in &spec.margin_allocation {
        if !margin_vars.contains(v) {
            rep.errors.push(format!(
                "margin allocation names '{}' but no margin was supplied for it",
                schema.var(*v).name
            ));
        }
        if !spec
            .unit_model
            .predictor
            .referenced_vars()
            .contains(v)
        {
            rep.warnings.push(format!(
                "margin allocation names '{}' but the unit model has no term in it",
                schema.var(*v).name
            ));
        }
    }

    // Monotone parents: item outcome seen earlier in the item sequence.
    {
        let mut seen: BTreeSet<VarId> = BTreeSet::new();
        for m in &spec.item_models {
            if let Outcome::Item(w) = m.outcome {
                if let Some(p) = m.monotone_parent {
                    if p == w {
                        rep.errors.push(format!(
                            "item model for '{}' is its own monotone parent",
                            schema.var(w).name
                        ));
                    } else if !seen.contains(&p) {
                        rep.errors.push(format!(
                            "monotone parent '{}' must have its item model earlier in the sequence",
                            schema.var(p).name
                        ));
                    }
                }
                seen.insert(w);
            }
        }
    }

    // Ordering advice: margin variables' indicator models early.
    {
        let first_x = spec.item_models.iter().position(|m| match m.outcome {
            Outcome::Item(w) => margin_vars.contains(&w),
            _ => false,
        });
        let last_y = spec.item_models.iter().rposition(|m| match m.outcome {
            Outcome::Item(w) => !margin_vars.contains(&w),
            _ => false,
        });
        if let (Some(fx), Some(ly)) = (first_x, last_y) {
            if ly < fx {
                rep.warnings.push(
                    "indicator models for variables without margins come before those with \
                     margins; variables with auxiliary margins are usually placed early"
                        .to_string(),
                );
            }
        }
    }

    // Least-to-most-missing ordering recommendation (needs data).
    if let Some(sum) = data {
        let order: Vec<VarId> = spec
            .head_vars
            .iter()
            .copied()
            .chain(spec.survey_models.iter().filter_map(|m| match m.outcome {
                Outcome::Var(v) => Some(v),
                _ => None,
            }))
            .collect();
        let mut prev = 0usize;
        for v in order {
            let miss = sum.per_var[v.0].missing_on_respondents;
            if miss + 1 < prev {
                // Allow ties and small inversions of one record.
                rep.warnings.push(format!(
                    "survey variable '{}' has fewer missing values than an earlier variable; \
                     consider ordering from least to most missing",
                    schema.var(v).name
                ));
            }
            prev = prev.max(miss);
        }
    }

    rep
}

// ---------------------------------------------------------------------------
// Identification counting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoeffClass {
    ObservableTogether,
    /// Funded by the named margin variable's budget.
    MarginFunded(String),
    Unfunded,
}

#[derive(Debug, Clone)]
pub struct CoeffReport {
    /// Coefficient group, e.g. `U:age`.
    pub group: String,
    /// Expanded coefficient name, e.g. `U:age=30-49`.
    pub name: String,
    pub class: CoeffClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Identified,
    Overparameterized,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Identified => "identified",
            Verdict::Overparameterized => "overparameterized",
        })
    }
}

#[derive(Debug, Clone)]
pub struct IdentificationReport {
    pub free_parameter_count: usize,
    pub observed_budget: usize,
    pub margin_budget: usize,
    pub per_coefficient: Vec<CoeffReport>,
    pub verdict: Verdict,
    pub warnings: Vec<String>,
}

impl IdentificationReport {
    pub fn margin_funded_count(&self) -> usize {
        self.per_coefficient
            .iter()
            .filter(|c| matches!(c.class, CoeffClass::MarginFunded(_)))
            .count()
    }

    pub fn unfunded(&self) -> Vec<&CoeffReport> {
        self.per_coefficient
            .iter()
            .filter(|c| c.class == CoeffClass::Unfunded)
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "free parameters: {}", self.free_parameter_count);
        let _ = writeln!(s, "observed-data budget: {}", self.observed_budget);
        let _ = writeln!(
            s,
            "margin budget: {} (used {})",
            self.margin_budget,
            self.margin_funded_count()
        );
        let _ = writeln!(s, "verdict: {}", self.verdict);
        for c in &self.per_coefficient {
            let class = match &c.class {
                CoeffClass::ObservableTogether => "observable-together".to_string(),
                CoeffClass::MarginFunded(v) => format!("margin-funded[{v}]"),
                CoeffClass::Unfunded => "UNFUNDED".to_string(),
            };
            let _ = writeln!(s, "  {:<40} {}", c.name, class);
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

use std::fmt::Write as _;

/// Classify every free parameter and produce the identification verdict.
/// Always returns a report, even for invalid or overparameterized specs.
pub fn count_identification(
    spec: &SequenceSpec,
    schema: &VariableSchema,
    margins: &[AuxiliaryMargin],
    data: &MissingnessSummary,
) -> IdentificationReport {
    let mut warnings = Vec::new();

    // Margin budgets: levels − 1 units per margin variable.
    let mut pool: Vec<Option<usize>> = vec![None; schema.len()];
    let mut margin_budget = 0usize;
    for m in margins {
        if let Some(id) = schema.lookup(&m.variable) {
            let b = schema.var(id).n_levels() - 1;
            pool[id.0] = Some(b);
            margin_budget += b;
        }
    }

    let mut per_coefficient = Vec::new();

    // Saturated head: estimable from complete cases.
    if !spec.head_vars.is_empty() {
        let cells: usize = spec
            .head_vars
            .iter()
            .map(|v| schema.var(*v).n_levels())
            .product();
        let class = if data.complete_cases > 0 {
            CoeffClass::ObservableTogether
        } else {
            CoeffClass::Unfunded
        };
        for j in 0..cells - 1 {
            per_coefficient.push(CoeffReport {
                group: "head".to_string(),
                name: format!("head:cell{}", j + 1),
                class: class.clone(),
            });
        }
    }

    let classify_model = |m: &ConditionalModelSpec,
                              pool: &mut Vec<Option<usize>>,
                              per_coefficient: &mut Vec<CoeffReport>,
                              warnings: &mut Vec<String>| {
        let label = m.outcome.label(schema);
        for a in 0..m.predictor.cutpoint_count {
            per_coefficient.push(CoeffReport {
                group: format!("{label}:cutpoints"),
                name: format!("{label}:cut{}", a + 1),
                class: CoeffClass::ObservableTogether,
            });
        }
        for t in &m.predictor.terms {
            let group = format!("{label}:{}", t.label(schema));
            let needs_funding: Option<VarId> = match m.outcome {
                // Survey-block regressions are estimable from complete cases.
                Outcome::Var(_) => None,
                // Unit model: survey-variable terms are never observed
                // together with U = 1 unless the variable is on every row.
                Outcome::Unit => {
                    let missing_vars: Vec<VarId> = t
                        .vars()
                        .into_iter()
                        .filter(|v| !data.always_observed(*v))
                        .collect();
                    match t {
                        Term::Interaction(..) if !missing_vars.is_empty() => {
                            warnings.push(format!(
                                "interaction term {group} requires margin funding; each expanded \
                                 coefficient consumes one budget unit"
                            ));
                        }
                        _ => {}
                    }
                    missing_vars.first().copied()
                }
                // Item model: only the direct relationship between the
                // variable and its own indicator needs auxiliary funding.
                Outcome::Item(w) => {
                    if t.vars().contains(&w) {
                        Some(w)
                    } else {
                        None
                    }
                }
            };
            for j in 0..t.width(schema) {
                let name = format!("{label}:{}", t.coeff_label(schema, j));
                let class = match needs_funding {
                    None => CoeffClass::ObservableTogether,
                    Some(v) => match &mut pool[v.0] {
                        Some(b) if *b > 0 => {
                            *b -= 1;
                            CoeffClass::MarginFunded(schema.var(v).name.clone())
                        }
                        _ => CoeffClass::Unfunded,
                    },
                };
                per_coefficient.push(CoeffReport {
                    group: group.clone(),
                    name,
                    class,
                });
            }
        }
    };

    for m in &spec.survey_models {
        classify_model(m, &mut pool, &mut per_coefficient, &mut warnings);
    }
    classify_model(&spec.unit_model, &mut pool, &mut per_coefficient, &mut warnings);
    for m in &spec.item_models {
        classify_model(m, &mut pool, &mut per_coefficient, &mut warnings);
    }

    let observed_budget = per_coefficient
        .iter()
        .filter(|c| c.class == CoeffClass::ObservableTogether)
        .count();
    let any_unfunded = per_coefficient.iter().any(|c| c.class == CoeffClass::Unfunded);
    IdentificationReport {
        free_parameter_count: spec.free_parameter_count(schema),
        observed_budget,
        margin_budget,
        per_coefficient,
        verdict: if any_unfunded {
            Verdict::Overparameterized
        } else {
            Verdict::Identified
        },
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CategoricalVariable;

    fn two_binary() -> VariableSchema {
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
        .unwrap()
    }

    fn binary_margins() -> Vec<AuxiliaryMargin> {
        vec![
            AuxiliaryMargin::new("x1", vec![0.4, 0.6]).unwrap(),
            AuxiliaryMargin::new("x2", vec![0.7, 0.3]).unwrap(),
        ]
    }

    fn cps_schema() -> VariableSchema {
        VariableSchema::new(vec![
            CategoricalVariable {
                name: "state".into(),
                levels: vec!["FL".into(), "GA".into(), "NC".into(), "SC".into()],
                role: VarRole::Y,
                ordinal: false,
                always_observed: true,
            },
            CategoricalVariable {
                name: "sex".into(),
                levels: vec!["M".into(), "F".into()],
                role: VarRole::Y,
                ordinal: false,
                always_observed: false,
            },
            CategoricalVariable {
                name: "age".into(),
                levels: vec!["18-29".into(), "30-49".into(), "50-69".into(), "70+".into()],
                role: VarRole::X,
                ordinal: true,
                always_observed: false,
            },
            CategoricalVariable {
                name: "vote".into(),
                levels: vec!["0".into(), "1".into()],
                role: VarRole::X,
                ordinal: false,
                always_observed: false,
            },
        ])
        .unwrap()
    }

    fn cps_margins() -> Vec<AuxiliaryMargin> {
        vec![
            AuxiliaryMargin::new("age", vec![0.21, 0.35, 0.30, 0.14]).unwrap(),
            AuxiliaryMargin::new("vote", vec![0.38, 0.62]).unwrap(),
        ]
    }

    #[test]
    fn mcar_icin_structure() {
        let schema = two_binary();
        let spec = named_model(NamedModel::McarIcin, &schema).unwrap();
        assert_eq!(spec.unit_model.predictor.terms, vec![Term::Intercept]);
        assert_eq!(
            spec.item_models[0].predictor.terms,
            vec![Term::Intercept, Term::Main(VarId(1))]
        );
        assert_eq!(
            spec.item_models[1].predictor.terms,
            vec![Term::Intercept, Term::Main(VarId(0))]
        );
        assert_eq!(spec.free_parameter_count(&schema), 8);
    }

    #[test]
    fn an_u_structure() {
        let schema = two_binary();
        let spec = named_model(NamedModel::AnU, &schema).unwrap();
        assert_eq!(
            spec.unit_model.predictor.terms,
            vec![Term::Intercept, Term::Main(VarId(0)), Term::Main(VarId(1))]
        );
        assert_eq!(spec.free_parameter_count(&schema), 10);
        assert!(spec.margin_allocation.contains(&VarId(0)));
        assert!(spec.margin_allocation.contains(&VarId(1)));
    }

    #[test]
    fn md_u_uses_vote_in_unit_model_only() {
        let schema = cps_schema();
        let vote = schema.lookup("vote").unwrap();
        let spec = named_model(NamedModel::MdU, &schema).unwrap();
        assert!(spec.unit_model.predictor.referenced_vars().contains(&vote));
        let rv = spec.item_model(vote).unwrap();
        assert!(!rv.predictor.referenced_vars().contains(&vote));
        let spec_r = named_model(NamedModel::MdR, &schema).unwrap();
        assert!(!spec_r.unit_model.predictor.referenced_vars().contains(&vote));
        assert!(spec_r
            .item_model(vote)
            .unwrap()
            .predictor
            .referenced_vars()
            .contains(&vote));
    }

    #[test]
    fn identification_mcar_icin_eight_observable() {
        let schema = two_binary();
        let spec = named_model(NamedModel::McarIcin, &schema).unwrap();
        let sum = MissingnessSummary::worst_case(&schema);
        let rep = count_identification(&spec, &schema, &binary_margins(), &sum);
        assert_eq!(rep.free_parameter_count, 8);
        assert_eq!(rep.observed_budget, 8);
        assert_eq!(rep.margin_funded_count(), 0);
        assert_eq!(rep.verdict, Verdict::Identified);
        // Stays identified with no margins at all.
        let rep0 = count_identification(&spec, &schema, &[], &sum);
        assert_eq!(rep0.verdict, Verdict::Identified);
    }

    #[test]
    fn identification_an_u_funds_unit_terms() {
        let schema = two_binary();
        let spec = named_model(NamedModel::AnU, &schema).unwrap();
        let sum = MissingnessSummary::worst_case(&schema);
        let rep = count_identification(&spec, &schema, &binary_margins(), &sum);
        assert_eq!(rep.free_parameter_count, 10);
        assert_eq!(rep.margin_funded_count(), 2);
        assert_eq!(rep.verdict, Verdict::Identified);
        let funded: Vec<&str> = rep
            .per_coefficient
            .iter()
            .filter(|c| matches!(c.class, CoeffClass::MarginFunded(_)))
            .map(|c| c.name.as_str())
            .collect();
        assert_eq!(funded, vec!["U:x1=1", "U:x2=1"]);
        // Removing the margins breaks identification.
        let rep0 = count_identification(&spec, &schema, &[], &sum);
        assert_eq!(rep0.verdict, Verdict::Overparameterized);
    }

    #[test]
    fn identification_an_everything_two_unfunded() {
        let schema = two_binary();
        let (x1, x2) = (VarId(0), VarId(1));
        let spec = SequenceSpec {
            head_vars: vec![x1, x2],
            survey_models: vec![],
            unit_model: ConditionalModelSpec::bernoulli(
                Outcome::Unit,
                vec![Term::Intercept, Term::Main(x1), Term::Main(x2)],
            ),
            item_models: vec![
                ConditionalModelSpec::bernoulli(
                    Outcome::Item(x1),
                    vec![Term::Intercept, Term::Main(x2), Term::Main(x1)],
                ),
                ConditionalModelSpec::bernoulli(
                    Outcome::Item(x2),
                    vec![Term::Intercept, Term::Main(x1), Term::Main(x2)],
                ),
            ],
            margin_allocation: [x1, x2].into_iter().collect(),
        };
        let sum = MissingnessSummary::worst_case(&schema);
        let rep = count_identification(&spec, &schema, &binary_margins(), &sum);
        assert_eq!(rep.free_parameter_count, 12);
        assert_eq!(rep.unfunded().len(), 2);
        assert_eq!(rep.verdict, Verdict::Overparameterized);
    }

    #[test]
    fn identification_named_models_with_and_without_margins() {
        let schema = two_binary();
        let sum = MissingnessSummary::worst_case(&schema);
        for name in [
            NamedModel::McarIcin,
            NamedModel::AnR,
            NamedModel::AnU,
            NamedModel::AnRx1,
            NamedModel::AnRx2,
        ] {
            let spec = named_model(name, &schema).unwrap();
            let rep = count_identification(&spec, &schema, &binary_margins(), &sum);
            assert_eq!(rep.verdict, Verdict::Identified, "{name} with margins");
            let rep0 = count_identification(&spec, &schema, &[], &sum);
            let expect = if name == NamedModel::McarIcin {
                Verdict::Identified
            } else {
                Verdict::Overparameterized
            };
            assert_eq!(rep0.verdict, expect, "{name} without margins");
        }
        let cps = cps_schema();
        let cps_sum = MissingnessSummary::worst_case(&cps);
        for name in [NamedModel::MdR, NamedModel::MdU] {
            let spec = named_model(name, &cps).unwrap();
            let rep = count_identification(&spec, &cps, &cps_margins(), &cps_sum);
            assert_eq!(rep.verdict, Verdict::Identified, "{name} with margins");
            assert_eq!(rep.margin_funded_count(), 4, "{name} funded count");
            let rep0 = count_identification(&spec, &cps, &[], &cps_sum);
            assert_eq!(rep0.verdict, Verdict::Overparameterized, "{name} no margins");
        }
    }

    #[test]
    fn identification_invariant_to_level_relabeling() {
        let mut schema_vars = vec![
            CategoricalVariable {
                name: "x1".into(),
                levels: vec!["no".into(), "yes".into()],
                role: VarRole::X,
                ordinal: false,
                always_observed: false,
            },
            CategoricalVariable {
                name: "x2".into(),
                levels: vec!["lo".into(), "hi".into()],
                role: VarRole::X,
                ordinal: false,
                always_observed: false,
            },
        ];
        let schema = VariableSchema::new(schema_vars.clone()).unwrap();
        let spec = named_model(NamedModel::AnU, &schema).unwrap();
        let sum = MissingnessSummary::worst_case(&schema);
        let margins = vec![
            AuxiliaryMargin::new("x1", vec![0.4, 0.6]).unwrap(),
            AuxiliaryMargin::new("x2", vec![0.7, 0.3]).unwrap(),
        ];
        let rep = count_identification(&spec, &schema, &margins, &sum);
        // Same structure with different labels.
        schema_vars[0].levels = vec!["A".into(), "B".into()];
        schema_vars[1].levels = vec!["C".into(), "D".into()];
        let schema2 = VariableSchema::new(schema_vars).unwrap();
        let spec2 = named_model(NamedModel::AnU, &schema2).unwrap();
        let rep2 = count_identification(&spec2, &schema2, &margins, &sum);
        let classes: Vec<&CoeffClass> = rep.per_coefficient.iter().map(|c| &c.class).collect();
        let classes2: Vec<&CoeffClass> = rep2.per_coefficient.iter().map(|c| &c.class).collect();
        assert_eq!(classes, classes2);
        assert_eq!(rep.verdict, rep2.verdict);
    }

    #[test]
    fn validate_md_r_is_valid() {
        let schema = cps_schema();
        let spec = named_model(NamedModel::MdR, &schema).unwrap();
        let rep = validate_sequence(&spec, &schema, &cps_margins(), None);
        assert!(rep.is_valid(), "errors: {:?}", rep.errors);
    }

    #[test]
    fn validate_double_allocation_is_an_error() {
        let schema = cps_schema();
        let mut spec = named_model(NamedModel::MdU, &schema).unwrap();
        // Also put vote into its own indicator model.
        let vote = schema.lookup("vote").unwrap();
        for m in &mut spec.item_models {
            if m.outcome == Outcome::Item(vote) {
                m.predictor.terms.push(Term::Main(vote));
            }
        }
        let rep = validate_sequence(&spec, &schema, &cps_margins(), None);
        assert!(!rep.is_valid());
        assert!(rep.errors.iter().any(|e| e.contains("double allocation")));
    }

    #[test]
    fn validate_item_order_warning() {
        let schema = cps_schema();
        let spec = named_model(NamedModel::MdR, &schema).unwrap();
        // R_sex (no margin) precedes R_age/R_vote (margins): warn.
        let rep = validate_sequence(&spec, &schema, &cps_margins(), None);
        assert!(rep
            .warnings
            .iter()
            .any(|w| w.contains("margins")));
    }

    #[test]
    fn validate_self_term_without_margin_is_an_error() {
        let schema = two_binary();
        let spec = named_model(NamedModel::AnR, &schema).unwrap();
        let only_x2 = vec![AuxiliaryMargin::new("x2", vec![0.7, 0.3]).unwrap()];
        let rep = validate_sequence(&spec, &schema, &only_x2, None);
        assert!(!rep.is_valid());
        assert!(rep
            .errors
            .iter()
            .any(|e| e.contains("no margin funds it") || e.contains("expects an auxiliary margin")));
    }

    #[test]
    fn linear_predictor_zero_coeffs_is_zero() {
        let schema = two_binary();
        let p = LinearPredictorSpec::with_terms(vec![Term::Intercept, Term::Main(VarId(1))]);
        let lp = linear_predictor(&schema, &p, &[0.0, 0.0], &[0, 1], None).unwrap();
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn linear_predictor_simple_logit() {
        // Intercept −1, x2 slope 0.5, record with x2 = 1 gives −0.5.
        let schema = two_binary();
        let p = LinearPredictorSpec::with_terms(vec![Term::Intercept, Term::Main(VarId(1))]);
        let lp = linear_predictor(&schema, &p, &[-1.0, 0.5], &[0, 1], None).unwrap();
        assert!((lp - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn linear_predictor_matches_hand_expansion() {
        // Layout: intercept, state (3 dummies), age (3 dummies), sex,
        // state*age (9 dummies). Record: state=GA, age=30-49, sex=F.
        // Hand expansion: 0.3 + (-0.25) + 0.7 + 0.15 + (-0.4) = 0.5.
        let schema = cps_schema();
        let (s, g, a) = (
            schema.lookup("state").unwrap(),
            schema.lookup("sex").unwrap(),
            schema.lookup("age").unwrap(),
        );
        let p = LinearPredictorSpec::with_terms(vec![
            Term::Intercept,
            Term::Main(s),
            Term::Main(a),
            Term::Main(g),
            Term::Interaction(s, a),
        ]);
        assert_eq!(p.coeff_count(&schema), 1 + 3 + 3 + 1 + 9);
        let mut coeffs = vec![0.0; 17];
        coeffs[0] = 0.3; // intercept
        coeffs[1] = -0.25; // state=GA
        coeffs[4] = 0.7; // age=30-49
        coeffs[7] = 0.15; // sex=F
        coeffs[8 + 0 * 3 + 0] = -0.4; // state=GA : age=30-49
        let values = [1u8, 1, 1, 0]; // GA, F, 30-49, vote=0 (unused)
        let lp = linear_predictor(&schema, &p, &coeffs, &values, None).unwrap();
        assert!((lp - 0.5).abs() < 1e-15, "lp = {lp}");
    }

    #[test]
    fn linear_predictor_length_mismatch_is_an_error() {
        let schema = two_binary();
        let p = LinearPredictorSpec::with_terms(vec![Term::Intercept, Term::Main(VarId(1))]);
        assert!(linear_predictor(&schema, &p, &[0.0], &[0, 1], None).is_err());
    }

    #[test]
    fn mechanism_tags_for_md_r() {
        let schema = cps_schema();
        let spec = named_model(NamedModel::MdR, &schema).unwrap();
        let tags = spec.mechanism_tags(&schema);
        let get = |label: &str| tags.iter().find(|(l, _)| l == label).unwrap().1;
        assert_eq!(get("U"), Mechanism::An); // age margin in the unit model
        assert_eq!(get("R_sex"), Mechanism::Cmar); // state only
        assert_eq!(get("R_age"), Mechanism::Icin); // no self-term
        assert_eq!(get("R_vote"), Mechanism::An); // self-term via vote margin
    }
}
