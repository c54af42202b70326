//! Ground-truth generators and exact oracles: the two-binary scenario with
//! its 32-cell enumeration table, a forward simulator for arbitrary fitted
//! models, and a survey-style generator whose coefficients are tuned by
//! root-finding so the implied margins and nonresponse rates hit published
//! calibration targets. Tuned coefficient sets are build artifacts shipped
//! as fixtures, never claimed as externally reported values.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    AuxiliaryMargin, CategoricalVariable, SurveyDataset, SurveyRecord, VarId, VarRole,
    VariableSchema, MISSING,
};
use crate::error::{Error, Result};
use crate::numeric::sigmoid;
use crate::rng::{stream_rng, STREAM_SIMULATE};
use crate::sampler::ParameterState;
use crate::spec::{named_model, ConditionalModelSpec, Family, NamedModel, Outcome, SequenceSpec};

// ---------------------------------------------------------------------------
// Two-binary scenario
// ---------------------------------------------------------------------------

/// Schema for the two-binary scenario, both variables carrying margins.
pub fn scenario_schema() -> Arc<VariableSchema> {
    scenario_schema_with_roles(VarRole::X)
}

/// Two-binary schema without margin roles (for fits that use no margins).
pub fn scenario_schema_unmargined() -> Arc<VariableSchema> {
    scenario_schema_with_roles(VarRole::Y)
}

fn scenario_schema_with_roles(role: VarRole) -> Arc<VariableSchema> {
    Arc::new(
        VariableSchema::new(
            ["x1", "x2"]
                .into_iter()
                .map(|name| CategoricalVariable {
                    name: name.to_string(),
                    levels: vec!["0".to_string(), "1".to_string()],
                    role,
                    ordinal: false,
                    always_observed: false,
                })
                .collect(),
        )
        .expect("static schema"),
    )
}

/// Logistic selection model on (x1, x2): logit p = intercept + c1 x1 + c2 x2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSel {
    pub intercept: f64,
    pub x1: f64,
    pub x2: f64,
}

impl BinSel {
    pub fn prob(&self, x1: u8, x2: u8) -> f64 {
        sigmoid(self.intercept + self.x1 * f64::from(x1) + self.x2 * f64::from(x2))
    }
}

/// Generating truth for the two-binary scenario: the survey joint over
/// (x1, x2) in cell order (0,0),(0,1),(1,0),(1,1), plus logistic models for
/// U, R1 and R2. Named specifications fix some coefficients at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    pub survey_joint: [f64; 4],
    pub unit: BinSel,
    pub r1: BinSel,
    pub r2: BinSel,
}

impl ScenarioTruth {
    /// All selection probabilities 1/2 and a uniform survey joint.
    pub fn uniform_null() -> Self {
        ScenarioTruth {
            survey_joint: [0.25; 4],
            unit: BinSel { intercept: 0.0, x1: 0.0, x2: 0.0 },
            r1: BinSel { intercept: 0.0, x1: 0.0, x2: 0.0 },
            r2: BinSel { intercept: 0.0, x1: 0.0, x2: 0.0 },
        }
    }

    /// U intercept-only; R1 on x2; R2 on x1.
    pub fn named_mcar_icin(joint: [f64; 4], eta0: f64, zeta: [f64; 2], gamma: [f64; 2]) -> Self {
        ScenarioTruth {
            survey_joint: joint,
            unit: BinSel { intercept: eta0, x1: 0.0, x2: 0.0 },
            r1: BinSel { intercept: zeta[0], x1: 0.0, x2: zeta[1] },
            r2: BinSel { intercept: gamma[0], x1: gamma[1], x2: 0.0 },
        }
    }

    /// U on both variables (eta = [intercept, x1, x2]); item models as in
    /// the MCAR+ICIN default.
    pub fn named_an_u(joint: [f64; 4], eta: [f64; 3], zeta: [f64; 2], gamma: [f64; 2]) -> Self {
        ScenarioTruth {
            survey_joint: joint,
            unit: BinSel { intercept: eta[0], x1: eta[1], x2: eta[2] },
            r1: BinSel { intercept: zeta[0], x1: 0.0, x2: zeta[1] },
            r2: BinSel { intercept: gamma[0], x1: gamma[1], x2: 0.0 },
        }
    }

    /// U intercept-only (eta0); both item models carry their own variable
    /// (zeta = [intercept, x2, x1(self)], gamma = [intercept, x1, x2(self)]).
    pub fn named_an_r(joint: [f64; 4], eta0: f64, zeta: [f64; 3], gamma: [f64; 3]) -> Self {
        ScenarioTruth {
            survey_joint: joint,
            unit: BinSel { intercept: eta0, x1: 0.0, x2: 0.0 },
            r1: BinSel { intercept: zeta[0], x1: zeta[2], x2: zeta[1] },
            r2: BinSel { intercept: gamma[0], x1: gamma[1], x2: gamma[2] },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.survey_joint.iter().any(|&p| p < 0.0) {
            return Err(Error::validation("survey joint has negative cells"));
        }
        let sum: f64 = self.survey_joint.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("survey joint sums to {sum}")));
        }
        Ok(())
    }

    /// Map the truth onto the coefficient layout of a named two-binary
    /// specification; errors if the truth has nonzero coefficients the
    /// specification does not carry.
    pub fn params_for(&self, spec: &SequenceSpec, schema: &VariableSchema) -> Result<ParameterState> {
        self.validate()?;
        let x1 = schema.require("x1")?;
        let x2 = schema.require("x2")?;
        let mut coeffs = Vec::new();
        let sels: Vec<&ConditionalModelSpec> = std::iter::once(&spec.unit_model)
            .chain(spec.item_models.iter())
            .collect();
        if !spec.survey_models.is_empty() || spec.head_vars != vec![x1, x2] {
            return Err(Error::validation("spec is not a two-binary head specification"));
        }
        for m in sels {
            let sel = match m.outcome {
                Outcome::Unit => &self.unit,
                Outcome::Item(v) if v == x1 => &self.r1,
                Outcome::Item(v) if v == x2 => &self.r2,
                _ => return Err(Error::validation("unexpected outcome in scenario spec")),
            };
            let mut c = Vec::new();
            let mut used_x1 = false;
            let mut used_x2 = false;
            for t in &m.predictor.terms {
                match t {
                    crate::spec::Term::Intercept => c.push(sel.intercept),
                    crate::spec::Term::Main(v) if *v == x1 => {
                        c.push(sel.x1);
                        used_x1 = true;
                    }
                    crate::spec::Term::Main(v) if *v == x2 => {
                        c.push(sel.x2);
                        used_x2 = true;
                    }
                    _ => return Err(Error::validation("unexpected term in scenario spec")),
                }
            }
            if (!used_x1 && sel.x1 != 0.0) || (!used_x2 && sel.x2 != 0.0) {
                return Err(Error::validation(
                    "truth has a coefficient the specification does not carry",
                ));
            }
            coeffs.push(c);
        }
        Ok(ParameterState {
            head: self.survey_joint.to_vec(),
            coeffs,
        })
    }
}

/// Exact joint probabilities over the 32 configurations of
/// (x1, x2, r1, r2, u).
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub probs: [f64; 32],
}

/// The eight observed-data probabilities estimable without margins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedProbs {
    pub p: f64,
    pub s0: f64,
    pub q00: f64,
    pub q10: f64,
    pub pi000: f64,
    pub pi100: f64,
    pub theta0000: f64,
    pub theta1000: f64,
}

impl JointTable {
    pub fn idx(x1: u8, x2: u8, r1: u8, r2: u8, u: u8) -> usize {
        ((((x1 as usize * 2 + x2 as usize) * 2 + r1 as usize) * 2) + r2 as usize) * 2 + u as usize
    }

    pub fn prob(&self, x1: u8, x2: u8, r1: u8, r2: u8, u: u8) -> f64 {
        self.probs[Self::idx(x1, x2, r1, r2, u)]
    }

    pub fn sum_where(&self, pred: impl Fn(u8, u8, u8, u8, u8) -> bool) -> f64 {
        let mut s = 0.0;
        for x1 in 0..2u8 {
            for x2 in 0..2u8 {
                for r1 in 0..2u8 {
                    for r2 in 0..2u8 {
                        for u in 0..2u8 {
                            if pred(x1, x2, r1, r2, u) {
                                s += self.prob(x1, x2, r1, r2, u);
                            }
                        }
                    }
                }
            }
        }
        s
    }

    /// (Pr(x1 = 1), Pr(x2 = 1)).
    pub fn margins(&self) -> (f64, f64) {
        (
            self.sum_where(|x1, _, _, _, _| x1 == 1),
            self.sum_where(|_, x2, _, _, _| x2 == 1),
        )
    }

    /// The eight observed-data probabilities by exact conditioning.
    pub fn observed_probs(&self) -> ObservedProbs {
        let cond = |num: &dyn Fn(u8, u8, u8, u8, u8) -> bool,
                    den: &dyn Fn(u8, u8, u8, u8, u8) -> bool| {
            self.sum_where(num) / self.sum_where(den)
        };
        ObservedProbs {
            p: self.sum_where(|_, _, _, _, u| u == 1),
            s0: cond(&|_, _, r1, _, u| r1 == 1 && u == 0, &|_, _, _, _, u| u == 0),
            q00: cond(
                &|_, _, r1, r2, u| r2 == 1 && r1 == 0 && u == 0,
                &|_, _, r1, _, u| r1 == 0 && u == 0,
            ),
            q10: cond(
                &|_, _, r1, r2, u| r2 == 1 && r1 == 1 && u == 0,
                &|_, _, r1, _, u| r1 == 1 && u == 0,
            ),
            pi000: cond(
                &|x1, _, r1, r2, u| x1 == 1 && r2 == 0 && r1 == 0 && u == 0,
                &|_, _, r1, r2, u| r2 == 0 && r1 == 0 && u == 0,
            ),
            pi100: cond(
                &|x1, _, r1, r2, u| x1 == 1 && r2 == 1 && r1 == 0 && u == 0,
                &|_, _, r1, r2, u| r2 == 1 && r1 == 0 && u == 0,
            ),
            theta0000: cond(
                &|x1, x2, r1, r2, u| x2 == 1 && x1 == 0 && r2 == 0 && r1 == 0 && u == 0,
                &|x1, _, r1, r2, u| x1 == 0 && r2 == 0 && r1 == 0 && u == 0,
            ),
            theta1000: cond(
                &|x1, x2, r1, r2, u| x2 == 1 && x1 == 1 && r2 == 0 && r1 == 0 && u == 0,
                &|x1, _, r1, r2, u| x1 == 1 && r2 == 0 && r1 == 0 && u == 0,
            ),
        }
    }
}

/// Exact product of the survey joint and the three selection models over
/// all 32 configurations.
pub fn enumerate_joint(truth: &ScenarioTruth) -> JointTable {
    let mut probs = [0.0f64; 32];
    for x1 in 0..2u8 {
        for x2 in 0..2u8 {
            let f = truth.survey_joint[(x1 * 2 + x2) as usize];
            let pu = truth.unit.prob(x1, x2);
            let p1 = truth.r1.prob(x1, x2);
            let p2 = truth.r2.prob(x1, x2);
            for r1 in 0..2u8 {
                for r2 in 0..2u8 {
                    for u in 0..2u8 {
                        let pr = f
                            * if u == 1 { pu } else { 1.0 - pu }
                            * if r1 == 1 { p1 } else { 1.0 - p1 }
                            * if r2 == 1 { p2 } else { 1.0 - p2 };
                        probs[JointTable::idx(x1, x2, r1, r2, u)] = pr;
                    }
                }
            }
        }
    }
    JointTable { probs }
}

/// Exact margins (Pr(x1=1), Pr(x2=1)) implied by a truth.
pub fn implied_margins(truth: &ScenarioTruth) -> (f64, f64) {
    enumerate_joint(truth).margins()
}

/// Margins of a truth packaged for augmentation.
pub fn implied_margin_list(truth: &ScenarioTruth) -> Vec<AuxiliaryMargin> {
    let (m1, m2) = implied_margins(truth);
    vec![
        AuxiliaryMargin::new("x1", vec![1.0 - m1, m1]).expect("valid margin"),
        AuxiliaryMargin::new("x2", vec![1.0 - m2, m2]).expect("valid margin"),
    ]
}

/// Draw `n` records i.i.d. from the joint; unit nonrespondents lose all
/// values and indicators, item nonresponse blanks the corresponding value.
pub fn generate_scenario(truth: &ScenarioTruth, n: usize, seed: u64) -> SurveyDataset {
    let schema = scenario_schema();
    let table = enumerate_joint(truth);
    let mut rng = stream_rng(seed, STREAM_SIMULATE);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let cell = sample_index(&table.probs, &mut rng);
        let u = (cell & 1) as u8;
        let r2 = ((cell >> 1) & 1) as u8;
        let r1 = ((cell >> 2) & 1) as u8;
        let x2 = ((cell >> 3) & 1) as u8;
        let x1 = ((cell >> 4) & 1) as u8;
        if u == 1 {
            records.push(SurveyRecord::unit_nonrespondent(vec![MISSING, MISSING]));
        } else {
            let v1 = if r1 == 1 { MISSING } else { x1 };
            let v2 = if r2 == 1 { MISSING } else { x2 };
            records.push(SurveyRecord::respondent(vec![v1, v2]));
        }
    }
    SurveyDataset::new(schema, records).expect("generated records satisfy invariants")
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

// ---------------------------------------------------------------------------
// Forward simulation from a (spec, parameters) pair
// ---------------------------------------------------------------------------

/// Simulates complete records, unit status and indicators from a model
/// specification and a parameter snapshot. Used for data generation and for
/// posterior predictive replication.
pub struct ForwardModel<'a> {
    pub schema: &'a VariableSchema,
    pub spec: &'a SequenceSpec,
    pub params: &'a ParameterState,
}

impl<'a> ForwardModel<'a> {
    pub fn new(
        schema: &'a VariableSchema,
        spec: &'a SequenceSpec,
        params: &'a ParameterState,
    ) -> Result<Self> {
        let expected_head: usize = if spec.head_vars.is_empty() {
            0
        } else {
            spec.head_vars
                .iter()
                .map(|v| schema.var(*v).n_levels())
                .product()
        };
        if params.head.len() != expected_head {
            return Err(Error::validation("head dimension mismatch"));
        }
        let n_models = spec.survey_models.len() + 1 + spec.item_models.len();
        if params.coeffs.len() != n_models {
            return Err(Error::validation("coefficient slot mismatch"));
        }
        Ok(ForwardModel { schema, spec, params })
    }

    fn model_slot(&self, slot: usize) -> &ConditionalModelSpec {
        let ns = self.spec.survey_models.len();
        if slot < ns {
            &self.spec.survey_models[slot]
        } else if slot == ns {
            &self.spec.unit_model
        } else {
            &self.spec.item_models[slot - ns - 1]
        }
    }

    /// Success probability of the Bernoulli model in `slot` (survey models
    /// in sequence order, then the unit model, then item models) at a
    /// complete value vector.
    pub fn bernoulli_prob(&self, slot: usize, values: &[u8]) -> f64 {
        let m = self.model_slot(slot);
        let c = &self.params.coeffs[slot];
        sigmoid(m.predictor.slope(self.schema, &c[m.predictor.cutpoint_count..], values))
    }

    fn sample_model(&self, slot: usize, values: &mut [u8], rng: &mut ChaCha8Rng) {
        let m = self.model_slot(slot);
        let out = match m.outcome {
            Outcome::Var(v) => v,
            _ => unreachable!("survey slot"),
        };
        let c = &self.params.coeffs[slot];
        match m.family {
            Family::BernoulliLogit => {
                let p = self.bernoulli_prob(slot, values);
                values[out.0] = u8::from(rng.random::<f64>() < p);
            }
            Family::ProportionalOddsLogit => {
                let k = self.schema.var(out).n_levels();
                let ncut = m.predictor.cutpoint_count;
                let slope = m.predictor.slope(self.schema, &c[ncut..], values);
                let mut probs = Vec::with_capacity(k);
                let mut prev = 0.0;
                for a in 0..k {
                    let cum = if a + 1 == k {
                        1.0
                    } else {
                        sigmoid(c[a] + slope)
                    };
                    probs.push((cum - prev).max(0.0));
                    prev = cum;
                }
                values[out.0] = sample_index(&probs, rng) as u8;
            }
        }
    }

    /// Complete survey values, honoring `fixed` assignments.
    pub fn simulate_survey(&self, fixed: &[(VarId, u8)], rng: &mut ChaCha8Rng) -> Vec<u8> {
        let p = self.schema.len();
        let mut values = vec![MISSING; p];
        for &(v, l) in fixed {
            values[v.0] = l;
        }
        if !self.spec.head_vars.is_empty() {
            let all_fixed = self.spec.head_vars.iter().all(|v| values[v.0] != MISSING);
            if !all_fixed {
                // Sample the head cell conditional on any fixed head values.
                let dims: Vec<usize> = self
                    .spec
                    .head_vars
                    .iter()
                    .map(|v| self.schema.var(*v).n_levels())
                    .collect();
                let mut weights = Vec::with_capacity(self.params.head.len());
                let mut cells = Vec::with_capacity(self.params.head.len());
                for (ix, &pr) in self.params.head.iter().enumerate() {
                    let mut rest = ix;
                    let mut vals = vec![0u8; dims.len()];
                    for (j, &k) in dims.iter().enumerate().rev() {
                        vals[j] = (rest % k) as u8;
                        rest /= k;
                    }
                    let ok = self
                        .spec
                        .head_vars
                        .iter()
                        .zip(&vals)
                        .all(|(v, &l)| values[v.0] == MISSING || values[v.0] == l);
                    if ok {
                        weights.push(pr);
                        cells.push(vals);
                    }
                }
                let pick = sample_index(&weights, rng);
                for (v, &l) in self.spec.head_vars.iter().zip(&cells[pick]) {
                    values[v.0] = l;
                }
            }
        }
        for slot in 0..self.spec.survey_models.len() {
            let m = self.model_slot(slot);
            if let Outcome::Var(v) = m.outcome {
                if values[v.0] == MISSING {
                    self.sample_model(slot, &mut values, rng);
                }
            }
        }
        values
    }

    /// Simulate a full record: survey values, unit status, indicators with
    /// monotone forcing, and blanking.
    pub fn simulate_record(&self, fixed: &[(VarId, u8)], rng: &mut ChaCha8Rng) -> SurveyRecord {
        let values = self.simulate_survey(fixed, rng);
        let ns = self.spec.survey_models.len();
        let pu = self.bernoulli_prob(ns, &values);
        if rng.random::<f64>() < pu {
            let mut blanked = values;
            for (k, v) in self.schema.vars() {
                if !v.always_observed {
                    blanked[k.0] = MISSING;
                }
            }
            return SurveyRecord::unit_nonrespondent(blanked);
        }
        let mut indicator = vec![false; self.schema.len()];
        for (i, m) in self.spec.item_models.iter().enumerate() {
            let w = match m.outcome {
                Outcome::Item(w) => w,
                _ => continue,
            };
            let forced = m.monotone_parent.map(|p| indicator[p.0]).unwrap_or(false);
            let r = forced || {
                let slot = ns + 1 + i;
                rng.random::<f64>() < self.bernoulli_prob(slot, &values)
            };
            indicator[w.0] = r;
        }
        let mut blanked = values;
        for k in 0..self.schema.len() {
            if indicator[k] {
                blanked[k] = MISSING;
            }
        }
        SurveyRecord::respondent(blanked)
    }

    /// Item-nonresponse probability for `var` on complete values, with the
    /// monotone cascade folded in.
    pub fn item_missing_prob(&self, var: VarId, values: &[u8]) -> f64 {
        // Follow the item sequence accumulating P(missing).
        let ns = self.spec.survey_models.len();
        let mut p_missing: BTreeMap<usize, f64> = BTreeMap::new();
        let mut result = 0.0;
        for (i, m) in self.spec.item_models.iter().enumerate() {
            let w = match m.outcome {
                Outcome::Item(w) => w,
                _ => continue,
            };
            let base = self.bernoulli_prob(ns + 1 + i, values);
            let parent_missing = m
                .monotone_parent
                .map(|p| *p_missing.get(&p.0).unwrap_or(&0.0))
                .unwrap_or(0.0);
            let p = parent_missing + (1.0 - parent_missing) * base;
            p_missing.insert(w.0, p);
            if w == var {
                result = p;
            }
        }
        result
    }

    pub fn unit_prob(&self, values: &[u8]) -> f64 {
        self.bernoulli_prob(self.spec.survey_models.len(), values)
    }
}

// ---------------------------------------------------------------------------
// Survey-style (CPS-like) truths
// ---------------------------------------------------------------------------

/// Standard 4-variable survey schema: an always-observed stratum, a binary
/// demographic, an ordinal age group with a margin, and a binary outcome
/// with a margin.
pub fn cps_schema(state_labels: &[String]) -> Arc<VariableSchema> {
    Arc::new(
        VariableSchema::new(vec![
            CategoricalVariable {
                name: "state".into(),
                levels: state_labels.to_vec(),
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
        .expect("static schema"),
    )
}

/// A tuned survey-style generating truth: variant (which named model shape
/// generated the nonresponse), per-state respondent targets, the state head
/// (person shares) and one coefficient vector per model label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpsTruth {
    pub variant: String,
    pub state_labels: Vec<String>,
    pub state_sizes: Vec<usize>,
    pub head: Vec<f64>,
    pub models: BTreeMap<String, Vec<f64>>,
}

impl CpsTruth {
    pub fn schema(&self) -> Arc<VariableSchema> {
        cps_schema(&self.state_labels)
    }

    pub fn named(&self) -> Result<NamedModel> {
        NamedModel::parse(&self.variant)
    }

    pub fn spec(&self, schema: &VariableSchema) -> Result<SequenceSpec> {
        named_model(self.named()?, schema)
    }

    pub fn params(&self, schema: &VariableSchema, spec: &SequenceSpec) -> Result<ParameterState> {
        let mut coeffs = Vec::new();
        for m in spec
            .survey_models
            .iter()
            .chain(std::iter::once(&spec.unit_model))
            .chain(spec.item_models.iter())
        {
            let label = m.outcome.label(schema);
            let c = self
                .models
                .get(&label)
                .ok_or_else(|| Error::validation(format!("truth lacks coefficients for '{label}'")))?;
            if c.len() != m.coeff_count(schema) {
                return Err(Error::validation(format!(
                    "truth coefficients for '{label}' have wrong length"
                )));
            }
            coeffs.push(c.clone());
        }
        Ok(ParameterState {
            head: self.head.clone(),
            coeffs,
        })
    }

    pub fn analytic(&self) -> Result<CpsAnalytic> {
        let schema = self.schema();
        let spec = self.spec(&schema)?;
        let params = self.params(&schema, &spec)?;
        Ok(CpsAnalytic {
            schema,
            spec,
            params,
            state_sizes: self.state_sizes.clone(),
        })
    }
}

/// Exact population quantities implied by a survey-style truth, computed by
/// summation over the joint support (no Monte Carlo).
pub struct CpsAnalytic {
    pub schema: Arc<VariableSchema>,
    pub spec: SequenceSpec,
    pub params: ParameterState,
    pub state_sizes: Vec<usize>,
}

impl CpsAnalytic {
    fn fm(&self) -> ForwardModel<'_> {
        ForwardModel {
            schema: &self.schema,
            spec: &self.spec,
            params: &self.params,
        }
    }

    fn n_states(&self) -> usize {
        self.schema.var(VarId(0)).n_levels()
    }

    /// Joint P(sex, age, vote | state) over the 16 cells (sex slowest).
    pub fn survey_table(&self, s: usize) -> Vec<f64> {
        let fm = self.fm();
        let mut out = Vec::with_capacity(16);
        for g in 0..2u8 {
            for a in 0..4u8 {
                for v in 0..2u8 {
                    let values = vec![s as u8, g, a, v];
                    let pg = {
                        let p1 = fm.bernoulli_prob(0, &values);
                        if g == 1 {
                            p1
                        } else {
                            1.0 - p1
                        }
                    };
                    // P(a|g,s) from the proportional-odds model.
                    let pa = {
                        let m = &self.spec.survey_models[1];
                        let c = &self.params.coeffs[1];
                        let ncut = m.predictor.cutpoint_count;
                        let slope = m.predictor.slope(&self.schema, &c[ncut..], &values);
                        let hi = if (a as usize) + 1 == 4 {
                            1.0
                        } else {
                            sigmoid(c[a as usize] + slope)
                        };
                        let lo = if a == 0 {
                            0.0
                        } else {
                            sigmoid(c[a as usize - 1] + slope)
                        };
                        (hi - lo).max(0.0)
                    };
                    let pv = {
                        let p1 = fm.bernoulli_prob(2, &values);
                        if v == 1 {
                            p1
                        } else {
                            1.0 - p1
                        }
                    };
                    out.push(pg * pa * pv);
                }
            }
        }
        out
    }

    fn cell_values(s: usize, cell: usize) -> [u8; 4] {
        let v = (cell % 2) as u8;
        let a = ((cell / 2) % 4) as u8;
        let g = (cell / 8) as u8;
        [s as u8, g, a, v]
    }

    /// P(U = 0 | state): share of persons who respond.
    pub fn respond_prob(&self, s: usize) -> f64 {
        let fm = self.fm();
        let table = self.survey_table(s);
        table
            .iter()
            .enumerate()
            .map(|(cell, p)| p * (1.0 - fm.unit_prob(&Self::cell_values(s, cell))))
            .sum()
    }

    pub fn unit_rate(&self, s: usize) -> f64 {
        1.0 - self.respond_prob(s)
    }

    /// Person-share weights per state implied by fixed respondent counts.
    pub fn person_weights(&self) -> Vec<f64> {
        let mut w: Vec<f64> = (0..self.n_states())
            .map(|s| self.state_sizes[s] as f64 / self.respond_prob(s))
            .collect();
        let tot: f64 = w.iter().sum();
        for x in &mut w {
            *x /= tot;
        }
        w
    }

    /// Population turnout P(vote=1 | state).
    pub fn turnout(&self, s: usize) -> f64 {
        self.survey_table(s)
            .iter()
            .enumerate()
            .filter(|(cell, _)| cell % 2 == 1)
            .map(|(_, p)| p)
            .sum()
    }

    /// Population turnout restricted to cells matching `(sex, age)` filters.
    pub fn subgroup_turnout(&self, s: usize, sex: Option<u8>, age: Option<u8>) -> f64 {
        let table = self.survey_table(s);
        let mut num = 0.0;
        let mut den = 0.0;
        for (cell, p) in table.iter().enumerate() {
            let vals = Self::cell_values(s, cell);
            if sex.is_some_and(|g| vals[1] != g) || age.is_some_and(|a| vals[2] != a) {
                continue;
            }
            den += p;
            if vals[3] == 1 {
                num += p;
            }
        }
        num / den
    }

    pub fn age_margin(&self, s: usize) -> Vec<f64> {
        let table = self.survey_table(s);
        let mut out = vec![0.0; 4];
        for (cell, p) in table.iter().enumerate() {
            out[Self::cell_values(s, cell)[2] as usize] += p;
        }
        out
    }

    /// Item nonresponse rate among respondents for `var` in a state.
    pub fn item_rate(&self, s: usize, var: VarId) -> f64 {
        let fm = self.fm();
        let table = self.survey_table(s);
        let mut num = 0.0;
        let mut den = 0.0;
        for (cell, p) in table.iter().enumerate() {
            let values = Self::cell_values(s, cell);
            let keep = 1.0 - fm.unit_prob(&values);
            den += p * keep;
            num += p * keep * fm.item_missing_prob(var, &values);
        }
        num / den
    }

    /// Pooled auxiliary margins (age, vote) over the person-weighted
    /// population.
    pub fn pooled_margins(&self) -> Vec<AuxiliaryMargin> {
        let w = self.person_weights();
        let mut age = vec![0.0; 4];
        let mut vote1 = 0.0;
        for s in 0..self.n_states() {
            for (a, m) in self.age_margin(s).iter().enumerate() {
                age[a] += w[s] * m;
            }
            vote1 += w[s] * self.turnout(s);
        }
        vec![
            AuxiliaryMargin::new("age", age).expect("valid margin"),
            AuxiliaryMargin::new("vote", vec![1.0 - vote1, vote1]).expect("valid margin"),
        ]
    }

    /// Pooled nonvoter share among unit nonrespondents.
    pub fn unit_nonvoter_share(&self) -> f64 {
        let fm = self.fm();
        let w = self.person_weights();
        let mut num = 0.0;
        let mut den = 0.0;
        for s in 0..self.n_states() {
            let table = self.survey_table(s);
            for (cell, p) in table.iter().enumerate() {
                let values = Self::cell_values(s, cell);
                let pu = fm.unit_prob(&values);
                den += w[s] * p * pu;
                if values[3] == 0 {
                    num += w[s] * p * pu;
                }
            }
        }
        num / den
    }

    /// Pooled nonvoter share among respondents missing the outcome item.
    pub fn item_nonvoter_share(&self) -> f64 {
        let fm = self.fm();
        let vote = self.schema.require("vote").expect("vote variable");
        let w = self.person_weights();
        let mut num = 0.0;
        let mut den = 0.0;
        for s in 0..self.n_states() {
            let table = self.survey_table(s);
            for (cell, p) in table.iter().enumerate() {
                let values = Self::cell_values(s, cell);
                let keep = 1.0 - fm.unit_prob(&values);
                let pm = fm.item_missing_prob(vote, &values);
                den += w[s] * p * keep * pm;
                if values[3] == 0 {
                    num += w[s] * p * keep * pm;
                }
            }
        }
        num / den
    }

    /// Complete-case turnout (all items observed, respondents only). Under
    /// the monotone cascade every item is observed exactly when the last
    /// item in the chain is, so P(complete) = 1 - P(outcome item missing).
    pub fn complete_case_turnout(&self, s: usize) -> f64 {
        let fm = self.fm();
        let vote = self.schema.require("vote").expect("vote");
        let table = self.survey_table(s);
        let mut num = 0.0;
        let mut den = 0.0;
        for (cell, p) in table.iter().enumerate() {
            let values = Self::cell_values(s, cell);
            let keep = 1.0 - fm.unit_prob(&values);
            let p_all = 1.0 - fm.item_missing_prob(vote, &values);
            den += p * keep * p_all;
            if values[3] == 1 {
                num += p * keep * p_all;
            }
        }
        num / den
    }
}

/// Generate a survey-style dataset with fixed respondent counts per state;
/// unit nonrespondents occur at the model's rate and are appended after the
/// respondent block. Also returns the exact pooled margins and population
/// estimand truths.
pub fn generate_cps_like(
    truth: &CpsTruth,
    seed: u64,
) -> Result<(SurveyDataset, Vec<AuxiliaryMargin>, CpsTrueEstimands)> {
    let analytic = truth.analytic()?;
    let schema = Arc::clone(&analytic.schema);
    let fm = ForwardModel {
        schema: &analytic.schema,
        spec: &analytic.spec,
        params: &analytic.params,
    };
    let state = VarId(0);
    let mut rng = stream_rng(seed, STREAM_SIMULATE);
    let mut respondents = Vec::new();
    let mut units = Vec::new();
    for (s, &size) in truth.state_sizes.iter().enumerate() {
        let mut got = 0usize;
        while got < size {
            let rec = fm.simulate_record(&[(state, s as u8)], &mut rng);
            if rec.is_unit_row() {
                units.push(rec);
            } else {
                respondents.push(rec);
                got += 1;
            }
        }
    }
    respondents.extend(units);
    let data = SurveyDataset::new(schema, respondents)?;
    let margins = analytic.pooled_margins();
    let estimands = CpsTrueEstimands::from_analytic(&analytic);
    Ok((data, margins, estimands))
}

/// Joint survey distribution over every schema cell implied by a parameter
/// snapshot: head probability times each survey regression's density. This
/// is the population law the margins calibrate; note the head is fitted on
/// augmented data, so unconditioned pooled quantities inherit the augmented
/// mix while conditionals within always-observed strata do not.
pub fn joint_survey_distribution(
    schema: &VariableSchema,
    spec: &SequenceSpec,
    params: &ParameterState,
) -> Result<Vec<f64>> {
    let fm = ForwardModel::new(schema, spec, params)?;
    let n = schema.joint_cells();
    let mut out = Vec::with_capacity(n);
    for ix in 0..n {
        let values = schema.cell_values(ix);
        let mut p = 1.0;
        if !spec.head_vars.is_empty() {
            let mut h = 0usize;
            for v in &spec.head_vars {
                h = h * schema.var(*v).n_levels() + values[v.0] as usize;
            }
            p *= params.head[h];
        }
        for (slot, m) in spec.survey_models.iter().enumerate() {
            let outv = match m.outcome {
                Outcome::Var(v) => v,
                _ => continue,
            };
            match m.family {
                Family::BernoulliLogit => {
                    let p1 = fm.bernoulli_prob(slot, &values);
                    p *= if values[outv.0] == 1 { p1 } else { 1.0 - p1 };
                }
                Family::ProportionalOddsLogit => {
                    let c = &params.coeffs[slot];
                    let ncut = m.predictor.cutpoint_count;
                    let slope = m.predictor.slope(schema, &c[ncut..], &values);
                    let level = values[outv.0] as usize;
                    let hi = if level + 1 == schema.var(outv).n_levels() {
                        1.0
                    } else {
                        sigmoid(c[level] + slope)
                    };
                    let lo = if level == 0 {
                        0.0
                    } else {
                        sigmoid(c[level - 1] + slope)
                    };
                    p *= (hi - lo).max(0.0);
                }
            }
        }
        out.push(p);
    }
    Ok(out)
}

/// Exact population estimands implied by a truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpsTrueEstimands {
    pub state_turnout: Vec<f64>,
    pub pooled_turnout: f64,
    pub unit_nonvoter_share: f64,
    pub item_nonvoter_share: f64,
    pub complete_case_turnout: Vec<f64>,
    pub unit_rates: Vec<f64>,
}

impl CpsTrueEstimands {
    fn from_analytic(a: &CpsAnalytic) -> Self {
        let w = a.person_weights();
        let states = a.state_sizes.len();
        let pooled = (0..states).map(|s| w[s] * a.turnout(s)).sum();
        CpsTrueEstimands {
            state_turnout: (0..states).map(|s| a.turnout(s)).collect(),
            pooled_turnout: pooled,
            unit_nonvoter_share: a.unit_nonvoter_share(),
            item_nonvoter_share: a.item_nonvoter_share(),
            complete_case_turnout: (0..states).map(|s| a.complete_case_turnout(s)).collect(),
            unit_rates: (0..states).map(|s| a.unit_rate(s)).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Truth tuning
// ---------------------------------------------------------------------------

/// Calibration targets for a survey-style truth. Rates are per state; the
/// tuner root-finds intercept-style coefficients so the truth's implied
/// quantities match.
#[derive(Debug, Clone)]
pub struct CpsTargets {
    pub variant: NamedModel,
    pub state_labels: Vec<String>,
    pub state_sizes: Vec<usize>,
    pub turnout_margins: Vec<f64>,
    pub age_margins: Vec<Vec<f64>>,
    pub unit_rates: Vec<f64>,
    pub vote_item_rates: Vec<f64>,
    pub age_item_rates: Vec<f64>,
    pub sex_item_rates: Vec<f64>,
    pub female_share: f64,
    /// Coefficient of the outcome in the margin-funded slot: the outcome
    /// term of its own item model (MD-R variants) or of the unit model
    /// (MD-U variants).
    pub an_coeff: f64,
    /// Outcome coefficient in the age item model (the identified
    /// cross-term).
    pub vote_in_age_item: f64,
}

impl CpsTargets {
    /// Desk-scale calibration targets mirroring the published survey
    /// application's rates and margins.
    pub fn published(variant: NamedModel, scale: f64) -> Self {
        let sizes = [5086usize, 2475, 2519, 1766];
        CpsTargets {
            variant,
            state_labels: vec!["FL".into(), "GA".into(), "NC".into(), "SC".into()],
            state_sizes: sizes
                .iter()
                .map(|&n| ((n as f64) * scale).round() as usize)
                .collect(),
            turnout_margins: vec![0.628, 0.590, 0.648, 0.563],
            age_margins: vec![
                vec![0.20, 0.33, 0.31, 0.16],
                vec![0.23, 0.39, 0.29, 0.09],
                vec![0.22, 0.37, 0.30, 0.11],
                vec![0.22, 0.34, 0.32, 0.12],
            ],
            unit_rates: vec![0.28, 0.21, 0.24, 0.25],
            vote_item_rates: vec![0.18, 0.16, 0.11, 0.10],
            age_item_rates: vec![0.07, 0.05, 0.03, 0.03],
            sex_item_rates: vec![0.0012, 0.0, 0.0, 0.0006],
            female_share: 0.52,
            an_coeff: match variant {
                // Nonvoters far likelier to skip the outcome item.
                NamedModel::MdR => -4.0,
                // Nonvoters likelier to skip the whole survey.
                _ => -1.6,
            },
            vote_in_age_item: -1.5,
        }
    }
}

fn bisect(mut lo: f64, mut hi: f64, target: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    // Assumes f increasing; clamps to the bracket if the target is outside.
    if f(lo) >= target {
        return lo;
    }
    if f(hi) <= target {
        return hi;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Root-find a survey-style truth hitting the calibration targets. The
/// demographic slopes are fixed plausible values; intercepts and per-state
/// offsets are tuned by bisection against exact analytic rates.
pub fn tune_cps_truth(targets: &CpsTargets) -> Result<CpsTruth> {
    let schema = cps_schema(&targets.state_labels);
    let spec = named_model(targets.variant, &schema)?;
    let states = targets.state_labels.len();
    let mdr = targets.variant == NamedModel::MdR;

    // Baseline coefficient vectors (zeros) in slot order.
    let slots: Vec<&ConditionalModelSpec> = spec
        .survey_models
        .iter()
        .chain(std::iter::once(&spec.unit_model))
        .chain(spec.item_models.iter())
        .collect();
    let mut models: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in &slots {
        models.insert(m.outcome.label(&schema), vec![0.0; m.coeff_count(&schema)]);
    }

    // sex | state: pooled female share, no state effect.
    models.get_mut("sex").unwrap()[0] = crate::numeric::logit(targets.female_share);

    // age | sex, state: layout [cut1..cut3, state dummies (3), sex].
    {
        let c = models.get_mut("age").unwrap();
        c[6] = 0.1; // mild sex effect
    }
    // vote | age, sex, state: [intercept, state(3), age(3), sex, state*age(9)].
    {
        let c = models.get_mut("vote").unwrap();
        c[4] = 0.85;
        c[5] = 1.35;
        c[6] = 1.55;
        c[7] = 0.18;
    }
    // unit model: [intercept, state(3), age(3)] (+ vote for MD-U variants).
    {
        let c = models.get_mut("U").unwrap();
        c[4] = -0.30;
        c[5] = -0.50;
        c[6] = -0.60;
        if !mdr {
            c[7] = targets.an_coeff;
        }
    }
    // R_age: [intercept, state(3), sex, vote].
    {
        let c = models.get_mut("R_age").unwrap();
        c[4] = 0.10;
        c[5] = targets.vote_in_age_item;
    }
    // R_vote: [intercept, state(3), age(3), sex] (+ vote for MD-R variants).
    {
        let c = models.get_mut("R_vote").unwrap();
        c[4] = -0.10;
        c[5] = -0.15;
        c[6] = -0.10;
        c[7] = -0.05;
        if mdr {
            c[8] = targets.an_coeff;
        }
    }

    let mut truth = CpsTruth {
        variant: targets.variant.name().to_string(),
        state_labels: targets.state_labels.clone(),
        state_sizes: targets.state_sizes.clone(),
        head: vec![1.0 / states as f64; states],
        models,
    };

    // State offset knob for layouts [intercept, state dummies, ...]: state 0
    // tunes the intercept, state s > 0 its dummy at index s.
    fn set_state_offset(c: &mut [f64], s: usize, value: f64) {
        c[s] = value;
    }

    // --- age cutpoints for state 0, then state dummies ---
    for a in 0..3 {
        let cum_target: f64 = targets.age_margins[0][..=a].iter().sum();
        let mut t = truth.clone();
        let cut = bisect(-15.0, 15.0, cum_target, |x| {
            t.models.get_mut("age").unwrap()[a] = x;
            let an = t.analytic().unwrap();
            an.age_margin(0)[..=a].iter().sum()
        });
        truth.models.get_mut("age").unwrap()[a] = cut;
    }
    for s in 1..states {
        // Match the cumulative share through the second level.
        let cum_target: f64 = targets.age_margins[s][..=1].iter().sum();
        let mut t = truth.clone();
        let vdum = bisect(-15.0, 15.0, cum_target, |x| {
            t.models.get_mut("age").unwrap()[3 + s - 1] = x;
            let an = t.analytic().unwrap();
            an.age_margin(s)[..=1].iter().sum()
        });
        truth.models.get_mut("age").unwrap()[3 + s - 1] = vdum;
    }

    // --- turnout intercept and state dummies ---
    for s in 0..states {
        let mut t = truth.clone();
        let val = bisect(-15.0, 15.0, targets.turnout_margins[s], |x| {
            let c = t.models.get_mut("vote").unwrap();
            set_state_offset(c, s, x);
            t.analytic().unwrap().turnout(s)
        });
        set_state_offset(truth.models.get_mut("vote").unwrap(), s, val);
    }

    // --- unit rates ---
    for s in 0..states {
        let mut t = truth.clone();
        let val = bisect(-15.0, 15.0, targets.unit_rates[s], |x| {
            let c = t.models.get_mut("U").unwrap();
            set_state_offset(c, s, x);
            t.analytic().unwrap().unit_rate(s)
        });
        set_state_offset(truth.models.get_mut("U").unwrap(), s, val);
    }

    // --- item rates: sex, then age (cascades from sex), then vote ---
    let schema_ref = truth.schema();
    let sex = schema_ref.require("sex")?;
    let age = schema_ref.require("age")?;
    let vote = schema_ref.require("vote")?;
    for (label, var, rates) in [
        ("R_sex", sex, &targets.sex_item_rates),
        ("R_age", age, &targets.age_item_rates),
        ("R_vote", vote, &targets.vote_item_rates),
    ] {
        for s in 0..states {
            if rates[s] < 1e-9 {
                // Effectively no nonresponse in this stratum.
                truth.models.get_mut(label).unwrap()[s] = if s == 0 { -12.0 } else { -5.0 };
                continue;
            }
            let mut t = truth.clone();
            let val = bisect(-20.0, 15.0, rates[s], |x| {
                let c = t.models.get_mut(label).unwrap();
                set_state_offset(c, s, x);
                t.analytic().unwrap().item_rate(s, var)
            });
            set_state_offset(truth.models.get_mut(label).unwrap(), s, val);
        }
    }

    // Person-share head.
    let analytic = truth.analytic()?;
    truth.head = analytic.person_weights();
    Ok(truth)
}
