//! Metropolis-within-Gibbs engine. Each iteration (a) imputes every missing
//! survey value from its full conditional in sequence order, (b) redraws the
//! saturated head from its conjugate Dirichlet posterior, and (c) updates
//! every regression coefficient by adaptive random-walk Metropolis under
//! flat priors.
//!
//! Likelihood routing per record class:
//!
//! * respondent rows contribute the survey-block terms, Pr(U=0 | record) and
//!   every item-indicator likelihood (monotone-forced indicators contribute
//!   likelihood 1 and are skipped);
//! * unit nonrespondent rows contribute the survey-block terms and
//!   Pr(U=1 | record) only — their item indicators are unobserved and
//!   marginalize to 1 exactly;
//! * synthetic margin rows contribute only the survey-block terms — both U
//!   and the indicators are unobserved, so every selection term sums to 1.
//!
//! All likelihoods are computed in log space; full conditionals normalize
//! with max subtraction.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::data::{Indicator, Origin, SurveyDataset, VarId, VariableSchema, MISSING};
use crate::error::{Error, Result};
use crate::numeric::{bernoulli_loglik, logit, sigmoid};
use crate::rng::chain_rng;
use crate::spec::{ConditionalModelSpec, Family, Outcome, SequenceSpec, Term};

/// Chain settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub adaptation_window: usize,
    pub target_acceptance: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            iterations: 10_000,
            burn_in: 5_000,
            thin: 1,
            seed: 0,
            adaptation_window: 50,
            target_acceptance: 0.35,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::validation("burn-in must be below iterations"));
        }
        if self.thin == 0 {
            return Err(Error::validation("thin must be at least 1"));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::validation("target acceptance must be in (0,1)"));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Snapshot of all model parameters: saturated head cell probabilities plus
/// one coefficient vector per conditional model (survey models in sequence
/// order, then the unit model, then the item models).
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub head: Vec<f64>,
    pub coeffs: Vec<Vec<f64>>,
}

/// Distinct original missingness pattern of real records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissPattern {
    pub unit: bool,
    pub missing: Vec<bool>,
}

/// Per-draw completed-data contingency counts of the real records,
/// cross-classified by original missingness pattern. Synthetic rows are
/// never counted, so estimands derived from the cube exclude them.
#[derive(Debug, Clone)]
pub struct CompletedCube {
    pub patterns: Vec<MissPattern>,
    pub n_cells: usize,
    /// One row per retained draw, laid out `pattern * n_cells + cell`.
    pub per_draw: Vec<Vec<u32>>,
}

/// One retained draw.
#[derive(Debug, Clone)]
pub struct DrawRow {
    pub iteration: usize,
    pub head: Vec<f64>,
    /// Flattened coefficients in `coeff_names` order.
    pub coeffs: Vec<f64>,
}

/// Posterior draws plus per-draw completed-data accumulators.
#[derive(Debug, Clone)]
pub struct DrawSet {
    pub chain_index: usize,
    pub model_labels: Vec<String>,
    /// Coefficient count per model, in `model_labels` order; unflattens
    /// `DrawRow::coeffs` back into per-model vectors.
    pub model_coeff_counts: Vec<usize>,
    pub coeff_names: Vec<String>,
    pub head_labels: Vec<String>,
    /// (variable name, level count) per head variable, head cell index is
    /// mixed-radix over these, first variable slowest.
    pub head_dims: Vec<(String, usize)>,
    pub draws: Vec<DrawRow>,
    pub cube: CompletedCube,
    /// Post burn-in acceptance rate per coefficient.
    pub acceptance: Vec<(String, f64)>,
    /// Monotone-pattern violations found across retained draws (must be 0).
    pub monotone_violations: u64,
}

impl DrawSet {
    pub fn coeff_index(&self, name: &str) -> Option<usize> {
        self.coeff_names.iter().position(|n| n == name)
    }

    /// Reassemble the full parameter state of one retained draw.
    pub fn params_at(&self, draw_ix: usize) -> ParameterState {
        let d = &self.draws[draw_ix];
        let mut coeffs = Vec::with_capacity(self.model_coeff_counts.len());
        let mut off = 0usize;
        for &k in &self.model_coeff_counts {
            coeffs.push(d.coeffs[off..off + k].to_vec());
            off += k;
        }
        ParameterState {
            head: d.head.clone(),
            coeffs,
        }
    }

    pub fn coeff_draws(&self, name: &str) -> Option<Vec<f64>> {
        let ix = self.coeff_index(name)?;
        Some(self.draws.iter().map(|d| d.coeffs[ix]).collect())
    }

    pub fn coeff_mean(&self, name: &str) -> Option<f64> {
        let v = self.coeff_draws(name)?;
        Some(crate::numeric::mean(&v))
    }

    pub fn coeff_sd(&self, name: &str) -> Option<f64> {
        let v = self.coeff_draws(name)?;
        Some(crate::numeric::sample_variance(&v).sqrt())
    }

    /// Per-draw marginal probability of `var = level` implied by the head.
    pub fn head_margin_draws(&self, var_name: &str, level: usize) -> Option<Vec<f64>> {
        let pos = self.head_dims.iter().position(|(n, _)| n == var_name)?;
        let dims: Vec<usize> = self.head_dims.iter().map(|(_, k)| *k).collect();
        let mut out = Vec::with_capacity(self.draws.len());
        for d in &self.draws {
            let mut p = 0.0;
            for (ix, &prob) in d.head.iter().enumerate() {
                let mut rest = ix;
                let mut val = 0usize;
                for (j, &k) in dims.iter().enumerate().rev() {
                    let v = rest % k;
                    rest /= k;
                    if j == pos {
                        val = v;
                    }
                }
                if val == level {
                    p += prob;
                }
            }
            out.push(p);
        }
        Some(out)
    }
}

// ---------------------------------------------------------------------------
// Compiled model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct CompiledModel {
    pub label: String,
    pub outcome: Outcome,
    pub family: Family,
    pub n_cut: usize,
    pub terms: Vec<Term>,
    pub n_slopes: usize,
    /// slope coefficient index -> (term index, offset within term)
    pub slope_term: Vec<(usize, usize)>,
    pub monotone_parent: Option<VarId>,
}

impl CompiledModel {
    fn from_spec(m: &ConditionalModelSpec, schema: &VariableSchema) -> Self {
        let mut slope_term = Vec::new();
        for (ti, t) in m.predictor.terms.iter().enumerate() {
            for j in 0..t.width(schema) {
                slope_term.push((ti, j));
            }
        }
        CompiledModel {
            label: m.outcome.label(schema),
            outcome: m.outcome,
            family: m.family,
            n_cut: m.predictor.cutpoint_count,
            terms: m.predictor.terms.clone(),
            n_slopes: slope_term.len(),
            slope_term,
            monotone_parent: m.monotone_parent,
        }
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_cut + self.n_slopes
    }

    fn slope(&self, schema: &VariableSchema, slopes: &[f64], values: &[u8]) -> f64 {
        let mut lp = 0.0;
        let mut off = 0usize;
        for t in &self.terms {
            let w = t.width(schema);
            match t {
                Term::Intercept => lp += slopes[off],
                Term::Main(v) => {
                    let val = values[v.0] as usize;
                    if val > 0 {
                        lp += slopes[off + val - 1];
                    }
                }
                Term::Interaction(a, b) => {
                    let (va, vb) = (values[a.0] as usize, values[b.0] as usize);
                    if va > 0 && vb > 0 {
                        let wb = schema.var(*b).n_levels() - 1;
                        lp += slopes[off + (va - 1) * wb + (vb - 1)];
                    }
                }
                Term::LevelSet(v, levels) => {
                    if levels.contains(&values[v.0]) {
                        lp += slopes[off];
                    }
                }
            }
            off += w;
        }
        lp
    }

    fn coeff_names(&self, schema: &VariableSchema) -> Vec<String> {
        let mut out = Vec::with_capacity(self.n_coeffs());
        for a in 0..self.n_cut {
            out.push(format!("{}:cut{}", self.label, a + 1));
        }
        for t in &self.terms {
            for j in 0..t.width(schema) {
                out.push(format!("{}:{}", self.label, t.coeff_label(schema, j)));
            }
        }
        out
    }
}

/// Proportional-odds log-likelihood of observing `level` given cutpoints and
/// the slope part of the linear predictor.
fn po_loglik(cuts: &[f64], slope: f64, level: usize) -> f64 {
    let k = cuts.len() + 1;
    let upper = if level + 1 == k {
        1.0
    } else {
        sigmoid(cuts[level] + slope)
    };
    let lower = if level == 0 {
        0.0
    } else {
        sigmoid(cuts[level - 1] + slope)
    };
    (upper - lower).max(1e-300).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RecClass {
    Respondent,
    Unit,
    Synthetic,
}

#[derive(Debug, Clone)]
struct RecordCtx {
    /// Applicability of each selection model (unit model first, then item
    /// models): false means the record's likelihood term is identically 1.
    sel_applies: Vec<bool>,
    /// Outcome value of each selection model, valid where applicable.
    sel_outcome: Vec<bool>,
    /// Variables to impute, in sequence order.
    missing_vars: Vec<VarId>,
    /// Index into the pattern table (real records only).
    pattern: usize,
}

const NO_PATTERN: usize = usize::MAX;

pub(crate) struct Compiled {
    pub schema: Arc<VariableSchema>,
    pub head_vars: Vec<VarId>,
    pub head_cells: usize,
    pub models: Vec<CompiledModel>,
    pub n_survey: usize,
    /// Per variable: survey model indices whose likelihood depends on it.
    survey_touch: Vec<Vec<usize>>,
    /// Per variable: selection model indices whose predictor touches it
    /// (offsets into `models`, so >= n_survey).
    sel_touch: Vec<Vec<usize>>,
    head_has: Vec<bool>,
    sequence: Vec<VarId>,
}

impl Compiled {
    fn new(schema: Arc<VariableSchema>, spec: &SequenceSpec) -> Result<Self> {
        let p = schema.len();
        let mut covered = vec![false; p];
        for v in &spec.head_vars {
            covered[v.0] = true;
        }
        let mut models = Vec::new();
        for m in &spec.survey_models {
            match m.outcome {
                Outcome::Var(v) => {
                    if covered[v.0] {
                        return Err(Error::validation("survey variable modeled twice"));
                    }
                    covered[v.0] = true;
                }
                _ => return Err(Error::validation("survey block contains non-survey outcome")),
            }
            models.push(CompiledModel::from_spec(m, &schema));
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::validation(
                "every survey variable needs a head slot or a survey model",
            ));
        }
        let n_survey = models.len();
        models.push(CompiledModel::from_spec(&spec.unit_model, &schema));
        for m in &spec.item_models {
            models.push(CompiledModel::from_spec(m, &schema));
        }

        let head_cells = if spec.head_vars.is_empty() {
            0
        } else {
            spec.head_vars
                .iter()
                .map(|v| schema.var(*v).n_levels())
                .product()
        };

        let mut survey_touch = vec![Vec::new(); p];
        let mut sel_touch = vec![Vec::new(); p];
        for (mi, m) in models.iter().enumerate() {
            let mut vars: BTreeSet<VarId> =
                m.terms.iter().flat_map(|t| t.vars()).collect();
            if mi < n_survey {
                if let Outcome::Var(v) = m.outcome {
                    vars.insert(v);
                }
                for v in vars {
                    survey_touch[v.0].push(mi);
                }
            } else {
                for v in vars {
                    sel_touch[v.0].push(mi);
                }
            }
        }
        let mut head_has = vec![false; p];
        for v in &spec.head_vars {
            head_has[v.0] = true;
        }
        let sequence: Vec<VarId> = spec
            .head_vars
            .iter()
            .copied()
            .chain(spec.survey_models.iter().filter_map(|m| match m.outcome {
                Outcome::Var(v) => Some(v),
                _ => None,
            }))
            .collect();

        Ok(Compiled {
            schema,
            head_vars: spec.head_vars.clone(),
            head_cells,
            models,
            n_survey,
            survey_touch,
            sel_touch,
            head_has,
            sequence,
        })
    }

    fn head_cell(&self, values: &[u8]) -> usize {
        let mut ix = 0usize;
        for v in &self.head_vars {
            ix = ix * self.schema.var(*v).n_levels() + values[v.0] as usize;
        }
        ix
    }

    fn head_labels(&self) -> Vec<String> {
        let mut labels = vec![String::new()];
        for v in &self.head_vars {
            let var = self.schema.var(*v);
            let mut next = Vec::with_capacity(labels.len() * var.n_levels());
            for prefix in &labels {
                for l in &var.levels {
                    let mut s = prefix.clone();
                    if !s.is_empty() {
                        s.push(';');
                    }
                    s.push_str(&format!("{}={}", var.name, l));
                    next.push(s);
                }
            }
            labels = next;
        }
        labels.into_iter().map(|l| format!("head:{l}")).collect()
    }
}

/// Draw from Dirichlet(counts + 1), the conjugate posterior of the saturated
/// head under a uniform prior.
pub fn dirichlet_posterior_draw(counts: &[u64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(counts.len());
    let mut sum = 0.0;
    for &c in counts {
        let g = Gamma::new(c as f64 + 1.0, 1.0).expect("valid gamma shape");
        let x: f64 = g.sample(rng);
        out.push(x);
        sum += x;
    }
    for x in &mut out {
        *x /= sum;
    }
    out
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Single-chain sampler state. Owns a completed copy of the data and a
/// counter-based RNG; the input dataset is shared read-only.
pub struct Engine<'d> {
    comp: Compiled,
    data: &'d SurveyDataset,
    ctx: Vec<RecordCtx>,
    patterns: Vec<MissPattern>,
    /// Completed values, n x p row-major.
    completed: Vec<u8>,
    state: ParameterState,
    scales: Vec<Vec<f64>>,
    /// Applicable row list per selection model (index parallel to models,
    /// empty vectors for survey models which apply to every row).
    sel_rows: Vec<Vec<u32>>,
    /// Cached slope linear predictor per model: survey models index by row,
    /// selection models parallel to `sel_rows`.
    lp: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    // acceptance bookkeeping
    acc_total: Vec<Vec<u64>>,
    prop_total: Vec<Vec<u64>>,
    acc_window: Vec<Vec<u32>>,
    prop_window: Vec<Vec<u32>>,
    scratch_rows: Vec<u32>,
    scratch_vals: Vec<u8>,
}

impl<'d> Engine<'d> {
    /// Build the engine and the initial state: observed values copied,
    /// missing values drawn i.i.d. from each variable's observed marginal
    /// among respondents, coefficients at zero (proportional-odds cutpoints
    /// at smoothed empirical cumulative logits), the head at the smoothed
    /// empirical completed-cell distribution, proposal scales at 0.1.
    pub fn new(
        schema: Arc<VariableSchema>,
        spec: &SequenceSpec,
        data: &'d SurveyDataset,
        seed: u64,
        chain_ix: usize,
    ) -> Result<Self> {
        let comp = Compiled::new(schema, spec)?;
        let schema = Arc::clone(&comp.schema);
        let p = schema.len();
        let n = data.len();
        let n_models = comp.models.len();
        let mut rng = chain_rng(seed, chain_ix);

        // Record contexts and the pattern table.
        let mut patterns: Vec<MissPattern> = Vec::new();
        let mut ctx: Vec<RecordCtx> = Vec::with_capacity(n);
        for r in data.records() {
            let class = match (r.origin(), r.unit()) {
                (Origin::Synthetic, _) => RecClass::Synthetic,
                (Origin::Real, Some(true)) => RecClass::Unit,
                (Origin::Real, _) => RecClass::Respondent,
            };
            let mut sel_applies = Vec::with_capacity(n_models - comp.n_survey);
            let mut sel_outcome = Vec::with_capacity(n_models - comp.n_survey);
            for m in &comp.models[comp.n_survey..] {
                let (applies, y) = match m.outcome {
                    Outcome::Unit => (class != RecClass::Synthetic, class == RecClass::Unit),
                    Outcome::Item(w) => {
                        if class != RecClass::Respondent {
                            (false, false)
                        } else {
                            let forced = match m.monotone_parent {
                                Some(par) => r.item_indicator(par) == Indicator::Known(true),
                                None => false,
                            };
                            (!forced, r.item_indicator(w) == Indicator::Known(true))
                        }
                    }
                    Outcome::Var(_) => (false, false),
                };
                sel_applies.push(applies);
                sel_outcome.push(y);
            }
            let missing_vars: Vec<VarId> = comp
                .sequence
                .iter()
                .copied()
                .filter(|v| !r.is_observed(*v))
                .collect();
            let pattern = if r.origin() == Origin::Real {
                let pat = MissPattern {
                    unit: r.is_unit_row(),
                    missing: (0..p).map(|k| !r.is_observed(VarId(k))).collect(),
                };
                match patterns.iter().position(|q| *q == pat) {
                    Some(i) => i,
                    None => {
                        patterns.push(pat);
                        patterns.len() - 1
                    }
                }
            } else {
                NO_PATTERN
            };
            ctx.push(RecordCtx {
                sel_applies,
                sel_outcome,
                missing_vars,
                pattern,
            });
        }

        // Data must respect declared monotone patterns.
        for m in &comp.models[comp.n_survey..] {
            if let (Outcome::Item(w), Some(par)) = (m.outcome, m.monotone_parent) {
                for r in data.records() {
                    if r.is_respondent()
                        && r.item_indicator(par) == Indicator::Known(true)
                        && r.item_indicator(w) == Indicator::Known(false)
                    {
                        return Err(Error::validation(format!(
                            "data violate the monotone pattern: '{}' observed while parent '{}' is missing",
                            schema.var(w).name,
                            schema.var(par).name
                        )));
                    }
                }
            }
        }

        // Observed marginals among respondents.
        let mut marg: Vec<Vec<f64>> = Vec::with_capacity(p);
        for (k, v) in schema.vars() {
            let mut counts = vec![0f64; v.n_levels()];
            for r in data.records() {
                if r.is_respondent() {
                    if let Some(val) = r.value(k) {
                        counts[val as usize] += 1.0;
                    }
                }
            }
            let tot: f64 = counts.iter().sum();
            if tot == 0.0 {
                return Err(Error::data(format!(
                    "variable '{}' has no observed values among respondents",
                    v.name
                )));
            }
            marg.push(counts.iter().map(|c| c / tot).collect());
        }

        // Initial imputation.
        let mut completed = vec![0u8; n * p];
        for (i, r) in data.records().iter().enumerate() {
            for k in 0..p {
                completed[i * p + k] = match r.values()[k] {
                    MISSING => sample_discrete(&marg[k], &mut rng),
                    v => v,
                };
            }
        }

        // Head at the smoothed empirical completed-cell distribution (the
        // +1 smoothing is the Dirichlet(1) posterior mean and keeps every
        // cell strictly positive).
        let head = if comp.head_cells > 0 {
            let mut counts = vec![0u64; comp.head_cells];
            for i in 0..n {
                counts[comp.head_cell(&completed[i * p..(i + 1) * p])] += 1;
            }
            let tot: f64 = (n + comp.head_cells) as f64;
            counts.iter().map(|&c| (c as f64 + 1.0) / tot).collect()
        } else {
            Vec::new()
        };

        // Coefficients at zero; cutpoints at smoothed empirical cumulative
        // logits so they start strictly increasing.
        let mut coeffs = Vec::with_capacity(n_models);
        for m in &comp.models {
            let mut c = vec![0.0; m.n_coeffs()];
            if m.n_cut > 0 {
                if let Outcome::Var(v) = m.outcome {
                    let k = schema.var(v).n_levels();
                    let mut counts = vec![1.0f64; k];
                    for i in 0..n {
                        counts[completed[i * p + v.0] as usize] += 1.0;
                    }
                    let tot: f64 = counts.iter().sum();
                    let mut cum = 0.0;
                    for a in 0..m.n_cut {
                        cum += counts[a] / tot;
                        c[a] = logit(cum);
                    }
                }
            }
            coeffs.push(c);
        }

        let scales: Vec<Vec<f64>> = comp.models.iter().map(|m| vec![0.1; m.n_coeffs()]).collect();
        let acc_total: Vec<Vec<u64>> = comp.models.iter().map(|m| vec![0; m.n_coeffs()]).collect();
        let prop_total = acc_total.clone();
        let acc_window: Vec<Vec<u32>> = comp.models.iter().map(|m| vec![0; m.n_coeffs()]).collect();
        let prop_window = acc_window.clone();

        let mut sel_rows: Vec<Vec<u32>> = vec![Vec::new(); n_models];
        for (mi, _m) in comp.models.iter().enumerate().skip(comp.n_survey) {
            let si = mi - comp.n_survey;
            sel_rows[mi] = (0..n as u32)
                .filter(|&i| ctx[i as usize].sel_applies[si])
                .collect();
        }
        let lp = vec![Vec::new(); n_models];

        let mut eng = Engine {
            comp,
            data,
            ctx,
            patterns,
            completed,
            state: ParameterState { head, coeffs },
            scales,
            sel_rows,
            lp,
            rng,
            acc_total,
            prop_total,
            acc_window,
            prop_window,
            scratch_rows: Vec::new(),
            scratch_vals: vec![0u8; p],
        };
        eng.rebuild_lp();
        Ok(eng)
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.comp.schema
    }

    pub fn params(&self) -> &ParameterState {
        &self.state
    }

    pub fn completed_values(&self, row: usize) -> &[u8] {
        let p = self.comp.schema.len();
        &self.completed[row * p..(row + 1) * p]
    }

    /// Pin a completed value, e.g. to evaluate a full conditional at a
    /// chosen configuration when comparing against an exact enumeration.
    /// Slope caches refresh at the next sweep; [`Self::full_conditional_for_value`]
    /// reads completed values directly and sees the override immediately.
    pub fn override_completed_value(&mut self, row: usize, var: VarId, level: u8) -> Result<()> {
        let p = self.comp.schema.len();
        if row >= self.data.len() || level as usize >= self.comp.schema.var(var).n_levels() {
            return Err(Error::validation("override out of range"));
        }
        self.completed[row * p + var.0] = level;
        Ok(())
    }

    /// Replace the parameter state (dimension-checked) and refresh caches.
    pub fn set_params(&mut self, state: ParameterState) -> Result<()> {
        if state.head.len() != self.comp.head_cells {
            return Err(Error::validation("head dimension mismatch"));
        }
        if state.coeffs.len() != self.comp.models.len()
            || state
                .coeffs
                .iter()
                .zip(&self.comp.models)
                .any(|(c, m)| c.len() != m.n_coeffs())
        {
            return Err(Error::validation("coefficient dimension mismatch"));
        }
        self.state = state;
        self.rebuild_lp();
        Ok(())
    }

    pub fn coeff_names(&self) -> Vec<String> {
        self.comp
            .models
            .iter()
            .flat_map(|m| m.coeff_names(&self.comp.schema))
            .collect()
    }

    fn rebuild_lp(&mut self) {
        let p = self.comp.schema.len();
        let n = self.data.len();
        for mi in 0..self.comp.models.len() {
            let m = &self.comp.models[mi];
            let slopes = &self.state.coeffs[mi][m.n_cut..];
            if mi < self.comp.n_survey {
                let mut cache = std::mem::take(&mut self.lp[mi]);
                cache.clear();
                cache.reserve(n);
                for i in 0..n {
                    cache.push(m.slope(
                        &self.comp.schema,
                        slopes,
                        &self.completed[i * p..(i + 1) * p],
                    ));
                }
                self.lp[mi] = cache;
            } else {
                let rows = &self.sel_rows[mi];
                let mut cache = std::mem::take(&mut self.lp[mi]);
                cache.clear();
                cache.reserve(rows.len());
                for &i in rows {
                    let i = i as usize;
                    cache.push(m.slope(
                        &self.comp.schema,
                        slopes,
                        &self.completed[i * p..(i + 1) * p],
                    ));
                }
                self.lp[mi] = cache;
            }
        }
    }

    /// Survey-model log-likelihood term for arbitrary values (used during
    /// imputation, where candidate levels change the design row).
    fn survey_ll(&self, mi: usize, values: &[u8]) -> f64 {
        let m = &self.comp.models[mi];
        let coeffs = &self.state.coeffs[mi];
        let slope = m.slope(&self.comp.schema, &coeffs[m.n_cut..], values);
        match (m.family, m.outcome) {
            (Family::BernoulliLogit, Outcome::Var(v)) => {
                bernoulli_loglik(values[v.0] == 1, slope)
            }
            (Family::ProportionalOddsLogit, Outcome::Var(v)) => {
                po_loglik(&coeffs[..m.n_cut], slope, values[v.0] as usize)
            }
            _ => unreachable!("survey model with non-survey outcome"),
        }
    }

    /// Selection-model log-likelihood term for arbitrary values.
    fn selection_ll(&self, mi: usize, row: usize, values: &[u8]) -> f64 {
        let m = &self.comp.models[mi];
        let coeffs = &self.state.coeffs[mi];
        let y = self.ctx[row].sel_outcome[mi - self.comp.n_survey];
        let slope = m.slope(&self.comp.schema, &coeffs[m.n_cut..], values);
        bernoulli_loglik(y, slope)
    }

    /// Full conditional distribution over the levels of `var` for `row`,
    /// given the current values of everything else.
    pub fn full_conditional_for_value(&self, row: usize, var: VarId) -> Result<Vec<f64>> {
        let p = self.comp.schema.len();
        let mut values = self.completed[row * p..(row + 1) * p].to_vec();
        let mut out = vec![0.0; self.comp.schema.var(var).n_levels()];
        self.full_conditional_into(row, var, &mut values, &mut out)?;
        Ok(out)
    }

    fn full_conditional_into(
        &self,
        row: usize,
        var: VarId,
        values: &mut [u8],
        out: &mut [f64],
    ) -> Result<()> {
        let k = self.comp.schema.var(var).n_levels();
        debug_assert_eq!(out.len(), k);
        let saved = values[var.0];
        for (lev, w) in out.iter_mut().enumerate() {
            values[var.0] = lev as u8;
            let mut lw = 0.0;
            if self.comp.head_has[var.0] {
                lw += self.state.head[self.comp.head_cell(values)].max(1e-300).ln();
            }
            for &mi in &self.comp.survey_touch[var.0] {
                lw += self.survey_ll(mi, values);
            }
            // Selection terms: only models that apply to this record and
            // whose predictor touches the variable (untouched terms are
            // constant in the candidate level and cancel on normalization).
            for &mi in &self.comp.sel_touch[var.0] {
                if self.ctx[row].sel_applies[mi - self.comp.n_survey] {
                    lw += self.selection_ll(mi, row, values);
                }
            }
            *w = lw;
        }
        values[var.0] = saved;
        let max = out.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if !max.is_finite() {
            return Err(Error::numerical(
                "all candidate levels have zero weight in a full conditional",
            ));
        }
        let mut sum = 0.0;
        for w in out.iter_mut() {
            *w = (*w - max).exp();
            sum += *w;
        }
        for w in out.iter_mut() {
            *w /= sum;
        }
        Ok(())
    }

    fn impute_sweep(&mut self) -> Result<()> {
        let p = self.comp.schema.len();
        let n = self.data.len();
        let mut probs = vec![0.0f64; 8];
        for row in 0..n {
            if self.ctx[row].missing_vars.is_empty() {
                continue;
            }
            let mut values = std::mem::take(&mut self.scratch_vals);
            values.clear();
            values.extend_from_slice(&self.completed[row * p..(row + 1) * p]);
            let missing = std::mem::take(&mut self.ctx[row].missing_vars);
            for &var in &missing {
                let k = self.comp.schema.var(var).n_levels();
                probs.resize(k, 0.0);
                self.full_conditional_into(row, var, &mut values, &mut probs[..k])?;
                values[var.0] = sample_discrete(&probs[..k], &mut self.rng);
            }
            self.ctx[row].missing_vars = missing;
            self.completed[row * p..(row + 1) * p].copy_from_slice(&values);
            self.scratch_vals = values;
        }
        Ok(())
    }

    /// Conjugate Dirichlet update of the saturated head from completed-cell
    /// counts over every record, synthetic blocks included.
    fn update_head(&mut self) {
        if self.comp.head_cells == 0 {
            return;
        }
        let p = self.comp.schema.len();
        let mut counts = vec![0u64; self.comp.head_cells];
        for i in 0..self.data.len() {
            counts[self.comp.head_cell(&self.completed[i * p..(i + 1) * p])] += 1;
        }
        self.state.head = dirichlet_posterior_draw(&counts, &mut self.rng);
    }

    /// Log-likelihood of model `mi` at a cached row index, reading the slope
    /// from the cache but applying `delta` when the coefficient is active.
    fn model_row_ll(&self, mi: usize, pos: usize, row: usize, slope: f64) -> f64 {
        let m = &self.comp.models[mi];
        if mi < self.comp.n_survey {
            let p = self.comp.schema.len();
            let values = &self.completed[row * p..(row + 1) * p];
            match (m.family, m.outcome) {
                (Family::BernoulliLogit, Outcome::Var(v)) => {
                    bernoulli_loglik(values[v.0] == 1, slope)
                }
                (Family::ProportionalOddsLogit, Outcome::Var(v)) => po_loglik(
                    &self.state.coeffs[mi][..m.n_cut],
                    slope,
                    values[v.0] as usize,
                ),
                _ => unreachable!(),
            }
        } else {
            let y = self.ctx[row].sel_outcome[mi - self.comp.n_survey];
            let _ = pos;
            bernoulli_loglik(y, slope)
        }
    }

    fn model_rows(&self, mi: usize) -> ModelRows<'_> {
        if mi < self.comp.n_survey {
            ModelRows::All(self.data.len())
        } else {
            ModelRows::List(&self.sel_rows[mi])
        }
    }

    /// One adaptive random-walk Metropolis pass over every coefficient of
    /// model `mi` under a flat prior.
    pub(crate) fn update_coeffs(&mut self, mi: usize, adapting: bool) -> Result<()> {
        let n_cut = self.comp.models[mi].n_cut;
        let n_coeffs = self.comp.models[mi].n_coeffs();
        let p = self.comp.schema.len();

        for c in 0..n_coeffs {
            let scale = self.scales[mi][c];
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let delta = z * scale;
            self.prop_total[mi][c] += u64::from(!adapting);
            self.prop_window[mi][c] += u32::from(adapting);

            let accept;
            if c < n_cut {
                // Cutpoint update: stay strictly increasing, likelihood only
                // changes for rows at the two adjacent outcome levels.
                let a = c;
                let cuts = &self.state.coeffs[mi][..n_cut];
                let new = cuts[a] + delta;
                let lo_ok = a == 0 || new > cuts[a - 1];
                let hi_ok = a + 1 == n_cut || new < cuts[a + 1];
                if !(lo_ok && hi_ok) {
                    accept = false;
                } else {
                    let outcome_var = match self.comp.models[mi].outcome {
                        Outcome::Var(v) => v,
                        _ => unreachable!("cutpoints only on survey outcomes"),
                    };
                    let mut new_cuts = cuts.to_vec();
                    new_cuts[a] = new;
                    let mut dll = 0.0;
                    for row in 0..self.data.len() {
                        let level = self.completed[row * p + outcome_var.0] as usize;
                        if level == a || level == a + 1 {
                            let slope = self.lp[mi][row];
                            dll += po_loglik(&new_cuts, slope, level)
                                - po_loglik(cuts, slope, level);
                        }
                    }
                    if !dll.is_finite() {
                        return Err(Error::numerical("non-finite cutpoint likelihood"));
                    }
                    let u: f64 = self.rng.random::<f64>().max(1e-300);
                    accept = u.ln() < dll;
                    if accept {
                        self.state.coeffs[mi][a] = new;
                    }
                }
            } else {
                // Slope update: the likelihood changes only on rows where
                // the dummy design value is 1.
                let s = c - n_cut;
                let (ti, j) = self.comp.models[mi].slope_term[s];
                let mut rows = std::mem::take(&mut self.scratch_rows);
                rows.clear();
                let mut dll = 0.0;
                {
                    let m = &self.comp.models[mi];
                    let term = &m.terms[ti];
                    let schema = &self.comp.schema;
                    match self.model_rows(mi) {
                        ModelRows::All(n) => {
                            for row in 0..n {
                                let values = &self.completed[row * p..(row + 1) * p];
                                if term.active(values, j, schema) {
                                    let lp0 = self.lp[mi][row];
                                    dll += self.model_row_ll(mi, row, row, lp0 + delta)
                                        - self.model_row_ll(mi, row, row, lp0);
                                    rows.push(row as u32);
                                }
                            }
                        }
                        ModelRows::List(list) => {
                            for (pos, &row) in list.iter().enumerate() {
                                let row = row as usize;
                                let values = &self.completed[row * p..(row + 1) * p];
                                if term.active(values, j, schema) {
                                    let lp0 = self.lp[mi][pos];
                                    dll += self.model_row_ll(mi, pos, row, lp0 + delta)
                                        - self.model_row_ll(mi, pos, row, lp0);
                                    rows.push(pos as u32);
                                }
                            }
                        }
                    }
                }
                if !dll.is_finite() {
                    return Err(Error::numerical("non-finite likelihood in coefficient update"));
                }
                let u: f64 = self.rng.random::<f64>().max(1e-300);
                accept = u.ln() < dll;
                if accept {
                    self.state.coeffs[mi][c] += delta;
                    for &pos in &rows {
                        self.lp[mi][pos as usize] += delta;
                    }
                }
                self.scratch_rows = rows;
            }

            self.acc_total[mi][c] += u64::from(accept && !adapting);
            self.acc_window[mi][c] += u32::from(accept && adapting);
        }
        Ok(())
    }

    fn adapt_scales(&mut self, target: f64) {
        for mi in 0..self.comp.models.len() {
            for c in 0..self.scales[mi].len() {
                let props = self.prop_window[mi][c];
                if props == 0 {
                    continue;
                }
                let rate = self.acc_window[mi][c] as f64 / props as f64;
                let s = &mut self.scales[mi][c];
                *s = (*s * (rate - target).exp()).clamp(1e-3, 50.0);
                self.acc_window[mi][c] = 0;
                self.prop_window[mi][c] = 0;
            }
        }
    }

    fn record_cube(&self, cube_row: &mut [u32]) {
        let p = self.comp.schema.len();
        let cells = self.comp.schema.joint_cells();
        for (i, c) in self.ctx.iter().enumerate() {
            if c.pattern == NO_PATTERN {
                continue;
            }
            let cell = self
                .comp
                .schema
                .cell_index(&self.completed[i * p..(i + 1) * p]);
            cube_row[c.pattern * cells + cell] += 1;
        }
    }

    fn count_monotone_violations(&self) -> u64 {
        let mut v = 0u64;
        for m in &self.comp.models[self.comp.n_survey..] {
            if let (Outcome::Item(w), Some(par)) = (m.outcome, m.monotone_parent) {
                for r in self.data.records() {
                    if r.is_respondent()
                        && r.item_indicator(par) == Indicator::Known(true)
                        && r.item_indicator(w) != Indicator::Known(true)
                    {
                        v += 1;
                    }
                }
            }
        }
        v
    }

    /// Run the chain; deterministic given the seed.
    pub fn run(&mut self, cfg: &ChainConfig, chain_ix: usize) -> Result<DrawSet> {
        cfg.validate()?;
        let coeff_names = self.coeff_names();
        let head_labels = self.comp.head_labels();
        let n_retained = cfg.retained();
        let cells = self.comp.schema.joint_cells();
        let cube_width = self.patterns.len() * cells;
        let mut draws = Vec::with_capacity(n_retained);
        let mut per_draw = Vec::with_capacity(n_retained);
        let mut monotone_violations = 0u64;

        for it in 1..=cfg.iterations {
            let adapting = it <= cfg.burn_in;
            self.impute_sweep()?;
            self.rebuild_lp();
            self.update_head();
            for mi in 0..self.comp.models.len() {
                self.update_coeffs(mi, adapting)?;
            }
            if adapting && it % cfg.adaptation_window == 0 {
                self.adapt_scales(cfg.target_acceptance);
            }
            if it > cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0 {
                let flat: Vec<f64> = self.state.coeffs.iter().flatten().copied().collect();
                draws.push(DrawRow {
                    iteration: it,
                    head: self.state.head.clone(),
                    coeffs: flat,
                });
                let mut row = vec![0u32; cube_width];
                self.record_cube(&mut row);
                per_draw.push(row);
                monotone_violations += self.count_monotone_violations();
            }
        }

        let mut acceptance = Vec::with_capacity(coeff_names.len());
        let mut name_ix = 0usize;
        for mi in 0..self.comp.models.len() {
            for c in 0..self.comp.models[mi].n_coeffs() {
                let props = self.prop_total[mi][c];
                let rate = if props == 0 {
                    0.0
                } else {
                    self.acc_total[mi][c] as f64 / props as f64
                };
                acceptance.push((coeff_names[name_ix].clone(), rate));
                name_ix += 1;
            }
        }

        Ok(DrawSet {
            chain_index: chain_ix,
            model_labels: self.comp.models.iter().map(|m| m.label.clone()).collect(),
            model_coeff_counts: self.comp.models.iter().map(|m| m.n_coeffs()).collect(),
            coeff_names,
            head_labels,
            head_dims: self
                .comp
                .head_vars
                .iter()
                .map(|v| {
                    let var = self.comp.schema.var(*v);
                    (var.name.clone(), var.n_levels())
                })
                .collect(),
            draws,
            cube: CompletedCube {
                patterns: self.patterns.clone(),
                n_cells: cells,
                per_draw,
            },
            acceptance,
            monotone_violations,
        })
    }

    /// Final completed real records, all values filled in. Synthetic rows
    /// are dropped; unit rows come out as ordinary fully observed rows.
    pub fn completed_dataset(&self) -> SurveyDataset {
        let p = self.comp.schema.len();
        let mut records = Vec::with_capacity(self.data.len());
        for (i, r) in self.data.records().iter().enumerate() {
            if r.origin() == Origin::Synthetic {
                continue;
            }
            let values = self.completed[i * p..(i + 1) * p].to_vec();
            records.push(crate::data::SurveyRecord::respondent(values));
        }
        SurveyDataset::new(self.comp.schema.clone(), records)
            .expect("completed records are fully observed")
    }
}

enum ModelRows<'a> {
    All(usize),
    List(&'a [u32]),
}

fn sample_discrete(probs: &[f64], rng: &mut ChaCha8Rng) -> u8 {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i as u8;
        }
    }
    (probs.len() - 1) as u8
}

/// Run one chain over an already augmented dataset.
pub fn run_chain(
    schema: &Arc<VariableSchema>,
    spec: &SequenceSpec,
    data: &SurveyDataset,
    cfg: &ChainConfig,
    chain_ix: usize,
) -> Result<DrawSet> {
    let mut engine = Engine::new(Arc::clone(schema), spec, data, cfg.seed, chain_ix)?;
    engine.run(cfg, chain_ix)
}

/// Like [`run_chain`] but also returns the final completed real records.
pub fn run_chain_full(
    schema: &Arc<VariableSchema>,
    spec: &SequenceSpec,
    data: &SurveyDataset,
    cfg: &ChainConfig,
    chain_ix: usize,
) -> Result<(DrawSet, SurveyDataset)> {
    let mut engine = Engine::new(Arc::clone(schema), spec, data, cfg.seed, chain_ix)?;
    let ds = engine.run(cfg, chain_ix)?;
    let completed = engine.completed_dataset();
    Ok((ds, completed))
}

/// Run several chains over the shared immutable dataset, at most
/// `max_threads` at a time. Each chain's stream depends only on (seed,
/// chain index), so results are independent of the thread schedule.
pub fn run_chains(
    schema: &Arc<VariableSchema>,
    spec: &SequenceSpec,
    data: &SurveyDataset,
    cfg: &ChainConfig,
    n_chains: usize,
    max_threads: usize,
) -> Result<Vec<DrawSet>> {
    let max_threads = max_threads.max(1);
    let mut out: Vec<Option<Result<DrawSet>>> = (0..n_chains).map(|_| None).collect();
    for batch in (0..n_chains).collect::<Vec<_>>().chunks(max_threads) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &ix in batch {
                handles.push((
                    ix,
                    scope.spawn(move || run_chain(schema, spec, data, cfg, ix)),
                ));
            }
            for (ix, h) in handles {
                out[ix] = Some(h.join().expect("chain thread panicked"));
            }
        });
    }
    out.into_iter().map(|r| r.expect("all chains ran")).collect()
}
