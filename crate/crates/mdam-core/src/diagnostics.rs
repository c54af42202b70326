//! Posterior summaries: subgroup estimands from completed-data accumulators,
//! posterior predictive checks on the observable contingency table,
//! predictions for nonrespondent classes, and chain health (effective sample
//! size, split scale reduction).

use crate::data::{observed_cell_table, Predicate, SurveyDataset, VarId, VariableSchema};
use crate::error::{Error, Result};
use crate::numeric::{mean, percentile, percentile_sorted, sample_variance};
use crate::rng::stream_rng;
use crate::sampler::DrawSet;
use crate::simgen::ForwardModel;
use crate::spec::SequenceSpec;

/// Posterior summary of one subgroup estimand.
#[derive(Debug, Clone)]
pub struct EstimandSummary {
    pub label: String,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub draw_values: Vec<f64>,
    /// Draws whose subgroup was empty, reported and excluded.
    pub skipped_draws: usize,
}

/// Proportion of `target` among all real records (respondents with their
/// imputations plus imputed unit nonrespondents) that satisfy `subgroup`,
/// summarized over every retained draw of every chain. Synthetic margin
/// records never enter the accumulators.
pub fn estimand_summary(
    chains: &[DrawSet],
    schema: &VariableSchema,
    target: (VarId, u8),
    subgroup: &Predicate,
    label: impl Into<String>,
) -> Result<EstimandSummary> {
    if chains.is_empty() {
        return Err(Error::validation("no chains supplied"));
    }
    let n_cells = chains[0].cube.n_cells;
    let mut in_subgroup = vec![false; n_cells];
    let mut is_target = vec![false; n_cells];
    for cell in 0..n_cells {
        let values = schema.cell_values(cell);
        in_subgroup[cell] = subgroup.matches_values(&values);
        is_target[cell] = values[target.0 .0] == target.1;
    }
    let mut draw_values = Vec::new();
    let mut skipped = 0usize;
    for ds in chains {
        for row in &ds.cube.per_draw {
            let mut num = 0u64;
            let mut den = 0u64;
            for pat in 0..ds.cube.patterns.len() {
                let base = pat * n_cells;
                for cell in 0..n_cells {
                    if in_subgroup[cell] {
                        let c = u64::from(row[base + cell]);
                        den += c;
                        if is_target[cell] {
                            num += c;
                        }
                    }
                }
            }
            if den == 0 {
                skipped += 1;
            } else {
                draw_values.push(num as f64 / den as f64);
            }
        }
    }
    if draw_values.is_empty() {
        return Err(Error::data("subgroup is empty in every draw"));
    }
    let mut sorted = draw_values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let m = mean(&draw_values);
    // Central 95% percentile interval, nudged to contain the mean so the
    // lo <= mean <= hi invariant survives float rounding and degenerate
    // draw distributions.
    let lo = percentile_sorted(&sorted, 2.5).min(m);
    let hi = percentile_sorted(&sorted, 97.5).max(m);
    Ok(EstimandSummary {
        label: label.into(),
        mean: m,
        lo,
        hi,
        draw_values,
        skipped_draws: skipped,
    })
}

/// Model-implied population share of `target` within `subgroup`, per draw:
/// the conditional probability under the fitted survey distribution (head
/// plus survey regressions). This is the population quantity the auxiliary
/// margins calibrate; the completed-data estimand above converges to it
/// only when the nonrespondent pools are large relative to the gap between
/// complete cases and the margins. Subgroups conditioned on always-observed
/// strata are exact; fully pooled quantities inherit the augmented head.
pub fn model_implied_summary(
    chains: &[DrawSet],
    schema: &VariableSchema,
    spec: &SequenceSpec,
    target: (VarId, u8),
    subgroup: &Predicate,
    label: impl Into<String>,
) -> Result<EstimandSummary> {
    if chains.is_empty() {
        return Err(Error::validation("no chains supplied"));
    }
    let n_cells = schema.joint_cells();
    let mut in_subgroup = vec![false; n_cells];
    let mut is_target = vec![false; n_cells];
    for cell in 0..n_cells {
        let values = schema.cell_values(cell);
        in_subgroup[cell] = subgroup.matches_values(&values);
        is_target[cell] = values[target.0 .0] == target.1;
    }
    let mut draw_values = Vec::new();
    for ds in chains {
        for di in 0..ds.draws.len() {
            let params = ds.params_at(di);
            let dist = crate::simgen::joint_survey_distribution(schema, spec, &params)?;
            let mut num = 0.0;
            let mut den = 0.0;
            for cell in 0..n_cells {
                if in_subgroup[cell] {
                    den += dist[cell];
                    if is_target[cell] {
                        num += dist[cell];
                    }
                }
            }
            if den > 0.0 {
                draw_values.push(num / den);
            }
        }
    }
    if draw_values.is_empty() {
        return Err(Error::data("subgroup has zero probability in every draw"));
    }
    let mut sorted = draw_values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let m = mean(&draw_values);
    Ok(EstimandSummary {
        label: label.into(),
        mean: m,
        lo: percentile_sorted(&sorted, 2.5).min(m),
        hi: percentile_sorted(&sorted, 97.5).max(m),
        draw_values,
        skipped_draws: 0,
    })
}

/// One observable cell of the predictive check.
#[derive(Debug, Clone)]
pub struct CellCheck {
    pub cell: usize,
    pub label: String,
    pub observed: f64,
    pub lo: f64,
    pub hi: f64,
    pub covered: bool,
}

#[derive(Debug, Clone)]
pub struct CellCheckReport {
    pub per_cell: Vec<CellCheck>,
    pub coverage_rate: f64,
    pub draws_used: usize,
}

/// Posterior predictive check on the fully observed contingency table.
///
/// For a subsample of retained draws, simulates a replicate dataset of the
/// same real-record count from the full model (survey values, unit status,
/// indicators with monotone forcing), restricts to fully observed
/// respondents and records the observable cell proportions. Each observed
/// cell proportion is then checked against its central 95% interval across
/// replicates.
pub fn posterior_predictive_cells(
    chains: &[DrawSet],
    schema: &VariableSchema,
    spec: &SequenceSpec,
    data: &SurveyDataset,
    replicates_per_draw: usize,
    max_draws: usize,
    seed: u64,
) -> Result<CellCheckReport> {
    if chains.is_empty() {
        return Err(Error::validation("no chains supplied"));
    }
    let real = data.without_synthetic();
    let observed = observed_cell_table(&real)?;
    let n_real = real.len();
    let n_cells = schema.joint_cells();

    // Evenly spaced subsample across all chains' draws.
    let mut all: Vec<(usize, usize)> = Vec::new();
    for (ci, ds) in chains.iter().enumerate() {
        for di in 0..ds.draws.len() {
            all.push((ci, di));
        }
    }
    if all.is_empty() {
        return Err(Error::validation("no retained draws"));
    }
    let step = (all.len() as f64 / max_draws as f64).max(1.0);
    let picked: Vec<(usize, usize)> = (0..)
        .map(|i| (i as f64 * step) as usize)
        .take_while(|&ix| ix < all.len())
        .take(max_draws.max(1))
        .map(|ix| all[ix])
        .collect();

    let mut rng = stream_rng(seed, 7);
    let mut replicate_props: Vec<Vec<f64>> = Vec::new();
    for &(ci, di) in &picked {
        let params = chains[ci].params_at(di);
        let fm = ForwardModel::new(schema, spec, &params)?;
        for _ in 0..replicates_per_draw.max(1) {
            let mut attempts = 0;
            let props = loop {
                attempts += 1;
                let mut counts = vec![0u64; n_cells];
                let mut total = 0u64;
                for _ in 0..n_real {
                    let rec = fm.simulate_record(&[], &mut rng);
                    if rec.is_respondent() && rec.values().iter().all(|&v| v != crate::data::MISSING)
                    {
                        counts[schema.cell_index(rec.values())] += 1;
                        total += 1;
                    }
                }
                if total > 0 {
                    break counts.iter().map(|&c| c as f64 / total as f64).collect::<Vec<f64>>();
                }
                if attempts >= 20 {
                    return Err(Error::numerical(
                        "predictive replicates never produced a fully observed respondent",
                    ));
                }
            };
            replicate_props.push(props);
        }
    }

    let mut per_cell = Vec::with_capacity(n_cells);
    let mut covered_count = 0usize;
    for cell in 0..n_cells {
        let series: Vec<f64> = replicate_props.iter().map(|r| r[cell]).collect();
        let lo = percentile(&series, 2.5);
        let hi = percentile(&series, 97.5);
        let obs = observed.proportions[cell];
        let covered = obs >= lo && obs <= hi;
        covered_count += usize::from(covered);
        per_cell.push(CellCheck {
            cell,
            label: schema.cell_label(cell),
            observed: obs,
            lo,
            hi,
            covered,
        });
    }
    Ok(CellCheckReport {
        coverage_rate: covered_count as f64 / n_cells as f64,
        per_cell,
        draws_used: picked.len(),
    })
}

/// Which nonrespondents to predict for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonrespondentClass {
    /// Respondents whose value for the target variable was missing.
    Item,
    /// Unit nonrespondents.
    Unit,
}

/// Per-draw share of `target` among a nonrespondent class, optionally by an
/// always-observed grouping variable. Returns one labelled draw vector per
/// group, for plotting.
pub fn nonrespondent_prediction(
    chains: &[DrawSet],
    schema: &VariableSchema,
    class: NonrespondentClass,
    target: (VarId, u8),
    by: Option<VarId>,
) -> Result<Vec<(String, Vec<f64>)>> {
    if chains.is_empty() {
        return Err(Error::validation("no chains supplied"));
    }
    let n_cells = chains[0].cube.n_cells;
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
    let mut out = Vec::new();
    for (label, level) in groups {
        let mut series = Vec::new();
        for ds in chains {
            let pattern_in_class: Vec<bool> = ds
                .cube
                .patterns
                .iter()
                .map(|p| match class {
                    NonrespondentClass::Unit => p.unit,
                    NonrespondentClass::Item => !p.unit && p.missing[target.0 .0],
                })
                .collect();
            for row in &ds.cube.per_draw {
                let mut num = 0u64;
                let mut den = 0u64;
                for (pat, in_class) in pattern_in_class.iter().enumerate() {
                    if !in_class {
                        continue;
                    }
                    let base = pat * n_cells;
                    for cell in 0..n_cells {
                        let values = schema.cell_values(cell);
                        if let (Some(v), Some(l)) = (by, level) {
                            if values[v.0] != l {
                                continue;
                            }
                        }
                        let c = u64::from(row[base + cell]);
                        den += c;
                        if values[target.0 .0] == target.1 {
                            num += c;
                        }
                    }
                }
                if den > 0 {
                    series.push(num as f64 / den as f64);
                }
            }
        }
        if series.is_empty() {
            return Err(Error::data(format!(
                "nonrespondent class is empty for group '{label}'"
            )));
        }
        out.push((label, series));
    }
    Ok(out)
}

/// Chain-health summary for one parameter.
#[derive(Debug, Clone)]
pub struct ParamDiagnostics {
    pub name: String,
    pub ess: f64,
    pub rhat: f64,
    /// R-hat exceeds 1.05 (or the statistic is undefined).
    pub flagged: bool,
    /// Zero-variance parameter: ESS / R-hat are undefined.
    pub undefined: bool,
}

/// Split-chain scale reduction and autocorrelation-based effective sample
/// size for every coefficient and head cell.
pub fn chain_diagnostics(chains: &[DrawSet]) -> Result<Vec<ParamDiagnostics>> {
    if chains.is_empty() {
        return Err(Error::validation("no chains supplied"));
    }
    let total_draws: usize = chains.iter().map(|c| c.draws.len()).sum();
    if total_draws < 10 {
        return Err(Error::validation("fewer than 10 retained draws"));
    }
    let mut names: Vec<String> = chains[0].coeff_names.clone();
    names.extend(chains[0].head_labels.iter().cloned());
    let n_coeffs = chains[0].coeff_names.len();

    let mut out = Vec::with_capacity(names.len());
    for (pix, name) in names.iter().enumerate() {
        // Gather per-chain series, split each chain in half.
        let mut subchains: Vec<Vec<f64>> = Vec::new();
        for ds in chains {
            let series: Vec<f64> = ds
                .draws
                .iter()
                .map(|d| {
                    if pix < n_coeffs {
                        d.coeffs[pix]
                    } else {
                        d.head[pix - n_coeffs]
                    }
                })
                .collect();
            let half = series.len() / 2;
            if half >= 2 {
                subchains.push(series[..half].to_vec());
                subchains.push(series[half..2 * half].to_vec());
            } else {
                subchains.push(series);
            }
        }
        let n = subchains.iter().map(Vec::len).min().unwrap_or(0);
        let subchains: Vec<&[f64]> = subchains.iter().map(|c| &c[..n]).collect();
        let m = subchains.len();

        let means: Vec<f64> = subchains.iter().map(|c| mean(c)).collect();
        let vars: Vec<f64> = subchains.iter().map(|c| sample_variance(c)).collect();
        let w = mean(&vars);
        if w <= 0.0 {
            out.push(ParamDiagnostics {
                name: name.clone(),
                ess: f64::NAN,
                rhat: f64::NAN,
                flagged: true,
                undefined: true,
            });
            continue;
        }
        let b_over_n = if m > 1 { sample_variance(&means) } else { 0.0 };
        let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
        let rhat = (var_plus / w).sqrt();

        // Combined autocorrelation with Geyer initial-positive truncation.
        let mut rho_sum = 0.0;
        let mut t = 1usize;
        while t + 1 < n {
            let rho_t = 1.0 - (w - mean_autocov(&subchains, t)) / var_plus;
            let rho_t1 = 1.0 - (w - mean_autocov(&subchains, t + 1)) / var_plus;
            if rho_t + rho_t1 <= 0.0 {
                break;
            }
            rho_sum += rho_t + rho_t1;
            t += 2;
        }
        let ess = (m * n) as f64 / (1.0 + 2.0 * rho_sum).max(1.0 / (m * n) as f64);
        let flagged = !(rhat.is_finite() && rhat <= 1.05);
        out.push(ParamDiagnostics {
            name: name.clone(),
            ess,
            rhat,
            flagged,
            undefined: false,
        });
    }
    Ok(out)
}

fn mean_autocov(chains: &[&[f64]], lag: usize) -> f64 {
    let mut acc = 0.0;
    for c in chains {
        let n = c.len();
        let m = mean(c);
        let mut s = 0.0;
        for i in 0..n - lag {
            s += (c[i] - m) * (c[i + lag] - m);
        }
        acc += s / n as f64;
    }
    acc / chains.len() as f64
}
