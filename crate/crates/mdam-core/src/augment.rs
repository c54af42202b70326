//! Margin augmentation: append one block of synthetic records per auxiliary
//! margin. Each synthetic record observes only the margin variable; the
//! block's empirical distribution matches the margin exactly up to integer
//! rounding, by largest-remainder apportionment rather than random sampling,
//! so the construction is deterministic.

use crate::data::{AuxiliaryMargin, Origin, SurveyDataset, SurveyRecord, VarId, MISSING};
use crate::error::{Error, Result};

/// Cap on the block-size multiplier accepted from a target standard error.
pub const MAX_MULTIPLIER: f64 = 1e6;

/// One synthetic block before it is appended.
#[derive(Debug, Clone)]
pub struct SyntheticBlock {
    pub variable: VarId,
    pub target_counts: Vec<u64>,
    pub records: Vec<SurveyRecord>,
}

/// Largest-remainder apportionment of `probs * size` into integer counts
/// summing to `size`. Per-level error is below one record.
pub fn largest_remainder(probs: &[f64], size: u64) -> Vec<u64> {
    let mut counts: Vec<u64> = Vec::with_capacity(probs.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(probs.len());
    let mut assigned = 0u64;
    for (i, &p) in probs.iter().enumerate() {
        let exact = p * size as f64;
        let floor = exact.floor() as u64;
        counts.push(floor);
        assigned += floor;
        remainders.push((i, exact - floor.min(u64::MAX) as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut left = size.saturating_sub(assigned);
    for (i, _) in remainders {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn build_block(
    d: &SurveyDataset,
    margin: &AuxiliaryMargin,
    n_respondents: usize,
) -> Result<SyntheticBlock> {
    let schema = d.schema();
    let var = margin.validate_against(schema)?;
    if margin.effective_multiplier <= 0.0 {
        return Err(Error::validation(format!(
            "margin for '{}' has non-positive multiplier {}",
            margin.variable, margin.effective_multiplier
        )));
    }
    let mut records = Vec::new();
    let mut target_counts = vec![0u64; schema.var(var).n_levels()];
    match &margin.stratify_by {
        None => {
            let size = (margin.effective_multiplier * n_respondents as f64).round() as u64;
            target_counts = largest_remainder(&margin.probabilities, size);
            records.reserve(size as usize);
            for (level, &count) in target_counts.iter().enumerate() {
                for _ in 0..count {
                    let mut values = vec![MISSING; schema.len()];
                    values[var.0] = level as u8;
                    records.push(SurveyRecord::synthetic(values));
                }
            }
        }
        Some(strat) => {
            // One sub-block per stratum, sized against the stratum's own
            // respondent count; each record carries the stratum level so
            // the margin constrains the model within the stratum.
            let sid = schema.require(strat)?;
            for (s, row) in margin.stratum_probabilities.iter().enumerate() {
                let n_s = d
                    .records()
                    .iter()
                    .filter(|r| r.is_respondent() && r.value(sid) == Some(s as u8))
                    .count();
                let size = (margin.effective_multiplier * n_s as f64).round() as u64;
                let counts = largest_remainder(row, size);
                for (level, &count) in counts.iter().enumerate() {
                    target_counts[level] += count;
                    for _ in 0..count {
                        let mut values = vec![MISSING; schema.len()];
                        values[sid.0] = s as u8;
                        values[var.0] = level as u8;
                        records.push(SurveyRecord::synthetic(values));
                    }
                }
            }
        }
    }
    Ok(SyntheticBlock {
        variable: var,
        target_counts,
        records,
    })
}

/// Append one synthetic block per margin. Block size is
/// `round(multiplier x respondent rows)`; original records are untouched.
pub fn augment(d: &SurveyDataset, margins: &[AuxiliaryMargin]) -> Result<SurveyDataset> {
    if d.records().iter().any(|r| r.origin() == Origin::Synthetic) {
        return Err(Error::validation("dataset already contains synthetic records"));
    }
    let n = d.n_respondents();
    let mut extra = Vec::new();
    for m in margins {
        extra.extend(build_block(d, m, n)?.records);
    }
    d.with_appended(extra)
}

/// Smallest block-size multiplier so a binomial proportion at the margin's
/// most uncertain level has standard error at most `target_se`:
/// `m*n >= p(1-p)/se^2`.
pub fn multiplier_for_se(margin: &AuxiliaryMargin, target_se: f64, n: usize) -> Result<f64> {
    if target_se <= 0.0 {
        return Err(Error::validation("target standard error must be positive"));
    }
    if n == 0 {
        return Err(Error::validation("n must be positive"));
    }
    let worst = margin
        .probabilities
        .iter()
        .map(|&p| p * (1.0 - p))
        .fold(0.0, f64::max);
    let needed = worst / (target_se * target_se);
    let m = needed / n as f64;
    if needed < 1.0 {
        return Err(Error::validation(format!(
            "target standard error {target_se} needs fewer than one record"
        )));
    }
    if m > MAX_MULTIPLIER {
        return Err(Error::validation(format!(
            "target standard error {target_se} needs multiplier {m:.3e}, beyond the {MAX_MULTIPLIER:.0e} cap"
        )));
    }
    Ok(m)
}
