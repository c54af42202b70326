//! Batch subcommands behind the CLI: simulate, fit, summarize. All outputs
//! are UTF-8 comma-separated tables with headers, plus TOML manifests that
//! pin config hash, seed and version for bit-for-bit reproduction.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::augment;
use crate::config::RunConfig;
use crate::data::{
    load_dataset, write_dataset, MissingnessSummary, Predicate, SurveyDataset, VariableSchema,
};
use crate::diagnostics::{
    chain_diagnostics, estimand_summary, model_implied_summary, nonrespondent_prediction,
    posterior_predictive_cells, NonrespondentClass,
};
use crate::error::{Error, Result};
use crate::sampler::{
    ChainConfig, CompletedCube, DrawRow, DrawSet, MissPattern, run_chain_full,
};
use crate::simgen;
use crate::spec::{count_identification, named_model, validate_sequence, NamedModel, SequenceSpec};

/// CLI overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct FitOverrides {
    pub seed: Option<u64>,
    pub chains: Option<usize>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub force: bool,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn config_digest(cfg_path: Option<&Path>) -> Result<String> {
    match cfg_path {
        Some(p) => {
            let bytes =
                std::fs::read(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            let digest = Sha256::digest(&bytes);
            Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
        }
        None => Ok("none".to_string()),
    }
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg_path: Option<&Path>,
    seed: u64,
    chains: usize,
) -> Result<()> {
    let manifest = format!(
        "command = \"{command}\"\nversion = \"{}\"\nseed = {seed}\nchains = {chains}\nconfig_sha256 = \"{}\"\nconfig_path = \"{}\"\n",
        env!("CARGO_PKG_VERSION"),
        config_digest(cfg_path)?,
        cfg_path.map(|p| p.display().to_string()).unwrap_or_default(),
    );
    write_text(&out.join("manifest.toml"), &manifest)
}

/// Resolve the chain-thread cap: `MDAM_THREADS`, else available parallelism.
fn thread_cap() -> usize {
    std::env::var("MDAM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Generate a dataset per the `[simulate]` section: writes `dataset.csv`,
/// `truth.toml` and `true_estimands.csv` into the output directory.
pub fn cmd_simulate(cfg: &RunConfig, cfg_path: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let sim = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| Error::config("config has no [simulate] section"))?;
    create_dir(out)?;
    match sim.kind.as_str() {
        "scenario" => {
            let truth = sim
                .scenario
                .as_ref()
                .ok_or_else(|| Error::config("[simulate.scenario] missing"))?;
            truth.validate()?;
            let n = sim
                .n
                .ok_or_else(|| Error::config("simulate.n required for scenario"))?;
            let data = simgen::generate_scenario(truth, n, seed);
            write_dataset(&data, out.join("dataset.csv"), "NA")?;
            let margins = simgen::implied_margin_list(truth);
            let (m1, m2) = simgen::implied_margins(truth);
            let truth_toml = toml::to_string_pretty(&ScenarioTruthFile {
                scenario: truth.clone(),
                margin_x1: margins[0].probabilities.clone(),
                margin_x2: margins[1].probabilities.clone(),
            })
            .map_err(|e| Error::config(e.to_string()))?;
            write_text(&out.join("truth.toml"), &truth_toml)?;
            let mut est = String::from("label,value\n");
            est.push_str(&format!("Pr(x1=1),{m1}\n"));
            est.push_str(&format!("Pr(x2=1),{m2}\n"));
            write_text(&out.join("true_estimands.csv"), &est)?;
        }
        "cps_like" => {
            let cps = sim
                .cps
                .as_ref()
                .ok_or_else(|| Error::config("[simulate.cps] missing"))?;
            let path = cfg.resolve(&cps.truth_file);
            let truths = CpsTruthFile::from_path(&path)?;
            let truth = truths.get(&cps.variant)?;
            let (data, margins, estimands) = simgen::generate_cps_like(&truth, seed)?;
            write_dataset(&data, out.join("dataset.csv"), "NA")?;
            let mut doc = BTreeMap::new();
            doc.insert(cps.variant.clone(), truth.clone());
            let truth_toml =
                toml::to_string_pretty(&doc).map_err(|e| Error::config(e.to_string()))?;
            write_text(&out.join("truth.toml"), &truth_toml)?;
            let mut est = String::from("label,value\n");
            for (s, t) in estimands.state_turnout.iter().enumerate() {
                est.push_str(&format!("turnout[{}],{t}\n", truth.state_labels[s]));
            }
            est.push_str(&format!("pooled_turnout,{}\n", estimands.pooled_turnout));
            est.push_str(&format!(
                "unit_nonvoter_share,{}\n",
                estimands.unit_nonvoter_share
            ));
            est.push_str(&format!(
                "item_nonvoter_share,{}\n",
                estimands.item_nonvoter_share
            ));
            for (m, label) in margins.iter().zip(["age", "vote"]) {
                est.push_str(&format!(
                    "margin[{label}],{}\n",
                    m.probabilities
                        .iter()
                        .map(|p| p.to_string())
                        .collect::<Vec<_>>()
                        .join(";")
                ));
            }
            write_text(&out.join("true_estimands.csv"), &est)?;
        }
        other => {
            return Err(Error::config(format!(
                "unknown simulate kind '{other}' (scenario | cps_like)"
            )))
        }
    }
    write_manifest(out, "simulate", cfg_path, seed, 0)
}

#[derive(Serialize, Deserialize)]
struct ScenarioTruthFile {
    scenario: simgen::ScenarioTruth,
    margin_x1: Vec<f64>,
    margin_x2: Vec<f64>,
}

/// A TOML file holding one or more named survey-style truths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpsTruthFile(pub BTreeMap<String, simgen::CpsTruth>);

impl CpsTruthFile {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn get(&self, variant: &str) -> Result<simgen::CpsTruth> {
        self.0
            .get(variant)
            .cloned()
            .ok_or_else(|| Error::config(format!("truth file has no variant '{variant}'")))
    }
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

pub struct FitResult {
    pub chains: Vec<DrawSet>,
    pub model_name: String,
    pub schema: Arc<VariableSchema>,
    pub spec: SequenceSpec,
}

/// Load, validate, check identification, augment and run the chains, then
/// write draws, accumulators, acceptance rates, the identification report,
/// the final completed dataset and a manifest.
pub fn cmd_fit(
    cfg: &RunConfig,
    cfg_path: Option<&Path>,
    out: &Path,
    overrides: &FitOverrides,
) -> Result<FitResult> {
    let schema = cfg.build_schema()?;
    let data_section = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::config("config has no [data] section"))?;
    let opts = cfg.load_options()?;
    let data = load_dataset(cfg.resolve(&data_section.path), Arc::clone(&schema), &opts)?;
    let margins = cfg.build_margins(&schema, Some(data.n_respondents()))?;
    let (spec, model_name) = cfg.build_spec(&schema)?;
    let summary = MissingnessSummary::from_dataset(&data);

    let validation = validate_sequence(&spec, &schema, &margins, Some(&summary));
    for w in &validation.warnings {
        eprintln!("warning: {w}");
    }
    if !validation.is_valid() {
        return Err(Error::Validation(validation.errors.join("; ")));
    }

    let ident = count_identification(&spec, &schema, &margins, &summary);
    create_dir(out)?;
    write_text(&out.join("identification.txt"), &ident.render())?;
    if ident.verdict == crate::spec::Verdict::Overparameterized {
        let unfunded: Vec<String> = ident.unfunded().iter().map(|c| c.name.clone()).collect();
        if !overrides.force {
            return Err(Error::Identification(format!(
                "{} unfunded coefficient(s): {}; rerun with --force to fit anyway",
                unfunded.len(),
                unfunded.join(", ")
            )));
        }
        eprintln!(
            "warning: fitting an overparameterized model (--force); unfunded: {}",
            unfunded.join(", ")
        );
    }

    let augmented = augment(&data, &margins)?;
    let mut chain_cfg = cfg.chain_config();
    if let Some(s) = overrides.seed {
        chain_cfg.seed = s;
    }
    if let Some(it) = overrides.iterations {
        chain_cfg.iterations = it;
    }
    if let Some(b) = overrides.burn_in {
        chain_cfg.burn_in = b;
    }
    chain_cfg.validate()?;
    let n_chains = overrides.chains.unwrap_or(cfg.chain.chains).max(1);

    let cap = thread_cap().max(1);
    let mut results: Vec<Option<Result<(DrawSet, SurveyDataset)>>> =
        (0..n_chains).map(|_| None).collect();
    let schema_ref = &schema;
    let spec_ref = &spec;
    let data_ref = &augmented;
    let cfg_ref = &chain_cfg;
    for batch in (0..n_chains).collect::<Vec<_>>().chunks(cap) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &ix in batch {
                handles.push((
                    ix,
                    scope.spawn(move || run_chain_full(schema_ref, spec_ref, data_ref, cfg_ref, ix)),
                ));
            }
            for (ix, h) in handles {
                results[ix] = Some(h.join().expect("chain thread panicked"));
            }
        });
    }

    let mut chains = Vec::with_capacity(n_chains);
    let mut completed_first: Option<SurveyDataset> = None;
    for r in results.into_iter() {
        let (ds, completed) = r.expect("all chains ran")?;
        if completed_first.is_none() {
            completed_first = Some(completed);
        }
        chains.push(ds);
    }

    for ds in &chains {
        write_drawset(ds, out, &schema)?;
    }
    write_meta(out, &model_name, &chains, &chain_cfg, n_chains)?;
    if let Some(completed) = &completed_first {
        write_dataset(completed, out.join("completed_last.csv"), &opts.missing_code)?;
    }
    write_manifest(out, "fit", cfg_path, chain_cfg.seed, n_chains)?;
    Ok(FitResult {
        chains,
        model_name,
        schema,
        spec,
    })
}

// ---------------------------------------------------------------------------
// DrawSet file round trip
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct FitMeta {
    model: String,
    chains: usize,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
    model_labels: Vec<String>,
    model_coeff_counts: Vec<usize>,
    head_dims: Vec<(String, usize)>,
    monotone_violations: u64,
}

fn write_meta(
    out: &Path,
    model_name: &str,
    chains: &[DrawSet],
    cfg: &ChainConfig,
    n_chains: usize,
) -> Result<()> {
    let first = &chains[0];
    let meta = FitMeta {
        model: model_name.to_string(),
        chains: n_chains,
        iterations: cfg.iterations,
        burn_in: cfg.burn_in,
        thin: cfg.thin,
        seed: cfg.seed,
        model_labels: first.model_labels.clone(),
        model_coeff_counts: first.model_coeff_counts.clone(),
        head_dims: first.head_dims.clone(),
        monotone_violations: chains.iter().map(|c| c.monotone_violations).sum(),
    };
    write_text(
        &out.join("meta.toml"),
        &toml::to_string_pretty(&meta).map_err(|e| Error::config(e.to_string()))?,
    )
}

fn write_drawset(ds: &DrawSet, out: &Path, schema: &VariableSchema) -> Result<()> {
    let c = ds.chain_index;
    // Draws: one row per retained draw.
    let path = out.join(format!("draws_c{c}.csv"));
    let file = std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = vec!["iteration".to_string()];
    header.extend(ds.coeff_names.iter().cloned());
    header.extend(ds.head_labels.iter().cloned());
    writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path.display().to_string(), e))?;
    for d in &ds.draws {
        let mut fields = Vec::with_capacity(header.len());
        fields.push(d.iteration.to_string());
        fields.extend(d.coeffs.iter().map(|x| format!("{x:.17e}")));
        fields.extend(d.head.iter().map(|x| format!("{x:.17e}")));
        writeln!(w, "{}", fields.join(","))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;

    // Acceptance rates.
    let mut acc = String::from("coefficient,rate\n");
    for (name, rate) in &ds.acceptance {
        acc.push_str(&format!("{name},{rate}\n"));
    }
    write_text(&out.join(format!("acceptance_c{c}.csv")), &acc)?;

    // Patterns (same across chains; written per chain for self-containment).
    let mut pat = String::from("pattern,unit");
    for (_, v) in schema.vars() {
        pat.push_str(&format!(",miss_{}", v.name));
    }
    pat.push('\n');
    for (i, p) in ds.cube.patterns.iter().enumerate() {
        pat.push_str(&format!("{i},{}", u8::from(p.unit)));
        for m in &p.missing {
            pat.push_str(&format!(",{}", u8::from(*m)));
        }
        pat.push('\n');
    }
    write_text(&out.join(format!("patterns_c{c}.csv")), &pat)?;

    // Completed-data cube: draw, pattern, one column per joint cell.
    let path = out.join(format!("cube_c{c}.csv"));
    let file = std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = vec!["draw".to_string(), "pattern".to_string()];
    header.extend((0..ds.cube.n_cells).map(|i| format!("cell{i}")));
    writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path.display().to_string(), e))?;
    for (di, row) in ds.cube.per_draw.iter().enumerate() {
        for (pi, _) in ds.cube.patterns.iter().enumerate() {
            let mut fields = vec![di.to_string(), pi.to_string()];
            let base = pi * ds.cube.n_cells;
            fields.extend(
                row[base..base + ds.cube.n_cells]
                    .iter()
                    .map(|x| x.to_string()),
            );
            writeln!(w, "{}", fields.join(","))
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read every chain of a fit directory back into memory.
pub fn read_fit_dir(dir: &Path) -> Result<(FitMetaPublic, Vec<DrawSet>)> {
    let meta: FitMeta = toml::from_str(&read_text(&dir.join("meta.toml"))?).map_err(|e| {
        Error::Parse {
            path: dir.join("meta.toml").display().to_string(),
            msg: e.to_string(),
        }
    })?;
    let mut chains = Vec::new();
    for c in 0.. {
        let draws_path = dir.join(format!("draws_c{c}.csv"));
        if !draws_path.exists() {
            break;
        }
        chains.push(read_drawset(dir, c, &meta)?);
    }
    if chains.is_empty() {
        return Err(Error::data(format!(
            "no draws files found in {}",
            dir.display()
        )));
    }
    Ok((
        FitMetaPublic {
            model: meta.model,
            monotone_violations: meta.monotone_violations,
        },
        chains,
    ))
}

/// The subset of fit metadata summarize needs.
pub struct FitMetaPublic {
    pub model: String,
    pub monotone_violations: u64,
}

fn read_drawset(dir: &Path, chain_ix: usize, meta: &FitMeta) -> Result<DrawSet> {
    let draws_path = dir.join(format!("draws_c{chain_ix}.csv"));
    let text = read_text(&draws_path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::data("empty draws file"))?
        .split(',')
        .collect();
    let n_coeffs: usize = meta.model_coeff_counts.iter().sum();
    let coeff_names: Vec<String> = header[1..1 + n_coeffs].iter().map(|s| s.to_string()).collect();
    let head_labels: Vec<String> = header[1 + n_coeffs..].iter().map(|s| s.to_string()).collect();
    let mut draws = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let iteration: usize = fields[0]
            .parse()
            .map_err(|_| Error::data("bad iteration in draws file"))?;
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::data("bad float in draws file"))
        };
        let coeffs = fields[1..1 + n_coeffs]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<Vec<f64>>>()?;
        let head = fields[1 + n_coeffs..]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<Vec<f64>>>()?;
        draws.push(DrawRow {
            iteration,
            head,
            coeffs,
        });
    }

    // Patterns.
    let pat_text = read_text(&dir.join(format!("patterns_c{chain_ix}.csv")))?;
    let mut patterns = Vec::new();
    for line in pat_text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        patterns.push(MissPattern {
            unit: fields[1] == "1",
            missing: fields[2..].iter().map(|s| *s == "1").collect(),
        });
    }

    // Cube.
    let cube_text = read_text(&dir.join(format!("cube_c{chain_ix}.csv")))?;
    let mut cube_lines = cube_text.lines();
    let cube_header: Vec<&str> = cube_lines
        .next()
        .ok_or_else(|| Error::data("empty cube file"))?
        .split(',')
        .collect();
    let n_cells = cube_header.len() - 2;
    let mut per_draw: Vec<Vec<u32>> = vec![vec![0; patterns.len() * n_cells]; draws.len()];
    for line in cube_lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let di: usize = fields[0].parse().map_err(|_| Error::data("bad cube row"))?;
        let pi: usize = fields[1].parse().map_err(|_| Error::data("bad cube row"))?;
        for (cell, s) in fields[2..].iter().enumerate() {
            per_draw[di][pi * n_cells + cell] =
                s.parse().map_err(|_| Error::data("bad cube count"))?;
        }
    }

    // Acceptance.
    let acc_text = read_text(&dir.join(format!("acceptance_c{chain_ix}.csv")))?;
    let mut acceptance = Vec::new();
    for line in acc_text.lines().skip(1) {
        if let Some((name, rate)) = line.rsplit_once(',') {
            acceptance.push((
                name.to_string(),
                rate.parse::<f64>()
                    .map_err(|_| Error::data("bad acceptance rate"))?,
            ));
        }
    }

    Ok(DrawSet {
        chain_index: chain_ix,
        model_labels: meta.model_labels.clone(),
        model_coeff_counts: meta.model_coeff_counts.clone(),
        coeff_names,
        head_labels,
        head_dims: meta.head_dims.clone(),
        draws,
        cube: CompletedCube {
            patterns,
            n_cells,
            per_draw,
        },
        acceptance,
        monotone_violations: meta.monotone_violations,
    })
}

// ---------------------------------------------------------------------------
// summarize
// ---------------------------------------------------------------------------

/// Summarize one or more fit directories: the estimand table (side by side
/// across fits via the model column), posterior predictive cell plot data,
/// nonrespondent prediction draws and chain diagnostics.
pub fn cmd_summarize(
    cfg: &RunConfig,
    cfg_path: Option<&Path>,
    draw_dirs: &[PathBuf],
    out: &Path,
) -> Result<()> {
    if draw_dirs.is_empty() {
        return Err(Error::config("summarize needs at least one --draws directory"));
    }
    let schema = cfg.build_schema()?;
    create_dir(out)?;

    let mut fits = Vec::new();
    for dir in draw_dirs {
        fits.push((dir.clone(), read_fit_dir(dir)?));
    }

    // Estimand table: the completed-data estimand over real records plus
    // the model-implied population share the margins calibrate.
    let estimands = cfg.estimand_list(&schema)?;
    let mut table = String::from(
        "model,label,target,subgroup,mean,lo,hi,skipped_draws,population_mean,population_lo,population_hi\n",
    );
    for (_, (meta, chains)) in &fits {
        let spec = spec_for_model(cfg, &schema, &meta.model)?;
        for (label, target, subgroup) in &estimands {
            let t = crate::data::parse_target(target, &schema)?;
            let p = Predicate::parse(subgroup, &schema)?;
            let s = estimand_summary(chains, &schema, t, &p, label.clone())?;
            let pop = model_implied_summary(chains, &schema, &spec, t, &p, label.clone())?;
            table.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6}\n",
                meta.model,
                s.label,
                target,
                subgroup,
                s.mean,
                s.lo,
                s.hi,
                s.skipped_draws,
                pop.mean,
                pop.lo,
                pop.hi
            ));
        }
    }
    write_text(&out.join("estimands.csv"), &table)?;

    // Model-based checks need the dataset and a spec per fit.
    let have_data = cfg.data.is_some();
    let mut ppc_summary = String::from("model,coverage,draws_used,monotone_violations\n");
    for (_, (meta, chains)) in &fits {
        let spec = spec_for_model(cfg, &schema, &meta.model)?;
        if have_data {
            let opts = cfg.load_options()?;
            let data = load_dataset(
                cfg.resolve(&cfg.data.as_ref().unwrap().path),
                Arc::clone(&schema),
                &opts,
            )?;
            let report = posterior_predictive_cells(
                chains,
                &schema,
                &spec,
                &data,
                cfg.ppc.replicates_per_draw,
                cfg.ppc.max_draws,
                cfg.chain.seed,
            )?;
            let mut cells = String::from("cell,label,observed,lo,hi,covered\n");
            for c in &report.per_cell {
                cells.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6},{}\n",
                    c.cell, c.label, c.observed, c.lo, c.hi, u8::from(c.covered)
                ));
            }
            write_text(&out.join(format!("ppc_cells_{}.csv", meta.model)), &cells)?;
            ppc_summary.push_str(&format!(
                "{},{:.4},{},{}\n",
                meta.model, report.coverage_rate, report.draws_used, meta.monotone_violations
            ));
        }

        // Nonrespondent predictions for the grid/estimand target variable.
        if let Some(target) = estimands.first().map(|(_, t, _)| t.clone()).or_else(|| {
            cfg.estimand_grid.as_ref().map(|g| g.target.clone())
        }) {
            let t = crate::data::parse_target(&target, &schema)?;
            let by = cfg
                .estimand_grid
                .as_ref()
                .and_then(|g| g.groups.first())
                .and_then(|g| schema.lookup(g));
            let mut pred = String::from("class,group,draw,value\n");
            for (class, name) in [
                (NonrespondentClass::Item, "item"),
                (NonrespondentClass::Unit, "unit"),
            ] {
                match nonrespondent_prediction(chains, &schema, class, t, by) {
                    Ok(groups) => {
                        for (glabel, series) in groups {
                            for (i, v) in series.iter().enumerate() {
                                pred.push_str(&format!("{name},{glabel},{i},{v:.6}\n"));
                            }
                        }
                    }
                    Err(e) => eprintln!("note: nonrespondent prediction ({name}): {e}"),
                }
            }
            write_text(&out.join(format!("nonresp_pred_{}.csv", meta.model)), &pred)?;
        }

        // Chain health.
        let diags = chain_diagnostics(chains)?;
        let mut dcsv = String::from("parameter,ess,rhat,flagged\n");
        for d in &diags {
            dcsv.push_str(&format!(
                "{},{:.1},{:.4},{}\n",
                d.name,
                d.ess,
                d.rhat,
                u8::from(d.flagged)
            ));
        }
        write_text(&out.join(format!("diagnostics_{}.csv", meta.model)), &dcsv)?;
    }
    if have_data {
        write_text(&out.join("ppc_summary.csv"), &ppc_summary)?;
    }
    write_manifest(out, "summarize", cfg_path, cfg.chain.seed, fits.len())
}

fn spec_for_model(
    cfg: &RunConfig,
    schema: &Arc<VariableSchema>,
    model: &str,
) -> Result<SequenceSpec> {
    if model == "inline" {
        let (spec, _) = cfg.build_spec(schema)?;
        Ok(spec)
    } else {
        named_model(NamedModel::parse(model)?, schema)
    }
}
