use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tendon_core::dataio::{
    clip_to_max_stress, load_chain, load_experiment, load_fidelity_means, read_json, save_chain,
    save_experiment, save_fidelity_means, sidecar_path, truncate, write_json, write_text, ChainMetadata,
    ChainTable, FormatOptions,
};
use tendon_core::fidelity::{estimate_sigma as pooled_sigma, run_selection, FidelitySummary, XI_PRIOR_MEAN};
use tendon_core::mixed::{
    fit_population, linear_modulus_comparison, posterior_predictive_params, posterior_predictive_stress,
    MixedConfig, Parameterization, PopulationPosterior,
};
use tendon_core::samplers::diagnostics::{report, DiagnosticsReport};
use tendon_core::samplers::{derive_seed, Chain};
use tendon_core::synth::{generate_population, uniform_stretch_grid, Damage, PopulationSpec};
use tendon_core::{Experiment, ModelParams, Population, TendonType, UnconstrainedParams};

use crate::config::RunConfig;
use crate::{
    DiagnoseArgs, EstimateSigmaArgs, Failure, FitPopArgs, Outcome, PredictArgs, SelectArgs, SynthArgs, TrimArgs,
};

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn data(msg: impl Into<String>) -> Failure {
    Failure::Data(anyhow!(msg.into()))
}

fn json_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// `None` for NaN so the value survives a JSON roundtrip.
fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn load_inputs(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Vec<Experiment>, Failure> {
    let opts = FormatOptions {
        strain_unit: cfg.strain_unit,
        id: None,
        tendon_type: cfg.tendon_type,
    };
    let exps = inputs
        .iter()
        .map(|p| load_experiment(p, &opts))
        .collect::<tendon_core::Result<Vec<_>>>()?;
    let mut seen = HashSet::new();
    for e in &exps {
        if !seen.insert(e.id().to_string()) {
            return Err(data(format!("duplicate experiment id {:?}", e.id())));
        }
    }
    Ok(exps)
}

fn save_chains(
    dir: &Path,
    stem: &str,
    chains: &[Chain],
    columns: &[String],
    config: &serde_json::Value,
    force: bool,
) -> Result<Vec<String>, Failure> {
    let mut files = Vec::with_capacity(chains.len());
    for (k, c) in chains.iter().enumerate() {
        let name = format!("{stem}chain{k}.csv");
        let table = ChainTable {
            columns: columns.to_vec(),
            draws: c.draws.clone(),
        };
        let meta = ChainMetadata {
            seed: c.seed,
            chain_index: k,
            columns: columns.to_vec(),
            acceptance_rate: c.block_acceptance.clone(),
            divergences: c.divergences,
            adaptation: json_value(&c.adaptation),
            config: config.clone(),
        };
        save_chain(dir.join(&name), &table, &meta, force)?;
        files.push(name);
    }
    Ok(files)
}

/// Everything `select` records about one experiment.
#[derive(Debug, Serialize)]
struct SelectionRecord<'a> {
    source: String,
    seed: u64,
    config: &'a RunConfig,
    chain_files: Vec<String>,
    summary: &'a FidelitySummary,
}

pub fn select(cfg: &mut RunConfig, a: &SelectArgs, force: bool) -> Outcome {
    if let Some(c) = a.chains {
        cfg.selection.chains = c;
    }
    if let Some(b) = a.burn_in {
        cfg.selection.burn_in = b;
    }
    if let Some(i) = a.iterations {
        cfg.selection.iterations = i;
    }
    if let Some(t) = a.threshold {
        cfg.selection.threshold = t;
    }
    check_threshold(cfg.selection.threshold)?;
    if cfg.selection.chains == 0 || cfg.selection.iterations == 0 {
        return Err(usage("selection needs at least one chain and one iteration"));
    }
    let exps = load_inputs(cfg, &a.inputs)?;
    let cfg = &*cfg;
    let results: Vec<_> = exps
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let seed = derive_seed(cfg.seed, i as u64);
            run_selection(e, &cfg.selection_config(seed)).map(|s| (seed, s))
        })
        .collect();
    let config = json_value(cfg);
    let mut unconverged = Vec::new();
    for ((path, e), result) in a.inputs.iter().zip(&exps).zip(results) {
        let (seed, summary) = result.map_err(|err| Failure::Data(anyhow!("{}: {err}", e.id())))?;
        let id = summary.id.clone();
        save_fidelity_means(a.out.join(format!("{id}.fidelity.csv")), &summary.stretch, &summary.fidelity_mean, force)?;
        let chain_files = save_chains(&a.out, &format!("{id}."), &summary.chains, &summary.column_names(), &config, force)?;
        let record = SelectionRecord {
            source: path.display().to_string(),
            seed,
            config: cfg,
            chain_files,
            summary: &summary,
        };
        write_json(&a.out.join(format!("{id}.selection.json")), &record, force)?;
        let cut = summary
            .truncation_stretch()
            .map_or("none".to_string(), |l| format!("strain {:.4}", l - 1.0));
        println!(
            "{id}: {} observations, truncation {cut}, max R-hat {:.3}",
            summary.stretch.len(),
            summary.diagnostics.max_rhat
        );
        if !summary.converged {
            unconverged.push(id);
        }
    }
    if unconverged.is_empty() {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!("selection chains of {}", unconverged.join(", "))))
    }
}

fn check_threshold(t: f64) -> Result<(), Failure> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(usage(format!("threshold must lie in (0, 1], got {t}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrimEntry {
    pub id: String,
    pub source: String,
    pub output: String,
    pub observations: usize,
    pub retained: usize,
    pub truncation_stretch: Option<f64>,
    /// Stage-one posterior mean of `b`.
    pub b_mean: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrimManifest {
    pub threshold: f64,
    pub config: RunConfig,
    pub experiments: Vec<TrimEntry>,
}

fn selection_b_mean(path: &Path) -> Option<f64> {
    let v: serde_json::Value = read_json(path).ok()?;
    v.get("summary")?.get("b_mean")?.as_f64()
}

pub fn trim(cfg: &mut RunConfig, a: &TrimArgs, force: bool) -> Outcome {
    if let Some(t) = a.threshold {
        cfg.selection.threshold = t;
    }
    check_threshold(cfg.selection.threshold)?;
    let exps = load_inputs(cfg, &a.inputs)?;
    let mut entries = Vec::with_capacity(exps.len());
    let mut trimmed = Vec::with_capacity(exps.len());
    for (path, e) in a.inputs.iter().zip(&exps) {
        let id = e.id();
        let (stretch, means) = load_fidelity_means(a.selection.join(format!("{id}.fidelity.csv")))?;
        let clipped = clip_to_max_stress(e);
        let matches = stretch.len() == clipped.len()
            && stretch
                .iter()
                .zip(clipped.stretch())
                .all(|(s, l)| (s - l).abs() <= 1e-12 * l.abs());
        if !matches {
            return Err(data(format!("{id}: fidelity file does not match the experiment's stretches")));
        }
        let out = truncate(&clipped, &means, cfg.selection.threshold)
            .map_err(|err| Failure::Data(anyhow!("experiment {id}: {err}")))?;
        let file = format!("{id}.csv");
        entries.push(TrimEntry {
            id: id.to_string(),
            source: path.display().to_string(),
            output: file.clone(),
            observations: e.len(),
            retained: out.len(),
            truncation_stretch: out.truncation_index().map(|i| clipped.stretch()[i]),
            b_mean: selection_b_mean(&a.selection.join(format!("{id}.selection.json"))),
        });
        trimmed.push((file, out));
    }
    for (file, out) in &trimmed {
        save_experiment(a.out.join(file), out, force)?;
    }
    for t in &entries {
        println!("{}: kept {} of {} observations", t.id, t.retained, t.observations);
    }
    let manifest = TrimManifest {
        threshold: cfg.selection.threshold,
        config: cfg.clone(),
        experiments: entries,
    };
    write_json(&a.out.join("trim.json"), &manifest, force)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Interval {
    pub name: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitRecord {
    pub ids: Vec<String>,
    pub inputs: Vec<String>,
    pub tendon_type: TendonType,
    pub sigma_obs: f64,
    pub config: RunConfig,
    pub sampler: MixedConfig,
    pub chain_files: Vec<String>,
    pub converged: bool,
    pub max_rhat: Option<f64>,
    pub min_ess: Option<f64>,
    pub divergences: usize,
    /// Posterior mean and central 95% interval of each `μ_pop` component.
    pub mu_pop: Vec<Interval>,
}

pub fn fit_pop(cfg: &mut RunConfig, a: &FitPopArgs, force: bool) -> Outcome {
    let m = &mut cfg.mixed;
    if let Some(v) = a.chains {
        m.chains = v;
    }
    if let Some(v) = a.warmup {
        m.warmup = v;
    }
    if let Some(v) = a.draws {
        m.draws = v;
    }
    if let Some(v) = a.step_size {
        m.step_size = v;
    }
    if let Some(v) = a.adapt_delta {
        m.adapt_delta = v;
    }
    if let Some(v) = a.max_tree_depth {
        m.max_tree_depth = v;
    }
    if let Some(p) = &a.parameterization {
        m.parameterization = if p == "centered" {
            Parameterization::Centered
        } else {
            Parameterization::NonCentered
        };
    }
    let sampler = cfg.mixed_config();
    sampler.nuts.validate()?;
    let exps = load_inputs(cfg, &a.inputs)?;
    if !a.no_selection {
        if let Some(e) = exps.iter().find(|e| e.fidelity().is_none()) {
            return Err(data(format!(
                "{} has no fidelity weights; run `select` and `trim` first or pass --no-selection",
                e.id()
            )));
        }
    }
    let population = Population::new(exps, cfg.sigma_obs())?;
    let posterior = fit_population(&population, &sampler)?;
    let config = json_value(&*cfg);
    let chain_files = save_chains(&a.out, "", &posterior.chains, &posterior.columns, &config, force)?;
    write_json(&a.out.join("diagnostics.json"), &posterior.diagnostics, force)?;
    let mu_pop: Vec<Interval> = UnconstrainedParams::NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let d = posterior.mu_pop_draws(k);
            let (lower, upper) = posterior.mu_pop_interval(k, 0.95);
            Interval {
                name: name.to_string(),
                mean: d.iter().sum::<f64>() / d.len() as f64,
                lower,
                upper,
            }
        })
        .collect();
    let record = FitRecord {
        ids: posterior.ids.clone(),
        inputs: a.inputs.iter().map(|p| p.display().to_string()).collect(),
        tendon_type: population.tendon_type(),
        sigma_obs: population.sigma_obs(),
        config: cfg.clone(),
        sampler,
        chain_files,
        converged: posterior.converged,
        max_rhat: finite(posterior.diagnostics.max_rhat),
        min_ess: finite(posterior.diagnostics.min_ess),
        divergences: posterior.total_divergences(),
        mu_pop,
    };
    write_json(&a.out.join("fit.json"), &record, force)?;
    for iv in &record.mu_pop {
        println!("mu_pop.{}: {:.4} [{:.4}, {:.4}]", iv.name, iv.mean, iv.lower, iv.upper);
    }
    println!(
        "max R-hat {:.4}, min ESS {:.0}, divergences {}",
        posterior.diagnostics.max_rhat, posterior.diagnostics.min_ess, record.divergences
    );
    if posterior.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!(
            "max split R-hat {:.4} ≥ {}",
            posterior.diagnostics.max_rhat, record.sampler.rhat_threshold
        )))
    }
}

fn load_posterior(dir: &Path) -> Result<(FitRecord, PopulationPosterior), Failure> {
    let record: FitRecord = read_json(&dir.join("fit.json"))?;
    let tables = record
        .chain_files
        .iter()
        .map(|f| load_chain(dir.join(f)))
        .collect::<tendon_core::Result<Vec<_>>>()?;
    let posterior = PopulationPosterior::from_tables(record.ids.clone(), tables, record.sampler.rhat_threshold)?;
    Ok((record, posterior))
}

fn csv_table(header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

#[derive(Debug, Serialize)]
struct PredictRecord<'a> {
    fit: String,
    seed: u64,
    draws: usize,
    config: &'a RunConfig,
    /// Kernel-density mode of each predictive parameter.
    modes: Vec<(String, f64)>,
    band_coverage: Vec<(String, f64)>,
    linear_modulus: Option<tendon_core::mixed::LinearModulusComparison>,
    files: Vec<String>,
}

pub fn predict(cfg: &RunConfig, a: &PredictArgs, force: bool) -> Outcome {
    if a.draws == 0 || a.grid_points < 2 || a.band_points < 2 {
        return Err(usage("draws must be positive and grids need at least two points"));
    }
    let (record, posterior) = load_posterior(&a.fit)?;
    let mut files = Vec::new();
    let mut emit = |name: String, text: String| -> Result<(), Failure> {
        write_text(&a.out.join(&name), &text, force)?;
        files.push(name);
        Ok(())
    };

    let pred = posterior_predictive_params(&posterior, a.draws, cfg.seed)?;
    emit(
        "predictive_params.csv".into(),
        csv_table(&ModelParams::NAMES, pred.theta.iter().map(|t| t.to_array().to_vec())),
    )?;
    for (k, name) in ModelParams::NAMES.iter().enumerate() {
        let g = pred.density(k, a.grid_points);
        emit(
            format!("density_{name}.csv"),
            csv_table(&["x", "density"], g.x.iter().zip(&g.density).map(|(x, d)| vec![*x, *d])),
        )?;
    }

    let opts = FormatOptions {
        strain_unit: cfg.strain_unit,
        id: None,
        tendon_type: None,
    };
    let mut band_coverage = Vec::new();
    for (i, (id, input)) in record.ids.iter().zip(&record.inputs).enumerate() {
        let exp = load_experiment(input, &opts)?;
        let grid = uniform_stretch_grid(exp.max_stretch() - 1.0, a.band_points);
        let bands = posterior_predictive_stress(&posterior, i, &grid, record.sigma_obs, derive_seed(cfg.seed, 1 + i as u64))?;
        let at_data = posterior_predictive_stress(&posterior, i, exp.stretch(), record.sigma_obs, derive_seed(cfg.seed, 1 + i as u64))?;
        band_coverage.push((id.clone(), at_data.coverage(exp.stress())));
        let rows = (0..grid.len()).map(|j| vec![bands.stretch[j], bands.median[j], bands.lower[j], bands.upper[j]]);
        emit(format!("bands_{id}.csv"), csv_table(&["stretch", "median", "lower", "upper"], rows))?;
    }

    let linear_modulus = match &a.trim_manifest {
        None => None,
        Some(path) => {
            let manifest: TrimManifest = read_json(path)?;
            let mut exps = Vec::new();
            let mut b_means = Vec::new();
            let mut cuts = Vec::new();
            for t in &manifest.experiments {
                let b = t
                    .b_mean
                    .ok_or_else(|| data(format!("{}: trim manifest has no stage-one b mean", t.id)))?;
                exps.push(clip_to_max_stress(&load_experiment(&t.source, &opts)?));
                b_means.push(b);
                cuts.push(t.truncation_stretch);
            }
            let lm = linear_modulus_comparison(&exps, &b_means, &cuts)?;
            let phi = pred.component(1);
            let hi = phi.iter().copied().fold(0.0, f64::max).max(lm.valid.iter().map(|r| r.slope).fold(0.0, f64::max));
            let grid: Vec<f64> = (0..a.grid_points).map(|j| hi * 1.2 * j as f64 / (a.grid_points - 1) as f64).collect();
            let dens = lm.density(&grid);
            emit(
                "linear_modulus_density.csv".into(),
                csv_table(&["x", "density"], grid.iter().zip(&dens).map(|(x, d)| vec![*x, *d])),
            )?;
            println!("valid linear regions: {}/{}", lm.valid_count(), lm.total);
            Some(lm)
        }
    };

    let modes: Vec<(String, f64)> = ModelParams::NAMES.iter().map(|n| n.to_string()).zip(pred.modes).collect();
    for (n, m) in &modes {
        println!("predictive mode {n}: {m:.6}");
    }
    let out = PredictRecord {
        fit: a.fit.display().to_string(),
        seed: cfg.seed,
        draws: pred.theta.len(),
        config: cfg,
        modes,
        band_coverage,
        linear_modulus,
        files,
    };
    write_json(&a.out.join("predict.json"), &out, force)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SynthRecord<'a> {
    config: &'a RunConfig,
    spec: &'a PopulationSpec,
    xi: Vec<[f64; 4]>,
    params: &'a [ModelParams],
    files: Vec<String>,
}

pub fn synth(cfg: &RunConfig, a: &SynthArgs, force: bool) -> Outcome {
    if a.points < 2 || !(a.max_strain > 0.0) {
        return Err(usage("need at least two points and a positive maximum strain"));
    }
    let mu_pop = match &a.mu_pop {
        Some(v) => [v[0], v[1], v[2], v[3]],
        None => XI_PRIOR_MEAN,
    };
    let mut sigma_pop = [[0.0; 4]; 4];
    for k in 0..4 {
        sigma_pop[k][k] = a.sd[k] * a.sd[k];
    }
    let spec = PopulationSpec {
        tendon_type: cfg.tendon_type.unwrap_or(TendonType::Sdft),
        mu_pop,
        sigma_pop,
        n_experiments: a.n_experiments,
        stretch: uniform_stretch_grid(a.max_strain, a.points),
        noise_sd: a.noise_sd.unwrap_or_else(|| cfg.sigma_obs()),
        sigma_obs: cfg.sigma_obs(),
        damage_offset: a.damage_offset.map(|d| Damage {
            onset: 1.0 + d,
            softening: a.softening,
        }),
        seed: cfg.seed,
    };
    let generated = generate_population(&spec).map_err(|e| match e {
        tendon_core::Error::Data(_) => Failure::Data(e.into()),
        _ => Failure::Usage(e.into()),
    })?;
    let mut files = Vec::new();
    for e in generated.population.experiments() {
        let name = format!("{}.csv", e.id());
        save_experiment(a.out.join(&name), e, force)?;
        files.push(name);
    }
    let record = SynthRecord {
        config: cfg,
        spec: &spec,
        xi: generated.xi.iter().map(|x| x.to_array()).collect(),
        params: &generated.params,
        files,
    };
    write_json(&a.out.join("truth.json"), &record, force)?;
    println!("wrote {} experiments to {}", record.files.len(), a.out.display());
    Ok(())
}

pub fn diagnose(a: &DiagnoseArgs, force: bool) -> Outcome {
    let mut chains = Vec::with_capacity(a.chains.len());
    let mut columns: Option<Vec<String>> = None;
    for path in &a.chains {
        let table = load_chain(path)?;
        match &columns {
            Some(c) if *c != table.columns => {
                return Err(data(format!("{}: columns differ from the first chain", path.display())))
            }
            Some(_) => {}
            None => columns = Some(table.columns.clone()),
        }
        let mut chain = Chain::from_draws(table.draws);
        if let Ok(meta) = read_json::<ChainMetadata>(&sidecar_path(path)) {
            chain.divergences = meta.divergences;
            chain.seed = meta.seed;
            chain.block_acceptance = meta.acceptance_rate;
        }
        chains.push(chain);
    }
    let columns = columns.unwrap_or_default();
    let rep: DiagnosticsReport = report(&chains, &columns)?;
    let draws: Vec<usize> = chains.iter().map(|c| c.draws.len()).collect();
    println!("chains {}, draws per chain {:?}", chains.len(), draws);
    println!(
        "max split R-hat {:.4}, min ESS {:.0}, divergences {}",
        rep.max_rhat,
        rep.min_ess,
        rep.divergences.iter().sum::<usize>()
    );
    let mut order: Vec<usize> = (0..rep.rhat.len()).collect();
    order.sort_by(|&i, &j| rep.rhat[j].total_cmp(&rep.rhat[i]));
    for &k in order.iter().take(10) {
        println!("  {:<28} R-hat {:.4}  ESS {:.0}", rep.names[k], rep.rhat[k], rep.ess[k]);
    }
    if let Some(out) = &a.out {
        write_json(out, &rep, force)?;
    }
    if rep.converged(a.rhat_threshold) {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!("max split R-hat {:.4} ≥ {}", rep.max_rhat, a.rhat_threshold)))
    }
}

pub fn estimate_sigma(cfg: &RunConfig, a: &EstimateSigmaArgs) -> Outcome {
    if !(a.max_strain > 0.0) {
        return Err(usage("maximum strain must be positive"));
    }
    let exps = load_inputs(cfg, &a.inputs)?;
    let sigma = pooled_sigma(&exps, a.max_strain)?;
    println!("sigma_obs {sigma:.6} MPa (strain ≤ {}, {} experiments)", a.max_strain, exps.len());
    Ok(())
}
