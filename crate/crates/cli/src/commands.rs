//! The four pipeline commands.

use std::collections::BTreeSet;
use std::path::Path;

use frk_core::basis::{auto_basis, temporal_basis, tensor_basis, ModelBasis};
use frk_core::diagnostics;
use frk_core::estimate::{fit, initial_state, parameter_entries, FitOptions, FitReport, FitResult, StateSpec};
use frk_core::geometry::{build_incidence, map_supports, IncidenceMatrix, SupportKind};
use frk_core::model::Model;
use frk_core::predict::{nearest_rank, predict, PredictionResult, Summary, Target};
use frk_core::simulate::{simulate, Scenario, SimOptions};
use frk_core::family::Family;
use frk_core::FrkError;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{ResolvedModel, RunConfig};
use crate::error::{CliError, CliResult, Context};
use crate::io::{self, BauSpec, SupportTable};
use crate::plot;

/// Points an error that names a data row at that row's file line.
fn at_row(table: &SupportTable, fallback: &Path, err: FrkError) -> CliError {
    let row = match &err {
        FrkError::EmptySupport { index } | FrkError::OutsideSupport { index, .. } => Some(*index),
        _ => None,
    };
    let ctx = row.and_then(|j| table.lines.get(j).cloned()).unwrap_or_else(|| fallback.display().to_string());
    CliError::from_core(ctx, err)
}

/// Model, data and structural choices rebuilt from a config.
pub struct Setup {
    pub model: Model,
    pub resolved: ResolvedModel,
    pub spec: StateSpec,
    pub data: SupportTable,
}

pub fn build_setup(cfg: &RunConfig) -> CliResult<Setup> {
    let resolved = cfg.model.resolve()?;
    let baus_path = cfg.paths.baus();
    let bau_spec = BauSpec::load(&baus_path)?;
    let grid = bau_spec.build(resolved.linear_trend, &baus_path)?;
    if resolved.family.has_size() && grid.size_params().is_none() {
        return Err(CliError::Config(format!(
            "{}: size: required for the {} family",
            baus_path.display(),
            resolved.family.name()
        )));
    }
    let data_path = cfg.paths.data();
    let data = io::read_supports(&data_path, Some("z"))?;
    let set = map_supports(&grid, data.supports.clone(), SupportKind::Observation)
        .map_err(|e| at_row(&data, &data_path, e))?;
    let spatial = auto_basis(grid.bbox(), cfg.model.n_res).context("model.n_res")?;
    let basis = if grid.n_time() > 1 {
        let temporal = temporal_basis(grid.n_time(), cfg.model.r_t).context("model.r_t")?;
        ModelBasis::SpaceTime(tensor_basis(spatial, temporal))
    } else {
        ModelBasis::Spatial(spatial)
    };
    let z = data.values.clone().expect("value column requested");
    let model = Model::new(
        grid,
        Some(basis),
        set,
        z,
        resolved.family,
        resolved.link,
        resolved.normalise,
        cfg.model.fine_scale,
    )
    .map_err(|e| at_row(&data, &data_path, e))?;
    let spec = StateSpec {
        variant: resolved.variant,
        taper_multiplier: cfg.model.taper_multiplier,
        fs_by_spatial_bau: cfg.model.fs_by_spatial_bau,
        known_sigma2fs: cfg.model.known_sigma2fs,
    };
    Ok(Setup { model, resolved, spec, data })
}

pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<String> {
    let seed = cfg.require_seed()?;
    let section = cfg.simulate.as_ref().ok_or_else(|| CliError::Config("simulate: section missing".into()))?;
    let scenario = Scenario::parse(&section.scenario).context("simulate.scenario")?;
    let opts = SimOptions {
        grid_size: section.grid_size,
        n_obs: section.n_obs,
        size: section.size,
        n_times: section.n_times,
    };
    let sim = simulate(scenario, seed, &opts).context("simulate")?;
    let out = &cfg.paths.output_dir;
    io::atomic_write(&out.join("data.csv"), &io::data_csv(&sim))?;
    io::atomic_write(&out.join("truth.csv"), &io::truth_csv(&sim))?;
    io::atomic_write(&out.join("baus.toml"), BauSpec::from_grid(&sim.grid).to_toml().as_bytes())?;
    Ok(format!(
        "simulated {}: {} data rows, {} truth rows in {}",
        scenario.name(),
        sim.z.len(),
        sim.grid.len(),
        out.display()
    ))
}

/// Identifies the model a stored fit belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub family: String,
    pub link: String,
    pub n_obs: usize,
    pub n_baus: usize,
    pub r: usize,
    pub p: usize,
}

impl Fingerprint {
    pub fn of(model: &Model) -> Self {
        Fingerprint {
            family: model.family.name().into(),
            link: model.link.name().into(),
            n_obs: model.n_obs(),
            n_baus: model.grid.len(),
            r: model.r(),
            p: model.p(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredFit {
    pub fingerprint: Fingerprint,
    pub result: FitResult,
}

pub fn encode_fit(stored: &StoredFit) -> Vec<u8> {
    bincode::serialize(stored).expect("fit state serialises")
}

pub fn load_fit(path: &Path, model: &Model) -> CliResult<StoredFit> {
    let bytes = io::read_file(path)?;
    let stored: StoredFit = bincode::deserialize(&bytes).map_err(|e| CliError::io(path, e))?;
    if stored.fingerprint != Fingerprint::of(model) {
        return Err(CliError::Config(format!(
            "{}: fit state does not match the configured model and data",
            path.display()
        )));
    }
    Ok(stored)
}

#[derive(Serialize)]
struct ParamRow {
    name: String,
    value: f64,
    transform: String,
    fixed: bool,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    family: &'a str,
    link: &'a str,
    prior: String,
    n_obs: usize,
    r: usize,
    objective: f64,
    parameters: Vec<ParamRow>,
    /// Modelling conventions that affect how parameters read.
    conventions: Vec<&'static str>,
    report: &'a FitReport,
}

fn conventions(model: &Model) -> Vec<&'static str> {
    let mut out = Vec::new();
    match model.family {
        Family::Gamma => out.push("gamma dispersion: shape = 1/psi, variance = psi * mu^2"),
        Family::InverseGaussian => out.push("inverse-gaussian dispersion: lambda = 1/psi, variance = psi * mu^3"),
        Family::Gaussian => out.push("gaussian dispersion: psi is the measurement-error variance"),
        _ => {}
    }
    if model.grid.n_time() > 1 {
        out.push("temporal AR(1) precision has unit marginal variance");
    }
    out
}

pub fn cmd_fit(cfg: &RunConfig) -> CliResult<String> {
    let setup = build_setup(cfg)?;
    let model = &setup.model;
    let (init, rule) = initial_state(model, &setup.spec).context("model")?;
    let options = FitOptions {
        fixed: cfg.model.fixed.iter().cloned().collect::<BTreeSet<_>>(),
        max_iter: cfg.model.max_iter,
        ..FitOptions::default()
    };
    let result = fit(model, &init, rule, &options).context("model.fixed / fit")?;
    if !result.report.converged {
        log::warn!("fit did not converge: {}", result.report.message);
    }
    let fixed: BTreeSet<&String> = result.report.fixed.iter().collect();
    let parameters = parameter_entries(model, &result.state)
        .into_iter()
        .map(|e| ParamRow { fixed: fixed.contains(&e.name), transform: format!("{:?}", e.transform), name: e.name, value: e.value })
        .collect();
    let report = ReportFile {
        family: model.family.name(),
        link: model.link.name(),
        prior: format!("{:?}", setup.resolved.variant),
        n_obs: model.n_obs(),
        r: model.r(),
        objective: result.laplace.loglik,
        parameters,
        conventions: conventions(model),
        report: &result.report,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    io::atomic_write(&cfg.paths.fit_report(), json.as_bytes())?;
    let summary = format!(
        "fit {}: objective {:.6}, {} iterations, {}",
        if result.report.converged { "converged" } else { "stopped" },
        result.laplace.loglik,
        result.report.iterations,
        result.report.message
    );
    let stored = StoredFit { fingerprint: Fingerprint::of(model), result };
    io::atomic_write(&cfg.paths.fit_state(), &encode_fit(&stored))?;
    Ok(summary)
}

fn pct_name(p: f64) -> String {
    format!("p{p}")
}

fn prediction_csv(
    ids: &[String],
    coords: Option<&dyn Fn(usize) -> Vec<String>>,
    coord_names: &[&str],
    summaries: &[(Target, Summary)],
) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["id".into()];
    header.extend(coord_names.iter().map(|s| s.to_string()));
    for (t, s) in summaries {
        header.push(format!("{}_mean", t.name()));
        header.push(format!("{}_sd", t.name()));
        for p in &s.percentiles {
            header.push(format!("{}_{}", t.name(), pct_name(*p)));
        }
    }
    w.write_record(&header).expect("write header");
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        if let Some(f) = coords {
            row.extend(f(i));
        }
        for (_, s) in summaries {
            row.push(format!("{}", s.mean[i]));
            row.push(format!("{}", s.sd[i]));
            row.extend(s.quantiles[i].iter().map(|q| format!("{q}")));
        }
        w.write_record(&row).expect("write row");
    }
    w.into_inner().expect("in-memory CSV writer")
}

pub fn region_incidence(cfg: &RunConfig, setup: &Setup) -> CliResult<Option<(IncidenceMatrix, Vec<String>)>> {
    let Some(path) = &cfg.paths.regions else { return Ok(None) };
    let table = io::read_supports(path, None)?;
    let set = map_supports(&setup.model.grid, table.supports.clone(), SupportKind::Prediction)
        .map_err(|e| at_row(&table, path, e))?;
    let c_p = build_incidence(&setup.model.grid, &set, setup.resolved.normalise, setup.model.family.has_size());
    Ok(Some((c_p, table.ids)))
}

pub fn cmd_predict(cfg: &RunConfig) -> CliResult<String> {
    let setup = build_setup(cfg)?;
    let model = &setup.model;
    let stored = load_fit(&cfg.paths.fit_state(), model)?;
    let seed = cfg.seed.unwrap_or(0);
    let regions = region_incidence(cfg, &setup)?;
    let pred: PredictionResult = predict(
        model,
        &stored.result.state,
        &stored.result.laplace,
        regions.as_ref().map(|(c, _)| c),
        cfg.predict.n_mc,
        seed,
    )
    .context("predict")?;
    let summaries = pred.summaries(&cfg.predict.percentiles).context("predict.percentiles")?;
    let grid = &model.grid;
    let spacetime = grid.n_time() > 1;
    let csv = match &regions {
        Some((_, ids)) => prediction_csv(ids, None, &[], &summaries),
        None => {
            let ids: Vec<String> = (0..grid.len()).map(|i| i.to_string()).collect();
            let coords = |i: usize| {
                let c = grid.centroid(i);
                let mut v = vec![format!("{}", c[0]), format!("{}", c[1])];
                if spacetime {
                    v.push(grid.time_index(i).to_string());
                }
                v
            };
            let names: &[&str] = if spacetime { &["x", "y", "t"] } else { &["x", "y"] };
            prediction_csv(&ids, Some(&coords), names, &summaries)
        }
    };
    io::atomic_write(&cfg.paths.predictions(), &csv)?;

    let target = Target::parse(&cfg.predict.samples).context("predict.samples")?;
    let samples = pred.get(target).ok_or_else(|| {
        CliError::Config(format!("predict.samples: target `{}` is not available for this model", target.name()))
    })?;
    io::atomic_write(&cfg.paths.samples(), &io::encode_samples(samples))?;

    let mut written = 2;
    if cfg.predict.plots && regions.is_none() {
        for (t, s) in &summaries {
            let width: Vec<f64> = s
                .quantiles
                .iter()
                .map(|q| match (q.first(), q.last()) {
                    (Some(a), Some(b)) if q.len() > 1 => b - a,
                    _ => f64::NAN,
                })
                .collect();
            let img = plot::heatmap(&[&s.mean, &width], grid.nx(), grid.ny(), grid.n_time());
            let path = cfg.paths.output_dir.join(format!("plot_{}.png", t.name()));
            io::atomic_write(&path, &plot::encode_png(&img))?;
            written += 1;
        }
    }
    Ok(format!(
        "predicted {} rows with {} samples; wrote {written} files to {}",
        summaries.first().map(|(_, s)| s.mean.len()).unwrap_or(0),
        cfg.predict.n_mc,
        cfg.paths.output_dir.display()
    ))
}

/// One row of the scores file.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub n: usize,
    pub rmspe: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub crps: f64,
    pub is90: f64,
    pub cvg90: f64,
    pub brier: Option<f64>,
}

/// Scores `samples` (rows are locations) against `truth`.
pub fn score_samples(truth: &[f64], samples: &DMatrix<f64>, probability: bool) -> frk_core::Result<Scores> {
    let n = truth.len();
    let mut mean = Vec::with_capacity(n);
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<f64> = samples.row(i).iter().copied().collect();
        mean.push(row.iter().sum::<f64>() / row.len() as f64);
        row.sort_by(f64::total_cmp);
        lo.push(nearest_rank(&row, 5.0));
        hi.push(nearest_rank(&row, 95.0));
    }
    let mape = match diagnostics::mape(truth, &mean) {
        Ok(v) => Some(v),
        Err(FrkError::ZeroTruth(_)) => None,
        Err(e) => return Err(e),
    };
    let binary = truth.iter().all(|v| *v == 0.0 || *v == 1.0);
    let brier = if probability && binary { Some(diagnostics::brier(truth, &mean)?) } else { None };
    Ok(Scores {
        n,
        rmspe: diagnostics::rmspe(truth, &mean)?,
        mae: diagnostics::mae(truth, &mean)?,
        mape,
        crps: diagnostics::crps_empirical(truth, samples)?,
        is90: diagnostics::interval_score(truth, &lo, &hi, 0.1)?,
        cvg90: diagnostics::coverage(truth, &lo, &hi)?,
        brier,
    })
}

const SCORE_HEADER: [&str; 10] = ["label", "n", "RMSPE", "MAE", "MAPE", "CRPS", "IS90", "Cvg90", "Brier", "wall_time_s"];

pub fn cmd_score(cfg: &RunConfig) -> CliResult<String> {
    let sc = &cfg.score;
    let target = Target::parse(&sc.target).context("score.target")?;
    if target == Target::Data {
        return Err(CliError::Config("score.target: the truth file holds no data column".into()));
    }
    match sc.subset.as_str() {
        "unobserved" | "all" => {}
        other => return Err(CliError::Config(format!("score.subset: expected `unobserved` or `all`, got `{other}`"))),
    }
    let truth_path = cfg.paths.truth();
    let truth = io::read_truth(&truth_path, target.name())?;
    let pred_path = cfg.paths.predictions();
    let ids = io::read_prediction_ids(&pred_path)?;
    let samples_path = cfg.paths.samples();
    let samples = io::decode_samples(&io::read_file(&samples_path)?, &samples_path)?;
    if samples.nrows() != ids.len() {
        return Err(CliError::Config(format!(
            "{}: {} sample rows but {} prediction rows",
            samples_path.display(),
            samples.nrows(),
            ids.len()
        )));
    }
    if truth.len() != ids.len() {
        return Err(CliError::Config(format!(
            "{}: id mismatch: {} truth rows but {} prediction rows",
            truth_path.display(),
            truth.len(),
            ids.len()
        )));
    }
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let t = truth.get(id).ok_or_else(|| {
            CliError::Config(format!("{}: id mismatch: prediction id `{id}` is not in the truth file", truth_path.display()))
        })?;
        let keep = (sc.subset == "all" || !t.observed) && sc.time.is_none_or(|want| t.time == Some(want));
        if keep {
            rows.push(i);
            values.push(t.value);
        }
    }
    if rows.is_empty() {
        return Err(CliError::Config("score.subset/score.time: no locations selected".into()));
    }
    let selected = samples.select_rows(&rows);
    let s = score_samples(&values, &selected, target == Target::Probability).context("score")?;
    let wall = if sc.wall_time {
        let path = cfg.paths.fit_report();
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::io(&path, e))?;
        v["report"]["elapsed_seconds"].as_f64().map(|x| format!("{x}")).unwrap_or_default()
    } else {
        String::new()
    };
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let record = [
        sc.label.clone().unwrap_or_default(),
        s.n.to_string(),
        format!("{}", s.rmspe),
        format!("{}", s.mae),
        opt(s.mape),
        format!("{}", s.crps),
        format!("{}", s.is90),
        format!("{}", s.cvg90),
        opt(s.brier),
        wall,
    ];
    let out_path = cfg.paths.scores();
    let mut w = csv::Writer::from_writer(Vec::new());
    let existing = if sc.append && out_path.exists() { Some(io::read_file(&out_path)?) } else { None };
    match existing {
        Some(bytes) => {
            let mut rdr = csv::Reader::from_reader(&bytes[..]);
            let header = rdr.headers().map_err(|e| CliError::io(&out_path, e))?.clone();
            if header.iter().ne(SCORE_HEADER.iter().copied()) {
                return Err(CliError::Config(format!("{}: existing file has a different header", out_path.display())));
            }
            w.write_record(SCORE_HEADER).expect("write header");
            for rec in rdr.records() {
                w.write_record(&rec.map_err(|e| CliError::io(&out_path, e))?).expect("write row");
            }
        }
        None => w.write_record(SCORE_HEADER).expect("write header"),
    }
    w.write_record(&record).expect("write row");
    io::atomic_write(&out_path, &w.into_inner().expect("in-memory CSV writer"))?;
    Ok(format!("scored {} locations: RMSPE {:.4}, CRPS {:.4}, Cvg90 {:.3}", s.n, s.rmspe, s.crps, s.cvg90))
}
