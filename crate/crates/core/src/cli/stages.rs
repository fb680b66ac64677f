use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Base, CaseModels, PipelineConfig};
use super::files::{
    flux_table_from_csv, flux_table_to_csv, num, read_dataset, read_json, write_dataset, write_json, write_text,
    CsvDoc, Stamp,
};
use crate::analyze::{build_flux_table, correlate, CorrelationReport, FluxTable};
use crate::error::{Error, Result};
use crate::estimate::{estimate_all, EstimateResult};
use crate::hybrid::{assemble_hybrid, evaluate_hybrid, initial_state, simulate_hybrid, HybridEvaluation, HybridManifest, HybridModel};
use crate::mlp::{train_mlp, Mlp, TrainingReport};
use crate::mpc::{closed_loop, ClosedLoopLog, MpcConfig};
use crate::model::{ClosedModel, Flux, MeasurementDataset, TimeGrid, Trajectory};
use crate::nls::Termination;
use crate::sim::{generate_pseudo_data, simulate};

/// Resolved configuration, output directory and provenance stamp of one invocation.
pub struct Ctx {
    pub cfg: PipelineConfig,
    pub base: Base,
    pub out: PathBuf,
    pub stamp: Stamp,
}

impl Ctx {
    pub fn new(mut cfg: PipelineConfig, out: PathBuf) -> Result<Self> {
        let base = cfg.resolve()?;
        cfg.validate()?;
        let stamp = Stamp {
            config_hash: cfg.hash(),
            seed: cfg.seed,
        };
        Ok(Self { cfg, base, out, stamp })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn models(&self) -> Result<CaseModels> {
        self.cfg.models()
    }

    fn hash8(&self) -> &str {
        &self.stamp.config_hash[..8]
    }
}

pub const CONFIG_FILE: &str = "config.toml";
const DATA_INDEX: &str = "data/index.json";
const ESTIMATE_SUMMARY: &str = "estimate/summary.json";
const FLUX_TABLE: &str = "table/flux_table.csv";
const CORRELATION_REPORT: &str = "correlate/report.json";
const MANIFEST: &str = "hybrid/manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataIndex {
    pub base_model: String,
    pub datasets: Vec<String>,
    /// Initial states used by the simulator.
    pub x0_true: Vec<Vec<f64>>,
}

pub fn gen_data(ctx: &Ctx) -> Result<String> {
    let models = ctx.models()?;
    let cfg = &ctx.cfg;
    let scenarios = cfg.scenarios(ctx.base, cfg.data.scenarios, 0, None)?;
    let data = generate_pseudo_data(
        models.truth.as_ref(),
        &scenarios,
        cfg.meas_period(ctx.base),
        &cfg.data.noise,
        cfg.seed,
        &cfg.truth_integrator(ctx.base),
    )?;
    write_text(&ctx.path(CONFIG_FILE), &cfg.to_toml()?)?;
    let names = models.structure.names();
    let dir = ctx.path("data");
    for ds in &data {
        write_dataset(&dir, ds, &names.outputs, &names.inputs, &ctx.stamp)?;
    }
    let index = DataIndex {
        base_model: models.structure.id().to_string(),
        datasets: data.iter().map(|d| d.name.clone()).collect(),
        x0_true: scenarios.iter().map(|s| s.x0.clone()).collect(),
    };
    write_json(&ctx.path(DATA_INDEX), "gen-data", &ctx.stamp, &index)?;
    let n: usize = data.iter().map(MeasurementDataset::n_meas).sum();
    Ok(format!(
        "gen-data: {} datasets, {n} measurement times, seed {}, config {}",
        data.len(),
        ctx.cfg.seed,
        ctx.hash8()
    ))
}

pub fn load_datasets(ctx: &Ctx) -> Result<(DataIndex, Vec<MeasurementDataset>)> {
    let index: DataIndex = read_json(&ctx.path(DATA_INDEX), "gen-data")?;
    let datasets = index
        .datasets
        .iter()
        .map(|n| read_dataset(&ctx.path("data"), n, "gen-data"))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, datasets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFit {
    pub dataset: String,
    pub fit_cost: f64,
    pub reg_cost: f64,
    pub chi2_per_point: f64,
    pub n_values: usize,
    pub iterations: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub datasets: Vec<DatasetFit>,
    pub fit_cost: f64,
    pub reg_cost: f64,
    /// Total weighted fit over the total number of scalar measurements.
    pub chi2_per_point: f64,
    /// Total variation of all flux profiles.
    pub total_variation: f64,
}

fn result_path(ctx: &Ctx, name: &str) -> PathBuf {
    ctx.path(&format!("estimate/{name}.json"))
}

pub fn estimate(ctx: &Ctx) -> Result<String> {
    let models = ctx.models()?;
    let (_, datasets) = load_datasets(ctx)?;
    let ecfg = ctx.cfg.estimation_for(ctx.base);
    let results = estimate_all(models.structure.as_ref(), &datasets, &ecfg)?;
    let names = models.structure.names();
    let mut fits = Vec::with_capacity(results.len());
    for r in &results {
        write_json(&result_path(ctx, &r.dataset), "estimate", &ctx.stamp, r)?;
        let mut header = vec![format!("t_start[{}]", r.p_star.unit().suffix()), format!("t_end[{}]", r.p_star.unit().suffix())];
        header.extend(names.fluxes.iter().map(|f| f.header()));
        let mut doc = CsvDoc::new(&ctx.stamp, header).meta("dataset", r.dataset.clone());
        let pts = r.p_star.grid().points();
        for (k, v) in r.p_star.values().iter().enumerate() {
            doc.push_nums([pts[k], pts[k + 1]].into_iter().chain(v.iter().copied()));
        }
        doc.write(&ctx.path(&format!("estimate/{}.fluxes.csv", r.dataset)))?;
        let n_values = r.per_point_residuals.iter().map(Vec::len).sum();
        fits.push(DatasetFit {
            dataset: r.dataset.clone(),
            fit_cost: r.fit_cost,
            reg_cost: r.reg_cost,
            chi2_per_point: r.chi2_per_point(),
            n_values,
            iterations: r.lm_report.iterations,
            termination: r.lm_report.termination,
        });
    }
    let fit_cost: f64 = fits.iter().map(|f| f.fit_cost).sum();
    let reg_cost: f64 = fits.iter().map(|f| f.reg_cost).sum();
    let n: usize = fits.iter().map(|f| f.n_values).sum();
    let summary = EstimateSummary {
        fit_cost,
        reg_cost,
        chi2_per_point: fit_cost / n as f64,
        total_variation: results.iter().map(|r| r.p_star.total_variation()).sum(),
        datasets: fits,
    };
    write_json(&ctx.path(ESTIMATE_SUMMARY), "estimate", &ctx.stamp, &summary)?;
    Ok(format!(
        "estimate: {} datasets, fit_cost={:.6e}, reg_cost={:.6e}, chi2/point={:.4}",
        results.len(),
        summary.fit_cost,
        summary.reg_cost,
        summary.chi2_per_point
    ))
}

pub fn load_results(ctx: &Ctx) -> Result<Vec<EstimateResult>> {
    let summary: EstimateSummary = read_json(&ctx.path(ESTIMATE_SUMMARY), "estimate")?;
    summary
        .datasets
        .iter()
        .map(|d| read_json(&result_path(ctx, &d.dataset), "estimate"))
        .collect()
}

pub fn table(ctx: &Ctx) -> Result<String> {
    let models = ctx.models()?;
    let results = load_results(ctx)?;
    let t = build_flux_table(&results, models.structure.as_ref())?;
    flux_table_to_csv(&t, models.structure.time_unit(), &ctx.stamp).write(&ctx.path(FLUX_TABLE))?;
    Ok(format!(
        "table: {} rows, {} columns, {} dropped",
        t.n_rows(),
        t.columns.len(),
        t.dropped
    ))
}

pub fn load_table(ctx: &Ctx) -> Result<FluxTable> {
    let path = ctx.path(FLUX_TABLE);
    flux_table_from_csv(&CsvDoc::read(&path, "table")?, &path)
}

pub fn correlate_stage(ctx: &Ctx) -> Result<String> {
    let t = load_table(ctx)?;
    let report = correlate(&t, &ctx.cfg.analysis_for(ctx.base))?;
    write_json(&ctx.path(CORRELATION_REPORT), "correlate", &ctx.stamp, &report)?;
    let m = &report.matrix;
    let mut header = vec![String::new()];
    header.extend(m.labels.iter().cloned());
    let mut doc = CsvDoc::new(&ctx.stamp, header);
    for (label, row) in m.labels.iter().zip(&m.values) {
        let mut cells = vec![label.clone()];
        cells.extend(row.iter().map(|v| num(*v)));
        doc.rows.push(cells);
    }
    doc.write(&ctx.path("correlate/matrix.csv"))?;
    let parts: Vec<String> = report
        .selected_inputs
        .iter()
        .map(|s| match report.constant(&s.flux) {
            Some(c) if s.inputs.is_empty() => format!("{}=const {}", s.flux, num(c.value)),
            _ => format!("{}<-{}", s.flux, s.inputs.join("+")),
        })
        .collect();
    Ok(format!("correlate: tau={}, {}", report.tau, parts.join(", ")))
}

pub fn load_report(ctx: &Ctx) -> Result<CorrelationReport> {
    read_json(&ctx.path(CORRELATION_REPORT), "correlate")
}

fn model_path(ctx: &Ctx, flux: &str) -> PathBuf {
    ctx.path(&format!("models/{flux}.json"))
}

pub fn train(ctx: &Ctx) -> Result<String> {
    let t = load_table(ctx)?;
    let report = load_report(ctx)?;
    let jobs: Vec<_> = report.selected_inputs.iter().filter(|s| !s.inputs.is_empty()).collect();
    let trained = jobs
        .par_iter()
        .map(|s| {
            let spec = ctx.cfg.arch_for(ctx.base, &s.flux).spec(s.inputs.len())?;
            train_mlp(&t, &s.flux, &s.inputs, &spec, &ctx.cfg.training.train)
        })
        .collect::<Result<Vec<(Mlp, TrainingReport)>>>()?;
    for (net, rep) in &trained {
        write_json(&model_path(ctx, &rep.flux), "train", &ctx.stamp, net)?;
    }
    let reports: Vec<&TrainingReport> = trained.iter().map(|(_, r)| r).collect();
    write_json(&ctx.path("models/training.json"), "train", &ctx.stamp, &reports)?;
    let parts: Vec<String> = reports
        .iter()
        .map(|r| match r.val_mse {
            Some(v) => format!("{} val_mse={v:.4e}", r.flux),
            None => format!("{} train_mse={:.4e}", r.flux, r.train_mse),
        })
        .collect();
    Ok(format!("train: {} networks, {}", reports.len(), parts.join(", ")))
}

pub fn assemble(ctx: &Ctx) -> Result<String> {
    let models = ctx.models()?;
    let report = load_report(ctx)?;
    let mut trained = BTreeMap::new();
    for s in report.selected_inputs.iter().filter(|s| !s.inputs.is_empty()) {
        let net: Mlp = read_json(&model_path(ctx, &s.flux), "train")?;
        trained.insert(s.flux.clone(), net);
    }
    let constants: BTreeMap<String, f64> = report
        .constant_flux_flags
        .iter()
        .filter(|c| !trained.contains_key(&c.flux))
        .map(|c| (c.flux.clone(), c.value))
        .collect();
    let hm = assemble_hybrid(models.structure.clone(), &report, &trained, &constants)?;
    write_json(&ctx.path(MANIFEST), "assemble", &ctx.stamp, &hm.manifest())?;
    Ok(format!(
        "assemble: {} networks, {} constants, base {}",
        trained.len(),
        constants.len(),
        models.structure.id()
    ))
}

/// Reads a hybrid manifest written by `assemble` or a bare manifest document.
pub fn read_manifest(path: &Path, stage: &str) -> Result<HybridManifest> {
    let text = super::files::read_upstream(path, stage)?;
    match super::files::parse_json::<HybridManifest>(&text, path) {
        Ok(env) => Ok(env.body),
        Err(_) => HybridManifest::from_json(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        }),
    }
}

pub fn load_hybrid(ctx: &Ctx) -> Result<HybridModel> {
    let models = ctx.models()?;
    read_manifest(&ctx.path(MANIFEST), "assemble")?.into_model(models.structure)
}

/// `‖a − b‖ / ‖b‖`; `None` when `b` is identically zero.
pub fn rel_rmse(a: &[f64], b: &[f64]) -> Option<f64> {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (den > 0.0).then(|| (num / den).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileScore {
    pub profile: String,
    /// Relative RMSE of each state against the truth.
    pub states: BTreeMap<String, Option<f64>>,
    /// Relative RMSE of each flux map evaluated on the true trajectory.
    pub fluxes: BTreeMap<String, Option<f64>>,
    /// Relative RMSE of each flux along the hybrid's own trajectory.
    pub fluxes_closed: BTreeMap<String, Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub window: f64,
    pub profiles: Vec<ProfileScore>,
}

impl SimulateSummary {
    /// Largest error over profiles for `name` in `pick`; failed runs count as infinite.
    pub fn worst(&self, pick: impl Fn(&ProfileScore) -> &BTreeMap<String, Option<f64>>, name: &str) -> f64 {
        self.profiles
            .iter()
            .map(|p| {
                if p.error.is_some() {
                    f64::INFINITY
                } else {
                    pick(p).get(name).copied().flatten().unwrap_or(0.0)
                }
            })
            .fold(0.0, f64::max)
    }
}

fn flux_series(model: &dyn ClosedModel, traj: &Trajectory, mv: &crate::model::PiecewiseConstantProfile) -> Result<Vec<Vec<f64>>> {
    let n_p = model.fluxes().n_p();
    traj.grid
        .points()
        .iter()
        .zip(&traj.states)
        .map(|(t, x)| {
            let mut p = vec![0.0; n_p];
            model.fluxes().eval(*t, x, mv.eval(*t)?, &mut p)?;
            Ok(p)
        })
        .collect()
}

pub fn simulate_stage(ctx: &Ctx) -> Result<String> {
    let models = ctx.models()?;
    let hm = load_hybrid(ctx)?;
    let cfg = &ctx.cfg;
    let window = cfg.sim_window(ctx.base);
    let scen = cfg.scenarios(ctx.base, cfg.simulate.heldout, cfg.simulate.stream_offset, Some(window))?;
    let integ = cfg.sim_integrator(ctx.base);
    let names = models.structure.names();
    let unit = models.structure.time_unit();
    let grid = TimeGrid::with_step(0.0, window, cfg.sim_out_period(ctx.base), unit)?;
    let mut profiles = Vec::new();
    for (i, sc) in scen.iter().enumerate() {
        let name = format!("heldout_{i:02}");
        let truth = models.truth.as_ref();
        let tt = simulate(truth.structure(), &sc.x0, &sc.mv, Flux::Map(truth.fluxes()), &grid, &integ)?;
        let pt = flux_series(truth, &tt, &sc.mv)?;
        let mut score = ProfileScore {
            profile: name.clone(),
            states: BTreeMap::new(),
            fluxes: BTreeMap::new(),
            fluxes_closed: BTreeMap::new(),
            error: None,
        };
        let ph_open = flux_series(&hm, &tt, &sc.mv)?;
        let col = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
        for (j, f) in names.fluxes.iter().enumerate() {
            score.fluxes.insert(f.name.clone(), rel_rmse(&col(&ph_open, j), &col(&pt, j)));
        }
        let mut header = vec![format!("t[{}]", unit.suffix())];
        let tagged = |tag: &str, v: &crate::model::VarInfo| format!("{}_{tag}[{}]", v.name, v.unit);
        header.extend(names.states.iter().map(|v| tagged("truth", v)));
        header.extend(names.states.iter().map(|v| tagged("hybrid", v)));
        header.extend(names.fluxes.iter().map(|v| tagged("truth", v)));
        header.extend(names.fluxes.iter().map(|v| tagged("hybrid", v)));
        header.extend(names.inputs.iter().map(|v| v.header()));
        let mut doc = CsvDoc::new(&ctx.stamp, header).meta("profile", name.clone());
        match simulate_hybrid(&hm, &sc.x0, &sc.mv, &grid, &integ).and_then(|th| {
            let ph = flux_series(&hm, &th, &sc.mv)?;
            Ok((th, ph))
        }) {
            Ok((th, ph)) => {
                for (j, s) in names.states.iter().enumerate() {
                    score.states.insert(s.name.clone(), rel_rmse(&th.column(j), &tt.column(j)));
                }
                for (j, f) in names.fluxes.iter().enumerate() {
                    score.fluxes_closed.insert(f.name.clone(), rel_rmse(&col(&ph, j), &col(&pt, j)));
                }
                for (k, t) in grid.points().iter().enumerate() {
                    let row = std::iter::once(*t)
                        .chain(tt.states[k].iter().copied())
                        .chain(th.states[k].iter().copied())
                        .chain(pt[k].iter().copied())
                        .chain(ph[k].iter().copied())
                        .chain(sc.mv.eval(*t)?.iter().copied());
                    doc.push_nums(row);
                }
            }
            Err(e) => score.error = Some(e.to_string()),
        }
        doc.write(&ctx.path(&format!("simulate/{name}.csv")))?;
        profiles.push(score);
    }
    let summary = SimulateSummary { window, profiles };
    write_json(&ctx.path("simulate/summary.json"), "simulate", &ctx.stamp, &summary)?;
    let worst_state = names
        .states
        .iter()
        .map(|s| summary.worst(|p| &p.states, &s.name))
        .fold(0.0, f64::max);
    let failed = summary.profiles.iter().filter(|p| p.error.is_some()).count();
    Ok(format!(
        "simulate: {} held-out profiles over {window} {}, worst state rel RMSE={worst_state:.4}, {failed} failed",
        summary.profiles.len(),
        unit.suffix()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub evaluation: HybridEvaluation,
    pub total_fit: f64,
    pub step1_total_fit: f64,
    pub n_failed: usize,
}

pub fn evaluate(ctx: &Ctx) -> Result<String> {
    let models = ctx.models()?;
    let hm = load_hybrid(ctx)?;
    let (_, datasets) = load_datasets(ctx)?;
    let results = load_results(ctx)?;
    let integ = ctx.cfg.sim_integrator(ctx.base);
    let ev = evaluate_hybrid(&hm, &datasets, &results, &integ);
    let names = models.structure.names();
    for ds in &datasets {
        let prior = results.iter().find(|r| r.dataset == ds.name);
        let x0 = initial_state(models.structure.as_ref(), ds, prior);
        let mut header = vec![format!("t[{}]", ds.meas_grid.unit().suffix())];
        for tag in ["meas", "step1", "hybrid"] {
            header.extend(names.outputs.iter().map(|v| format!("{}_{tag}[{}]", v.name, v.unit)));
        }
        let mut doc = CsvDoc::new(&ctx.stamp, header).meta("dataset", ds.name.clone());
        if let (Ok(th), Some(r)) = (simulate_hybrid(&hm, &x0, &ds.mv, &ds.meas_grid, &integ), prior) {
            for (k, t) in ds.meas_grid.points().iter().enumerate() {
                let row = std::iter::once(*t)
                    .chain(ds.z_meas[k].iter().copied())
                    .chain(r.trajectory.output_at(*t)?.iter().copied())
                    .chain(th.output_at(*t)?.iter().copied());
                doc.push_nums(row);
            }
        }
        doc.write(&ctx.path(&format!("evaluate/{}.csv", ds.name)))?;
    }
    let report = EvaluateReport {
        total_fit: ev.total_fit(),
        step1_total_fit: results.iter().map(|r| r.fit_cost).sum(),
        n_failed: ev.n_failed(),
        evaluation: ev,
    };
    write_json(&ctx.path("evaluate/report.json"), "evaluate", &ctx.stamp, &report)?;
    Ok(format!(
        "evaluate: {} datasets, hybrid fit={:.6e}, step-1 fit={:.6e}, {} failed",
        datasets.len(),
        report.total_fit,
        report.step1_total_fit,
        report.n_failed
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSummary {
    pub controller: String,
    pub step_magnitude: f64,
    /// First time the CV error is within 5 % / 1 % of the step magnitude after the last setpoint change.
    pub entered_5pct: Option<f64>,
    pub entered_1pct: Option<f64>,
    /// Time from which the error stays within 1 % until the end.
    pub settled_1pct: Option<f64>,
    pub final_error: f64,
    /// Final error relative to the step magnitude.
    pub final_offset: f64,
    pub max_bound_violation: f64,
    pub fallbacks: usize,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSummary {
    pub loops: Vec<LoopSummary>,
}

/// Tracking metrics of the first CV against the setpoint schedule.
pub fn loop_summary(controller: &str, log: &ClosedLoopLog, cfg: &MpcConfig) -> Result<LoopSummary> {
    let cv = log
        .state_names
        .iter()
        .position(|n| *n == cfg.cvs[0])
        .ok_or_else(|| Error::Config(format!("CV {} is not a state", cfg.cvs[0])))?;
    let sp = &cfg.setpoints;
    let t_step = *sp.times.last().expect("validated setpoints");
    let first = sp.values[0][0];
    let last = sp.values.last().expect("validated setpoints")[0];
    let step_magnitude = if last != first { (last - first).abs() } else { 1.0 };
    let series = log.state_series();
    let errs: Vec<(f64, f64)> = series
        .iter()
        .filter(|(t, _)| *t >= t_step)
        .map(|(t, x)| (*t, (x[cv] - sp.at(*t)[0]).abs()))
        .collect();
    let entered = |band: f64| errs.iter().find(|(_, e)| *e <= band * step_magnitude).map(|(t, _)| *t);
    let settled = {
        let band = 0.01 * step_magnitude;
        let k = errs.iter().rposition(|(_, e)| *e > band).map_or(0, |k| k + 1);
        errs.get(k).map(|(t, _)| *t)
    };
    let final_error = errs.last().map_or(f64::NAN, |(_, e)| *e);
    let max_bound_violation = log
        .records
        .iter()
        .flat_map(|r| r.u.iter().zip(&cfg.mv_bounds).map(|(u, (lo, hi))| (lo - u).max(u - hi).max(0.0)))
        .fold(0.0, f64::max);
    Ok(LoopSummary {
        controller: controller.into(),
        step_magnitude,
        entered_5pct: entered(0.05),
        entered_1pct: entered(0.01),
        settled_1pct: settled,
        final_error,
        final_offset: final_error / step_magnitude,
        max_bound_violation,
        fallbacks: log.records.iter().filter(|r| r.fallback).count(),
        aborted: log.aborted.clone(),
    })
}

fn loop_csv(log: &ClosedLoopLog, cfg: &MpcConfig, stamp: &Stamp, controller: &str) -> CsvDoc {
    let mut header = vec!["t[s]".to_string()];
    header.extend(log.state_names.iter().cloned());
    header.extend(log.cv_names.iter().map(|c| format!("{c}_sp")));
    header.extend(log.mv_names.iter().cloned());
    header.extend(["cost".to_string(), "iterations".to_string(), "fallback".to_string()]);
    let mut doc = CsvDoc::new(stamp, header).meta("controller", controller);
    for r in &log.records {
        let mut cells: Vec<String> = std::iter::once(r.t)
            .chain(r.x.iter().copied())
            .chain(cfg.setpoints.at(r.t).iter().copied())
            .chain(r.u.iter().copied())
            .chain([r.cost])
            .map(num)
            .collect();
        cells.push(r.iterations.to_string());
        cells.push(u8::from(r.fallback).to_string());
        doc.rows.push(cells);
    }
    doc
}

/// Closed loop of the truth plant under `controller`, from the steady state at the initial setpoint.
pub fn run_loop(ctx: &Ctx, controller: &dyn ClosedModel) -> Result<ClosedLoopLog> {
    let models = ctx.models()?;
    let run = ctx.cfg.mpc_run();
    let mcfg = &run.controller;
    let h2 = mcfg
        .cvs
        .iter()
        .position(|c| c == "h2")
        .map_or(1.0, |i| mcfg.setpoints.values[0][i]);
    let x0 = vec![h2, h2, h2, run.h_res0];
    let u0 = vec![ctx.cfg.plant.tank.steady_inflow_for_h2(h2), 0.0];
    closed_loop(
        models.truth.as_ref(),
        &crate::sim::IntegratorConfig::rk4(run.plant_step),
        controller,
        mcfg,
        run.duration,
        &x0,
        &u0,
        run.noise.as_ref(),
    )
}

pub fn mpc(ctx: &Ctx) -> Result<String> {
    if ctx.base != Base::Tank {
        return Err(Error::Config("mpc runs on three-tank models only".into()));
    }
    let models = ctx.models()?;
    let hm = load_hybrid(ctx)?;
    let run = ctx.cfg.mpc_run();
    let mut loops = vec![("hybrid", run_loop(ctx, &hm)?)];
    if run.perfect_model {
        loops.push(("perfect", run_loop(ctx, models.truth.as_ref())?));
    }
    let mut summary = MpcSummary { loops: Vec::new() };
    let mut parts = Vec::new();
    for (name, log) in &loops {
        loop_csv(log, &run.controller, &ctx.stamp, name).write(&ctx.path(&format!("mpc/{name}.csv")))?;
        let s = loop_summary(name, log, &run.controller)?;
        parts.push(format!(
            "{name}: offset={:.4} of step, 5% band at {}, max solve {:.3} s",
            s.final_offset,
            s.entered_5pct.map_or("never".into(), |t| format!("{t} s")),
            log.max_wall_time()
        ));
        summary.loops.push(s);
    }
    write_json(&ctx.path("mpc/summary.json"), "mpc", &ctx.stamp, &summary)?;
    Ok(format!("mpc: {}", parts.join("; ")))
}
