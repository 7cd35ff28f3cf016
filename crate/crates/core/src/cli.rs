//! Config-driven experiment runner.
//!
//! A config is a TOML file naming one experiment, a family, an observable and
//! the numerical settings. Everything is validated before any computation;
//! each run writes `results.json`, one or more CSV files and `manifest.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{bound_comparison, evt_quotient, holder_fit, jump_detect};
use crate::dynamics::{make_builtin_family, BuiltinFamily, Family, ModelDomain};
use crate::error::{Error, Result};
use crate::io::{write_json, write_manifest, write_table, ManifestEntry};
use crate::norms::{indicator_membership_study, sobolev_norm, verify_scaling};
use crate::observables::{integrate, make_builtin_observable, mollify, BuiltinObservable, GridFunction, Observable, ObservableKind};
use crate::params::Params;
use crate::rates::{check_condition, finite_time_rates, predicted_holder_bound, Condition};
use crate::response::{
    ergodic_response_sum, fd_derivatives_by_scale, fdt_resolvent, fdt_series, response_curve, EstimatorParams, FdtResult, OrbitParams,
    ResponseCurve,
};
use crate::transfer::{build_ulam, srb_birkhoff, srb_ulam, Mesh};

/// Environment variable that fixes the worker thread count.
pub const THREADS_ENV: &str = "SRBLAB_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Rates,
    Srb,
    Response,
    Fdt,
    Holder,
    Jump,
    Evt,
    Norms,
    Scaling,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::Evt,
        Experiment::Fdt,
        Experiment::Holder,
        Experiment::Jump,
        Experiment::Norms,
        Experiment::Rates,
        Experiment::Response,
        Experiment::Scaling,
        Experiment::Srb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Rates => "rates",
            Experiment::Srb => "srb",
            Experiment::Response => "response",
            Experiment::Fdt => "fdt",
            Experiment::Holder => "holder",
            Experiment::Jump => "jump",
            Experiment::Evt => "evt",
            Experiment::Norms => "norms",
            Experiment::Scaling => "scaling",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Experiment::Rates => "finite-time rates nu_s, nu_s_bar, nu_u, J and the star1/star3/star4 conditions; keys m, n_samples, p, beta, r",
            Experiment::Srb => "invariant measure by Ulam (cells, samples_per_cell) or Birkhoff (n_orbits, n_steps, burn_in)",
            Experiment::Response => "response curve R(t) over t_grid with error bars and finite differences at t0",
            Experiment::Fdt => "derivative at t0 by methods = series / resolvent / ergodic, K = k_max",
            Experiment::Holder => "response curve plus Hölder fit at t0 over scale_decades; bound comparison when r is set",
            Experiment::Jump => "response curve plus jump detection at t0 with threshold c_min",
            Experiment::Evt => "quotients R_{as}/R_a at t0 for thresholds a_list < 0 and s in (0,1)",
            Experiment::Norms => "H^r_p norms for r_list at resolutions; indicator study when no observable is given",
            Experiment::Scaling => "mollifier scaling laws for eps_list with r, r_tilde, p",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedParams {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ulam,
    Birkhoff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub estimator: EstimatorKind,
    /// Cells per axis; defaults by dimension.
    pub cells: Option<Vec<usize>>,
    pub samples_per_cell: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub n_orbits: usize,
    pub n_steps: usize,
    pub burn_in: usize,
    pub t0: f64,
    pub k_max: usize,
    pub methods: Vec<String>,
    /// Mollification scale for Heaviside observables in the ergodic sum; defaults to two cells.
    pub eps: Option<f64>,
    pub m: usize,
    pub n_samples: usize,
    pub p: f64,
    pub beta: f64,
    pub r: Option<f64>,
    pub scale_decades: u32,
    pub c_min: f64,
    pub s: f64,
    pub a_list: Vec<f64>,
    pub r_list: Vec<f64>,
    pub resolutions: Vec<usize>,
    pub r_tilde: f64,
    pub eps_list: Vec<f64>,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Ulam,
            cells: None,
            samples_per_cell: 64,
            tol: 1e-13,
            max_iter: 100_000,
            n_orbits: 16,
            n_steps: 100_000,
            burn_in: 100,
            t0: 0.0,
            k_max: 40,
            methods: vec!["series".into(), "resolvent".into()],
            eps: None,
            m: 20,
            n_samples: 16,
            p: 2.0,
            beta: 0.5,
            r: None,
            scale_decades: 3,
            c_min: 0.5,
            s: 0.5,
            a_list: Vec::new(),
            r_list: Vec::new(),
            resolutions: Vec::new(),
            r_tilde: 0.25,
            eps_list: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TGrid {
    /// `t0` and `t0 ± t_max·2^{-k}` for `k = 0..n`.
    Geometric { t0: f64, t_max: f64, n: usize },
    /// `n` evenly spaced values from `start` to `stop`.
    Linear { start: f64, stop: f64, n: usize },
    List { values: Vec<f64> },
}

impl TGrid {
    pub fn values(&self) -> Vec<f64> {
        let mut v = match self {
            TGrid::Geometric { t0, t_max, n } => {
                let mut v = vec![*t0];
                for k in 0..*n {
                    let h = t_max * 2f64.powi(-(k as i32));
                    v.extend([t0 - h, t0 + h]);
                }
                v
            }
            TGrid::Linear { start, stop, n } => match n {
                0 => Vec::new(),
                1 => vec![*start],
                _ => (0..*n).map(|i| start + (stop - start) * i as f64 / (*n - 1) as f64).collect(),
            },
            TGrid::List { values } => values.clone(),
        };
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub family: Option<NamedParams>,
    pub observable: Option<NamedParams>,
    #[serde(default)]
    pub numerics: Numerics,
    pub t_grid: Option<TGrid>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            key: e.span().map(|s| text[s].trim().to_string()).unwrap_or_default(),
            reason: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }
}

/// How a run failed: bad input (exit 2) or a failed computation (exit 1).
#[derive(Debug)]
pub enum RunError {
    Validation(Error),
    Computation(Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => 2,
            RunError::Computation(_) => 1,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Validation(e) => write!(f, "invalid config: {e}"),
            RunError::Computation(e) => write!(f, "computation failed: {e}"),
        }
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Everything a run needs, built and checked before computing.
struct Prepared {
    family: Option<Family>,
    observable: Option<Observable>,
    domain: ModelDomain,
    cells: Vec<usize>,
    t_values: Vec<f64>,
    estimator: EstimatorParams,
}

fn default_cells(dim: usize) -> usize {
    match dim {
        1 => 1024,
        2 => 128,
        _ => 32,
    }
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    use Experiment::*;
    let e = cfg.experiment;
    let num = &cfg.numerics;
    let family = match &cfg.family {
        Some(f) => Some(make_builtin_family(&f.name, &f.params)?),
        None if matches!(e, Norms | Scaling) => None,
        None => return Err(config_err("family", format!("required by experiment `{}`", e.name()))),
    };
    let domain = family.as_ref().map(|f| f.domain().clone()).unwrap_or_else(ModelDomain::circle);
    let observable = match &cfg.observable {
        Some(o) => Some(make_builtin_observable(&o.name, &o.params, &domain)?),
        None if matches!(e, Rates | Srb | Norms) => None,
        None => return Err(config_err("observable", format!("required by experiment `{}`", e.name()))),
    };
    let dim = domain.dim();
    let cells = match &num.cells {
        Some(c) if c.len() == dim && c.iter().all(|&n| n >= 2) => c.clone(),
        Some(_) => return Err(config_err("numerics.cells", format!("need {dim} entries, each >= 2"))),
        None => vec![default_cells(dim); dim],
    };
    let t_values = match (&cfg.t_grid, e) {
        (Some(g), _) => g.values(),
        (None, Response | Holder | Jump) => return Err(config_err("t_grid", format!("required by experiment `{}`", e.name()))),
        (None, _) => Vec::new(),
    };
    if matches!(e, Response | Holder | Jump) && t_values.is_empty() {
        return Err(config_err("t_grid", "is empty"));
    }
    if let Some(f) = &family {
        let (lo, hi) = f.t_range();
        for &t in t_values.iter().chain([num.t0].iter()) {
            if !(t >= lo && t <= hi) {
                return Err(config_err("t_grid", format!("t = {t} outside the family's range [{lo}, {hi}]")));
            }
        }
    }
    let estimator = match num.estimator {
        EstimatorKind::Ulam => EstimatorParams::Ulam {
            cells: cells.clone(),
            samples_per_cell: num.samples_per_cell,
            seed,
            tol: num.tol,
            max_iter: num.max_iter,
        },
        EstimatorKind::Birkhoff => EstimatorParams::birkhoff(num.n_orbits, num.n_steps, num.burn_in, seed),
    };
    if num.samples_per_cell < 2 {
        return Err(config_err("numerics.samples_per_cell", "must be >= 2"));
    }
    if num.n_orbits < 2 || num.n_steps == 0 {
        return Err(config_err("numerics.n_orbits", "need n_orbits >= 2 and n_steps >= 1"));
    }
    match e {
        Holder | Jump => {
            if !t_values.iter().any(|t| (t - num.t0).abs() <= 1e-12 * num.t0.abs().max(1.0)) && e == Holder {
                return Err(config_err("t_grid", "must contain numerics.t0"));
            }
            if num.scale_decades < 1 {
                return Err(config_err("numerics.scale_decades", "must be >= 1"));
            }
            if !(num.c_min > 0.0) {
                return Err(config_err("numerics.c_min", "must be > 0"));
            }
        }
        Fdt => {
            for m in &num.methods {
                if !["series", "resolvent", "ergodic"].contains(&m.as_str()) {
                    return Err(config_err("numerics.methods", format!("unknown method `{m}`")));
                }
            }
            if num.methods.is_empty() {
                return Err(config_err("numerics.methods", "is empty"));
            }
        }
        Evt => {
            if !(num.s > 0.0 && num.s < 1.0) {
                return Err(config_err("numerics.s", "must lie in (0, 1)"));
            }
            if num.a_list.is_empty() || num.a_list.iter().any(|&a| !(a < 0.0)) {
                return Err(config_err("numerics.a_list", "need at least one threshold, all < 0"));
            }
            if observable.as_ref().map(|o| o.kind()) != Some(ObservableKind::Heaviside) {
                return Err(config_err("observable", "evt needs a Heaviside observable"));
            }
        }
        Norms => {
            if num.r_list.is_empty() || num.resolutions.is_empty() {
                return Err(config_err("numerics.r_list", "norms needs r_list and resolutions"));
            }
        }
        Scaling => {
            if num.eps_list.len() < 3 {
                return Err(config_err("numerics.eps_list", "need at least 3 scales"));
            }
            if num.r.is_none() {
                return Err(config_err("numerics.r", "required by experiment `scaling`"));
            }
        }
        Rates => {
            if num.m < 8 || num.n_samples == 0 {
                return Err(config_err("numerics.m", "need m >= 8 and n_samples >= 1"));
            }
        }
        Srb | Response => {}
    }
    Ok(Prepared {
        family,
        observable,
        domain,
        cells,
        t_values,
        estimator,
    })
}

/// Result of a successful run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub manifest: Vec<ManifestEntry>,
    pub results: Value,
}

/// Validates `cfg`, runs its experiment and writes the outputs. `seed` and
/// `out` override the config's values.
pub fn run(cfg: &ExperimentConfig, seed: Option<u64>, out: Option<&Path>) -> std::result::Result<RunOutcome, RunError> {
    let seed = seed.unwrap_or(cfg.seed);
    let prep = prepare(cfg, seed).map_err(RunError::Validation)?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("{}_out", cfg.experiment.name())));
    fs::create_dir_all(&dir).map_err(|e| RunError::Validation(Error::Io(e)))?;
    let mut files = Vec::new();
    let results = execute(cfg, &prep, seed, &dir, &mut files).map_err(RunError::Computation)?;
    let mut effective = cfg.clone();
    effective.seed = seed;
    effective.output_dir = None;
    let doc = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment.name(),
        "seed": seed,
        "config": effective,
        "results": results,
    });
    let mut finish = || -> Result<Vec<ManifestEntry>> {
        write_json(&dir.join("results.json"), &doc)?;
        files.push("results.json".into());
        write_manifest(&dir, &files)
    };
    let manifest = finish().map_err(RunError::Computation)?;
    Ok(RunOutcome {
        output_dir: dir,
        manifest,
        results: doc,
    })
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn curve_outputs(curve: &ResponseCurve, t0: f64, dir: &Path, files: &mut Vec<String>) -> Result<Value> {
    curve.write_csv(&dir.join("curve.csv"))?;
    files.push("curve.csv".into());
    let fd: Vec<Value> = fd_derivatives_by_scale(curve, t0)
        .into_iter()
        .map(|(h, d)| json!({"h": h, "derivative": d}))
        .collect();
    Ok(json!({"curve": curve, "fd_derivatives": fd}))
}

fn fdt_outputs(res: &FdtResult, name: &str, dir: &Path, files: &mut Vec<String>) -> Result<()> {
    if !res.terms.is_empty() {
        let file = format!("terms_{name}.csv");
        res.write_csv(&dir.join(&file))?;
        files.push(file);
    }
    Ok(())
}

fn execute(cfg: &ExperimentConfig, prep: &Prepared, seed: u64, dir: &Path, files: &mut Vec<String>) -> Result<Value> {
    let num = &cfg.numerics;
    let family = || prep.family.as_ref().expect("validated");
    let observable = || prep.observable.as_ref().expect("validated");
    let t0 = num.t0;
    match cfg.experiment {
        Experiment::Rates => {
            let fam = family();
            let rates = finite_time_rates(fam.as_ref(), t0, num.m, num.n_samples, seed)?;
            let (du, ds) = (fam.unstable_dim(), fam.stable_dim());
            let conditions = [Condition::Star1, Condition::Star3, Condition::Star4]
                .into_iter()
                .map(|c| check_condition(&rates, c, num.p, num.beta, du, ds))
                .collect::<Result<Vec<_>>>()?;
            let bound = num.r.map(|r| predicted_holder_bound(&rates, r, num.p)).transpose()?;
            write_rows(
                &dir.join("rates.csv"),
                &["quantity", "value"],
                &[("nu_s", rates.nu_s), ("nu_s_bar", rates.nu_s_bar), ("nu_u", rates.nu_u), ("J", rates.j)]
                    .map(|(k, v)| vec![k.to_string(), format!("{v:e}")]),
            )?;
            let rows: Vec<Vec<String>> = conditions
                .iter()
                .map(|c| {
                    vec![
                        format!("{:?}", c.condition).to_lowercase(),
                        c.holds.to_string(),
                        format!("{:e}", c.lhs),
                        format!("{:e}", c.rhs),
                        format!("{:e}", c.margin),
                    ]
                })
                .collect();
            write_rows(&dir.join("conditions.csv"), &["condition", "holds", "lhs", "rhs", "margin"], &rows)?;
            files.extend(["rates.csv".into(), "conditions.csv".into()]);
            Ok(json!({"rates": rates, "conditions": conditions, "holder_bound": bound}))
        }
        Experiment::Srb => {
            let fam = family();
            match &prep.estimator {
                EstimatorParams::Ulam {
                    cells,
                    samples_per_cell,
                    seed,
                    tol,
                    max_iter,
                } => {
                    let mesh = Mesh::new(prep.domain.clone(), cells)?;
                    let op = build_ulam(fam.as_ref(), t0, &mesh, *samples_per_cell, *seed)?;
                    let rho = srb_ulam(&op, *tol, *max_iter)?;
                    rho.write_csv(&mesh, &dir.join("measure.csv"))?;
                    files.push("measure.csv".into());
                    let integral = prep.observable.as_ref().map(|o| integrate(&rho, o)).transpose()?;
                    Ok(json!({
                        "kind": rho.kind,
                        "n_cells": mesh.n_cells,
                        "n_active": op.n_active(),
                        "nnz": op.nnz(),
                        "residual": rho.residual,
                        "second_eigenvalue": rho.second_eigenvalue,
                        "warnings": rho.warnings,
                        "integral": integral,
                    }))
                }
                EstimatorParams::Birkhoff {
                    n_orbits,
                    n_steps,
                    burn_in,
                    seed,
                } => {
                    let rho = srb_birkhoff(fam.as_ref(), t0, *n_orbits, *n_steps, *burn_in, *seed)?;
                    let d = prep.domain.dim();
                    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
                    let header: Vec<&str> = header.iter().map(String::as_str).collect();
                    let rows: Vec<Vec<f64>> = rho.support_points.iter().map(|p| p[..d].to_vec()).collect();
                    write_table(&dir.join("support.csv"), &header, &rows)?;
                    files.push("support.csv".into());
                    let integral = prep.observable.as_ref().map(|o| integrate(&rho, o)).transpose()?;
                    Ok(json!({
                        "kind": rho.kind,
                        "n_support_points": rho.support_points.len(),
                        "warnings": rho.warnings,
                        "integral": integral,
                    }))
                }
                EstimatorParams::Tabulated => unreachable!(),
            }
        }
        Experiment::Response => {
            let curve = response_curve(family().as_ref(), observable(), &prep.t_values, &prep.estimator)?;
            curve_outputs(&curve, t0, dir, files)
        }
        Experiment::Holder => {
            let fam = family();
            let curve = response_curve(fam.as_ref(), observable(), &prep.t_values, &prep.estimator)?;
            let mut out = curve_outputs(&curve, t0, dir, files)?;
            let fit = holder_fit(&curve, t0, num.scale_decades)?;
            fit.write_csv(&dir.join("fit.csv"))?;
            files.push("fit.csv".into());
            out["fit"] = json!(fit);
            if let Some(r) = num.r {
                if fam.stable_dim() > 0 && fam.unstable_dim() > 0 {
                    let rates = finite_time_rates(fam.as_ref(), t0, num.m, num.n_samples, seed)?;
                    out["bound"] = json!(bound_comparison(&fit, &rates, r, num.p));
                }
            }
            Ok(out)
        }
        Experiment::Jump => {
            let curve = response_curve(family().as_ref(), observable(), &prep.t_values, &prep.estimator)?;
            let mut out = curve_outputs(&curve, t0, dir, files)?;
            let report = jump_detect(&curve, t0, num.c_min)?;
            let rows: Vec<Vec<f64>> = report.brackets.iter().map(|&(h, g, e)| vec![h, g, e]).collect();
            write_table(&dir.join("brackets.csv"), &["delta", "gap", "error"], &rows)?;
            files.push("brackets.csv".into());
            out["jump"] = json!(report);
            Ok(out)
        }
        Experiment::Fdt => {
            let fam = family();
            let obs = observable();
            let mut results = serde_json::Map::new();
            let needs_operator = num.methods.iter().any(|m| m != "ergodic");
            let mesh = Mesh::new(prep.domain.clone(), &prep.cells)?;
            let operator = if needs_operator {
                let op = build_ulam(fam.as_ref(), t0, &mesh, num.samples_per_cell, seed)?;
                let rho = srb_ulam(&op, num.tol, num.max_iter)?;
                Some((op, rho))
            } else {
                None
            };
            for method in &num.methods {
                let res = match method.as_str() {
                    "series" => {
                        let (op, rho) = operator.as_ref().unwrap();
                        fdt_series(op, fam, t0, obs, num.k_max, rho)?
                    }
                    "resolvent" => {
                        let (op, rho) = operator.as_ref().unwrap();
                        fdt_resolvent(op, fam, t0, obs, rho)?
                    }
                    _ => {
                        let orbits = OrbitParams {
                            n_orbits: num.n_orbits,
                            n_steps: num.n_steps,
                            burn_in: num.burn_in,
                            seed,
                        };
                        if obs.has_grad() {
                            ergodic_response_sum(fam, t0, obs, num.k_max, &orbits)?
                        } else {
                            let width = (0..mesh.dim()).map(|a| mesh.cell_width(a)).fold(0.0, f64::max);
                            let smooth = mollify(obs, num.eps.unwrap_or(2.0 * width), &mesh)?.grid.to_observable()?;
                            ergodic_response_sum(fam, t0, &smooth, num.k_max, &orbits)?
                        }
                    }
                };
                fdt_outputs(&res, method, dir, files)?;
                results.insert(method.clone(), json!(res));
            }
            Ok(Value::Object(results))
        }
        Experiment::Evt => {
            let q = evt_quotient(family().as_ref(), observable(), num.s, &num.a_list, t0, &prep.estimator)?;
            q.write_csv(&dir.join("evt.csv"))?;
            files.push("evt.csv".into());
            Ok(json!(q))
        }
        Experiment::Norms => {
            let rows: Vec<Vec<f64>> = match &prep.observable {
                None => indicator_membership_study(&num.r_list, num.p, &num.resolutions)?
                    .into_iter()
                    .map(|row| vec![row.resolution as f64, row.r, row.norm])
                    .collect(),
                Some(obs) => {
                    let mut rows = Vec::new();
                    for &n in &num.resolutions {
                        let grid = GridFunction::sample(obs, &Mesh::uniform(prep.domain.clone(), n)?);
                        for &r in &num.r_list {
                            rows.push(vec![n as f64, r, sobolev_norm(&grid, r, num.p)?]);
                        }
                    }
                    rows
                }
            };
            write_table(&dir.join("norms.csv"), &["resolution", "r", "norm"], &rows)?;
            files.push("norms.csv".into());
            Ok(json!({"p": num.p, "rows": rows}))
        }
        Experiment::Scaling => {
            let mesh = Mesh::new(prep.domain.clone(), &prep.cells)?;
            let fit = verify_scaling(observable(), num.r.unwrap(), num.r_tilde, num.p, &num.eps_list, &mesh)?;
            let rows: Vec<Vec<f64>> = (0..fit.eps.len()).map(|i| vec![fit.eps[i], fit.approx_norms[i], fit.blowup_norms[i]]).collect();
            write_table(&dir.join("scaling.csv"), &["eps", "approx_norm", "blowup_norm"], &rows)?;
            files.push("scaling.csv".into());
            Ok(json!(fit))
        }
    }
}

/// Sorted listing of families, observables and experiments with their
/// parameters.
pub fn list_builtins() -> String {
    let mut s = String::from("families:\n");
    for f in BuiltinFamily::ALL {
        let _ = writeln!(s, "  {}: {}", f.name(), f.description());
        for p in f.schema() {
            let _ = writeln!(s, "    {} = {} ({})", p.name, p.default, p.help);
        }
    }
    s.push_str("observables:\n");
    for o in BuiltinObservable::ALL {
        let _ = writeln!(s, "  {}: {}", o.name(), o.description());
        for p in o.schema() {
            let _ = writeln!(s, "    {} = {} ({})", p.name, p.default, p.help);
        }
    }
    s.push_str("experiments:\n");
    for e in Experiment::ALL {
        let _ = writeln!(s, "  {}: {}", e.name(), e.description());
    }
    s
}

/// Applies the thread-count override from the environment, if set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| config_err(THREADS_ENV, format!("`{v}` is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| config_err(THREADS_ENV, e.to_string()))?;
    }
    Ok(())
}
