//! Response curves `t -> ∫θ dρ_t`, finite-difference derivatives, and the
//! three response formulas: operator series, resolvent, ergodic sum.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::linear_fit;
use crate::dynamics::{perturbation_field, Family, MapFamily, Point};
use crate::error::{Error, Result};
use crate::norms::mollify_grid;
use crate::observables::{integrate, GridFunction, Observable};
use crate::transfer::{build_ulam, orbit_seed, resolvent_apply, srb_ulam, Mesh, SrbMeasure, UlamOperator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum EstimatorParams {
    /// Ulam fixed vector on `cells`; error bars from halving the mesh and the
    /// in-cell samples.
    Ulam {
        cells: Vec<usize>,
        samples_per_cell: usize,
        seed: u64,
        tol: f64,
        max_iter: usize,
    },
    /// Time averages over `n_orbits` orbits; error bars from the spread of the
    /// per-orbit means. Initial points are shared across `t`.
    Birkhoff {
        n_orbits: usize,
        n_steps: usize,
        burn_in: usize,
        seed: u64,
    },
    /// Values supplied directly.
    Tabulated,
}

impl EstimatorParams {
    pub fn ulam(cells: &[usize], samples_per_cell: usize, seed: u64) -> Self {
        EstimatorParams::Ulam {
            cells: cells.to_vec(),
            samples_per_cell,
            seed,
            tol: 1e-13,
            max_iter: 100_000,
        }
    }

    pub fn birkhoff(n_orbits: usize, n_steps: usize, burn_in: usize, seed: u64) -> Self {
        EstimatorParams::Birkhoff {
            n_orbits,
            n_steps,
            burn_in,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            EstimatorParams::Ulam {
                cells,
                samples_per_cell,
                tol,
                ..
            } => {
                if cells.is_empty() || cells.iter().any(|&n| n < 2) {
                    return Err(Error::invalid("cells", "need at least 2 cells per axis"));
                }
                if *samples_per_cell < 2 {
                    return Err(Error::invalid("samples_per_cell", "must be >= 2"));
                }
                if !(*tol > 0.0) {
                    return Err(Error::invalid("tol", "must be > 0"));
                }
            }
            EstimatorParams::Birkhoff { n_orbits, n_steps, .. } => {
                if *n_orbits < 2 || *n_steps < 1 {
                    return Err(Error::invalid("n_orbits", "need n_orbits >= 2 and n_steps >= 1"));
                }
            }
            EstimatorParams::Tabulated => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub t_values: Vec<f64>,
    pub r_values: Vec<f64>,
    pub error_bars: Vec<f64>,
    pub estimator: EstimatorParams,
    /// Per `t`: signed refinement deltas `[R - R_coarse_mesh, R - R_fewer_samples]`
    /// (Ulam) or the per-orbit means (Birkhoff).
    #[serde(skip)]
    pub diagnostics: Vec<Vec<f64>>,
}

impl ResponseCurve {
    /// Curve from given values and error bars, sorted by `t`.
    pub fn tabulated(t_values: &[f64], r_values: &[f64], error_bars: &[f64]) -> Result<Self> {
        if t_values.len() != r_values.len() || t_values.len() != error_bars.len() {
            return Err(Error::DimensionMismatch {
                expected: t_values.len(),
                found: r_values.len().min(error_bars.len()),
            });
        }
        if error_bars.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::invalid("error_bars", "must be >= 0"));
        }
        let mut idx: Vec<usize> = (0..t_values.len()).collect();
        idx.sort_by(|&a, &b| t_values[a].total_cmp(&t_values[b]));
        Ok(Self {
            t_values: idx.iter().map(|&i| t_values[i]).collect(),
            r_values: idx.iter().map(|&i| r_values[i]).collect(),
            error_bars: idx.iter().map(|&i| error_bars[i]).collect(),
            estimator: EstimatorParams::Tabulated,
            diagnostics: vec![Vec::new(); t_values.len()],
        })
    }

    pub fn len(&self) -> usize {
        self.t_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_values.is_empty()
    }

    /// Index of the grid point equal to `t` (relative tolerance 1e-9).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * self.t_values.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        self.t_values.iter().position(|&v| (v - t).abs() <= tol)
    }

    /// Uncertainty of `R(t_i) - R(t_j)`. Common-mode estimator errors cancel in
    /// the difference, so this can be far below the individual error bars.
    pub fn increment_error(&self, i: usize, j: usize) -> f64 {
        match &self.estimator {
            EstimatorParams::Ulam { .. } => self.diagnostics[i]
                .iter()
                .zip(&self.diagnostics[j])
                .map(|(a, b)| (a - b).abs())
                .sum(),
            EstimatorParams::Birkhoff { .. } => {
                let (a, b) = (&self.diagnostics[i], &self.diagnostics[j]);
                let n = a.len() as f64;
                let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                let m = d.iter().sum::<f64>() / n;
                (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) / n).sqrt()
            }
            EstimatorParams::Tabulated => self.error_bars[i].max(self.error_bars[j]),
        }
    }

    /// CSV with columns `t,R,error_bar`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "R", "error_bar"])?;
        for i in 0..self.len() {
            w.write_record(&[
                format!("{:e}", self.t_values[i]),
                format!("{:e}", self.r_values[i]),
                format!("{:e}", self.error_bars[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn coarse(cells: &[usize]) -> Vec<usize> {
    cells.iter().map(|&n| (n / 2).max(1)).collect()
}

fn ulam_measure(family: &dyn MapFamily, t: f64, cells: &[usize], spc: usize, seed: u64, tol: f64, max_iter: usize) -> Result<SrbMeasure> {
    let mesh = Mesh::new(family.domain().clone(), cells)?;
    let op = build_ulam(family, t, &mesh, spc, seed)?;
    srb_ulam(&op, tol, max_iter)
}

/// One estimated integral with its error bar.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    /// Signed refinement deltas (Ulam) or per-orbit means (Birkhoff).
    pub diagnostics: Vec<f64>,
}

/// Integrals of several observables against the invariant measure at `t`,
/// sharing one set of operators or orbits.
pub fn estimate_at(family: &dyn MapFamily, t: f64, observables: &[&Observable], estimator: &EstimatorParams) -> Result<Vec<Estimate>> {
    estimator.validate()?;
    match estimator {
        EstimatorParams::Ulam {
            cells,
            samples_per_cell,
            seed,
            tol,
            max_iter,
        } => {
            let fine = ulam_measure(family, t, cells, *samples_per_cell, *seed, *tol, *max_iter)?;
            let mesh = ulam_measure(family, t, &coarse(cells), *samples_per_cell, *seed, *tol, *max_iter)?;
            let samp = ulam_measure(family, t, cells, samples_per_cell / 2, *seed, *tol, *max_iter)?;
            observables
                .iter()
                .map(|o| {
                    let r = integrate(&fine, o)?;
                    let diagnostics = vec![r - integrate(&mesh, o)?, r - integrate(&samp, o)?];
                    Ok(Estimate {
                        value: r,
                        error: diagnostics.iter().map(|d| d.abs()).sum(),
                        diagnostics,
                    })
                })
                .collect()
        }
        EstimatorParams::Birkhoff {
            n_orbits,
            n_steps,
            burn_in,
            seed,
        } => Ok(birkhoff_means(family, t, observables, *n_orbits, *n_steps, *burn_in, *seed)?
            .into_iter()
            .map(|means| {
                let (value, error) = mean_and_error(&means);
                Estimate {
                    value,
                    error,
                    diagnostics: means,
                }
            })
            .collect()),
        EstimatorParams::Tabulated => Err(Error::Precondition("tabulated curves are not computed".into())),
    }
}

/// Per-orbit time averages of several observables at one `t`; indexed
/// `[observable][orbit]`. Orbits start from the same seeded points for every `t`.
pub fn birkhoff_means(
    family: &dyn MapFamily,
    t: f64,
    observables: &[&Observable],
    n_orbits: usize,
    n_steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let dom = family.domain();
    let d = dom.dim();
    let per_orbit = (0..n_orbits)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(orbit_seed(seed, k));
            let mut x = dom.random_point(&mut rng);
            let mut sums = vec![0.0; observables.len()];
            for step in 1..=burn_in + n_steps {
                x = family.eval(t, &x);
                if x[..d].iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericFailure {
                        step,
                        detail: format!("non-finite orbit point {x:?}"),
                    });
                }
                if step > burn_in {
                    for (s, o) in sums.iter_mut().zip(observables) {
                        *s += o.eval(&x);
                    }
                }
            }
            Ok(sums.into_iter().map(|s| s / n_steps as f64).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..observables.len()).map(|j| per_orbit.iter().map(|m| m[j]).collect()).collect())
}

pub(crate) fn mean_and_error(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// `R(t) = ∫θ dρ_t` on `t_list` with identical discretization and seeds at
/// every `t`.
pub fn response_curve(family: &dyn MapFamily, obs: &Observable, t_list: &[f64], estimator: &EstimatorParams) -> Result<ResponseCurve> {
    estimator.validate()?;
    let (lo, hi) = family.t_range();
    if let Some(&t) = t_list.iter().find(|&&t| !(t >= lo && t <= hi)) {
        return Err(Error::invalid("t_list", format!("{t} outside the family's range [{lo}, {hi}]")));
    }
    let mut ts = t_list.to_vec();
    ts.sort_by(f64::total_cmp);
    let mut out = ResponseCurve {
        t_values: ts.clone(),
        r_values: Vec::new(),
        error_bars: Vec::new(),
        estimator: estimator.clone(),
        diagnostics: Vec::new(),
    };
    for &t in &ts {
        let est = estimate_at(family, t, &[obs], estimator).map_err(|e| e.at_t(t))?.remove(0);
        out.r_values.push(est.value);
        out.error_bars.push(est.error);
        out.diagnostics.push(est.diagnostics);
    }
    Ok(out)
}

/// Symmetric pairs `(h, (R(t0+h) - R(t0-h)) / 2h)`, largest `h` first.
pub fn fd_derivatives_by_scale(curve: &ResponseCurve, t0: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for (i, &t) in curve.t_values.iter().enumerate() {
        let h = t - t0;
        if h <= 0.0 {
            continue;
        }
        if let Some(j) = curve.index_of(t0 - h) {
            out.push((h, (curve.r_values[i] - curve.r_values[j]) / (2.0 * h)));
        }
    }
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out
}

/// Central difference on the nearest symmetric pair around `t0`.
pub fn fd_derivative(curve: &ResponseCurve, t0: f64) -> Result<f64> {
    fd_derivatives_by_scale(curve, t0)
        .last()
        .map(|p| p.1)
        .ok_or_else(|| Error::Precondition(format!("t0 = {t0} has no symmetric neighbours on the curve")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdtMethod {
    Series,
    Resolvent,
    ErgodicSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdtResult {
    pub derivative: f64,
    pub terms: Vec<f64>,
    pub truncation_k: usize,
    pub tail_ratio: f64,
    pub method: FdtMethod,
    pub converged: bool,
    /// `|Σ q·vol| / ‖q‖₁` before the mean was removed (operator methods).
    pub mean_defect: f64,
    /// Monte-Carlo standard error (ergodic sum only).
    pub error_bar: f64,
    pub noise_dominated: bool,
}

impl FdtResult {
    /// CSV with columns `k,term`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["k", "term"])?;
        for (k, v) in self.terms.iter().enumerate() {
            w.write_record(&[k.to_string(), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Geometric decay rate of `|terms|` over the last half of the range.
pub fn tail_ratio(terms: &[f64]) -> f64 {
    let start = terms.len() / 2;
    let (x, y): (Vec<f64>, Vec<f64>) = terms
        .iter()
        .enumerate()
        .skip(start)
        .filter(|(_, v)| v.abs() > 0.0)
        .map(|(k, v)| (k as f64, v.abs().ln()))
        .unzip();
    if x.len() < 2 {
        return 0.0;
    }
    linear_fit(&x, &y).slope.exp()
}

/// Largest tolerated `|Σ q·vol| / ‖q‖₁` before the mean is removed.
pub const MEAN_DEFECT_LIMIT: f64 = 1e-3;

/// The source term `div(X)ρ + ⟨X, grad ρ⟩` on the mesh of `rho`, with `ρ`
/// the Ulam density mollified at two cells.
#[derive(Clone, Debug)]
pub struct PerturbationSource {
    /// Mean-zero source, one value per cell.
    pub q: Vec<f64>,
    pub mean_defect: f64,
    pub removed_mean: f64,
}

/// Ulam densities jitter at the cell scale by roughly the sampling error, and
/// differentiating amplifies that by the cell count, so the density is smoothed
/// over about `sqrt(cells per axis)` cells before taking gradients.
fn source_smoothing_scale(mesh: &Mesh) -> f64 {
    let d = mesh.dim();
    let width = (0..d).map(|a| mesh.cell_width(a)).fold(0.0, f64::max);
    let extent = (0..d).map(|a| mesh.domain.width(a)).fold(f64::INFINITY, f64::min);
    let per_axis = mesh.cells_per_dim.iter().copied().max().unwrap_or(1) as f64;
    (per_axis.sqrt().max(2.0) * width).min(extent / 8.0)
}

/// The mean is removed but not checked; see [`MEAN_DEFECT_LIMIT`].
pub fn perturbation_source(family: &Family, t0: f64, rho: &SrbMeasure) -> Result<PerturbationSource> {
    let mesh = rho
        .mesh
        .as_ref()
        .ok_or_else(|| Error::Precondition("the source needs an Ulam measure".into()))?;
    if !mesh.domain.is_fully_periodic() {
        return Err(Error::Unsupported("the source term needs a fully periodic mesh".into()));
    }
    let d = mesh.dim();
    let density = GridFunction::new(mesh.clone(), rho.density()?)?;
    let smooth = mollify_grid(&density, source_smoothing_scale(mesh))?;
    let q: Vec<f64> = if family.is_invertible() || family.dt_is_constant() {
        let field = perturbation_field(family, t0)?;
        let grads: Vec<GridFunction> = (0..d).map(|a| smooth.central_difference(a)).collect();
        (0..mesh.n_cells)
            .into_par_iter()
            .map(|c| {
                let x = mesh.center(c);
                let v = field.at(&x);
                let adv: f64 = (0..d).map(|a| v[a] * grads[a].values[c]).sum();
                field.divergence(&x) * smooth.values[c] + adv
            })
            .collect()
    } else {
        // flux ρX = Σ_y ρ(y) dt(y) / |det Df(y)| over the preimages y of x,
        // then its discrete divergence
        let probe = family.preimages(t0, &mesh.center(0));
        if probe.is_none() {
            return Err(Error::Unsupported(format!(
                "`{}` is neither invertible nor able to list preimages",
                family.name()
            )));
        }
        let flux: Vec<GridFunction> = (0..d)
            .map(|a| {
                let values = (0..mesh.n_cells)
                    .into_par_iter()
                    .map(|c| {
                        let ys = family.preimages(t0, &mesh.center(c)).unwrap_or_default();
                        ys.iter()
                            .map(|y| smooth.interpolate(y) * family.dt(t0, y)[a] / family.det_jac(t0, y).abs())
                            .sum()
                    })
                    .collect();
                GridFunction::new(mesh.clone(), values)
            })
            .collect::<Result<_>>()?;
        let divs: Vec<GridFunction> = flux.iter().enumerate().map(|(a, f)| f.central_difference(a)).collect();
        (0..mesh.n_cells).map(|c| divs.iter().map(|g| g.values[c]).sum()).collect()
    };
    let vol = mesh.cell_volume;
    let total: f64 = q.iter().sum::<f64>() * vol;
    let abs: f64 = q.iter().map(|v| v.abs()).sum::<f64>() * vol;
    let mean_defect = if abs > 0.0 { total.abs() / abs } else { 0.0 };
    let mean = q.iter().sum::<f64>() / q.len() as f64;
    Ok(PerturbationSource {
        q: q.iter().map(|v| v - mean).collect(),
        mean_defect,
        removed_mean: mean,
    })
}

fn checked_source(family: &Family, t0: f64, rho: &SrbMeasure) -> Result<PerturbationSource> {
    let src = perturbation_source(family, t0, rho)?;
    if src.mean_defect > MEAN_DEFECT_LIMIT {
        return Err(Error::Precondition(format!(
            "source integrates to {:.2e} of its L1 norm before correction; the mesh is too coarse",
            src.mean_defect
        )));
    }
    Ok(src)
}

fn check_operator(op: &UlamOperator, rho: &SrbMeasure, t0: f64) -> Result<()> {
    if rho.mesh.as_ref() != Some(&op.mesh) {
        return Err(Error::Precondition("rho must be the Ulam measure on the operator's mesh".into()));
    }
    if (op.t - t0).abs() > 1e-12 {
        return Err(Error::Precondition(format!("operator built at t = {}, not at t0 = {t0}", op.t)));
    }
    Ok(())
}

/// `-Σ_{k≤K} ∫ θ · L^k q`.
pub fn fdt_series(op: &UlamOperator, family: &Family, t0: f64, obs: &Observable, k_max: usize, rho: &SrbMeasure) -> Result<FdtResult> {
    check_operator(op, rho, t0)?;
    let src = checked_source(family, t0, rho)?;
    let theta = obs.on_mesh(&op.mesh);
    let vol = op.mesh.cell_volume;
    let mut v = op.to_active(&src.q);
    let theta_active = op.to_active(&theta);
    let mut terms = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        if k > 0 {
            v = op.apply_active(&v);
        }
        terms.push(v.iter().zip(&theta_active).map(|(a, b)| a * b).sum::<f64>() * vol);
    }
    let tail = tail_ratio(&terms);
    Ok(FdtResult {
        derivative: -terms.iter().sum::<f64>(),
        truncation_k: k_max,
        tail_ratio: tail,
        method: FdtMethod::Series,
        converged: tail < 1.0,
        mean_defect: src.mean_defect,
        error_bar: 0.0,
        noise_dominated: false,
        terms,
    })
}

/// `-∫ θ · (I - L)^{-1} q`.
pub fn fdt_resolvent(op: &UlamOperator, family: &Family, t0: f64, obs: &Observable, rho: &SrbMeasure) -> Result<FdtResult> {
    check_operator(op, rho, t0)?;
    let src = checked_source(family, t0, rho)?;
    let theta = obs.on_mesh(&op.mesh);
    let u = resolvent_apply(op, &src.q)?;
    let pairing = u.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>() * op.mesh.cell_volume;
    Ok(FdtResult {
        derivative: -pairing,
        terms: Vec::new(),
        truncation_k: 0,
        tail_ratio: 0.0,
        method: FdtMethod::Resolvent,
        converged: true,
        mean_defect: src.mean_defect,
        error_bar: 0.0,
        noise_dominated: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitParams {
    pub n_orbits: usize,
    pub n_steps: usize,
    pub burn_in: usize,
    pub seed: u64,
}

/// `Σ_{k≤K} ∫ ⟨grad θ(f^k x), Df^k(x) X(x)⟩ dρ(x)` along burned-in orbits.
pub fn ergodic_response_sum(family: &Family, t0: f64, obs: &Observable, k_max: usize, orbits: &OrbitParams) -> Result<FdtResult> {
    if !obs.has_grad() {
        return Err(Error::Precondition("the ergodic sum needs a smooth observable with a gradient".into()));
    }
    if orbits.n_orbits < 2 || orbits.n_steps == 0 {
        return Err(Error::invalid("n_orbits", "need n_orbits >= 2 and n_steps >= 1"));
    }
    let field = perturbation_field(family, t0)?;
    let dom = family.domain();
    let d = dom.dim();
    // per orbit: mean of each term over its starting points
    let per_orbit = (0..orbits.n_orbits)
        .into_par_iter()
        .map(|o| {
            let mut rng = ChaCha8Rng::seed_from_u64(orbit_seed(orbits.seed, o));
            let mut x = dom.random_point(&mut rng);
            for _ in 0..orbits.burn_in {
                x = family.eval(t0, &x);
            }
            let len = orbits.n_steps + k_max;
            let mut pts: Vec<Point> = Vec::with_capacity(len + 1);
            pts.push(x);
            for _ in 0..len {
                x = family.eval(t0, &x);
                pts.push(x);
            }
            let grads: Vec<Point> = pts.iter().map(|p| obs.grad(p).unwrap()).collect();
            let mut sums = vec![0.0; k_max + 1];
            for j in 0..orbits.n_steps {
                let mut v = field.at(&pts[j]);
                for k in 0..=k_max {
                    let p = &pts[j + k];
                    sums[k] += (0..d).map(|a| grads[j + k][a] * v[a]).sum::<f64>();
                    if k < k_max {
                        let jac = family.jac(t0, p);
                        let mut w = [0.0; 3];
                        for r in 0..d {
                            w[r] = (0..d).map(|c| jac[(r, c)] * v[c]).sum();
                        }
                        if w[..d].iter().any(|x| !x.is_finite()) {
                            return Err(Error::NumericFailure {
                                step: k + 1,
                                detail: "tangent vector overflow in the Jacobian chain".into(),
                            });
                        }
                        v = w;
                    }
                }
            }
            Ok(sums.into_iter().map(|s| s / orbits.n_steps as f64).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let terms: Vec<f64> = (0..=k_max)
        .map(|k| per_orbit.iter().map(|m| m[k]).sum::<f64>() / orbits.n_orbits as f64)
        .collect();
    let totals: Vec<f64> = per_orbit.iter().map(|m| m.iter().sum()).collect();
    let (derivative, error_bar) = mean_and_error(&totals);
    let tail = tail_ratio(&terms);
    Ok(FdtResult {
        derivative,
        truncation_k: k_max,
        tail_ratio: tail,
        method: FdtMethod::ErgodicSum,
        converged: tail < 1.0,
        mean_defect: 0.0,
        error_bar,
        noise_dominated: error_bar > derivative.abs(),
        terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::make_builtin_family;
    use crate::observables::make_builtin_observable;
    use crate::params::Params;
    use crate::transfer::build_ulam;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn params(kv: &[(&str, f64)]) -> Params {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn fam(name: &str) -> Family {
        make_builtin_family(name, &Params::new()).unwrap()
    }

    #[test]
    fn fd_examples() {
        let ts = [-0.02, -0.01, 0.0, 0.01, 0.02];
        let lin = ResponseCurve::tabulated(&ts, &ts.map(|t| 3.0 * t), &[0.0; 5]).unwrap();
        assert!((fd_derivative(&lin, 0.0).unwrap() - 3.0).abs() < 1e-12);
        let sq = ResponseCurve::tabulated(&ts, &ts.map(|t| t * t), &[0.0; 5]).unwrap();
        assert_eq!(fd_derivative(&sq, 0.0).unwrap(), 0.0);
        assert!(fd_derivative(&sq, 0.02).is_err());
        assert_eq!(fd_derivatives_by_scale(&sq, 0.0).len(), 2);
    }

    #[test]
    fn skew_crossing_jumps() {
        let skew = make_builtin_family("skew_atomic", &params(&[("lambda", 0.5), ("c", 0.25)])).unwrap();
        let obs = make_builtin_observable("coordinate_threshold", &params(&[("axis", 1.0), ("a", 0.45)]), skew.domain()).unwrap();
        let ts: Vec<f64> = (-4..=4).map(|k| -0.025 + 0.002 * k as f64 + 0.001).collect();
        let curve = response_curve(skew.as_ref(), &obs, &ts, &EstimatorParams::birkhoff(4, 100, 80, 1)).unwrap();
        for (t, r) in curve.t_values.iter().zip(&curve.r_values) {
            assert_eq!(*r, if *t > -0.025 { 1.0 } else { 0.0 });
        }
        let empty = response_curve(skew.as_ref(), &obs, &[], &EstimatorParams::birkhoff(4, 100, 80, 1)).unwrap();
        assert!(empty.is_empty());
        assert!(response_curve(skew.as_ref(), &obs, &[0.2], &EstimatorParams::birkhoff(4, 100, 80, 1)).is_err());
    }

    #[test]
    fn translation_family_has_flat_ulam_response() {
        let cat = fam("cat_translate");
        let obs = make_builtin_observable("trig", &params(&[("k2", 1.0), ("phase", 0.4)]), cat.domain()).unwrap();
        let ts = [-0.04, -0.02, 0.0, 0.02, 0.04];
        let curve = response_curve(cat.as_ref(), &obs, &ts, &EstimatorParams::ulam(&[32, 32], 32, 5)).unwrap();
        let r0 = curve.r_values[2];
        for i in 0..5 {
            assert!((curve.r_values[i] - r0).abs() <= 2.0 * (curve.error_bars[i] + curve.error_bars[2]), "{curve:?}");
        }
        let d = fd_derivative(&curve, 0.0).unwrap();
        assert!(d.abs() * 2.0 * 0.02 <= 2.0 * (curve.error_bars[1] + curve.error_bars[3]));
    }

    #[test]
    fn translation_family_fdt_vanishes() {
        let cat = fam("cat_translate");
        // the sampled density error enters through its gradient, hence the large sample count
        let mesh = Mesh::uniform(cat.domain().clone(), 64).unwrap();
        let op = build_ulam(cat.as_ref(), 0.0, &mesh, 4096, 1).unwrap();
        let rho = srb_ulam(&op, 1e-13, 10_000).unwrap();
        let obs = make_builtin_observable("trig", &Params::new(), cat.domain()).unwrap();
        let s = fdt_series(&op, &cat, 0.0, &obs, 20, &rho).unwrap();
        assert!(s.derivative.abs() < 1e-3, "{s:?}");
        let r = fdt_resolvent(&op, &cat, 0.0, &obs, &rho).unwrap();
        assert!(r.derivative.abs() < 1e-3);
        let flat = ergodic_response_sum(&cat, 0.0, &obs, 0, &OrbitParams { n_orbits: 8, n_steps: 4000, burn_in: 10, seed: 1 }).unwrap();
        assert!(flat.derivative.abs() < 4.0 * flat.error_bar + 1e-3, "{flat:?}");
    }

    #[test]
    fn series_sign_and_sum() {
        let cat = fam("cat_translate");
        let mesh = Mesh::uniform(cat.domain().clone(), 16).unwrap();
        let op = build_ulam(cat.as_ref(), 0.0, &mesh, 16, 1).unwrap();
        let rho = srb_ulam(&op, 1e-13, 10_000).unwrap();
        let obs = make_builtin_observable("trig", &Params::new(), cat.domain()).unwrap();
        let s = fdt_series(&op, &cat, 0.0, &obs, 10, &rho).unwrap();
        assert!((s.derivative + s.terms.iter().sum::<f64>()).abs() < 1e-12);
        assert!(fdt_series(&op, &cat, 0.01, &obs, 10, &rho).is_err());
    }

    #[test]
    fn dissipative_cat_against_closed_form() {
        // θ = cos 2π(x - y) pairs only with the k = 0 term: derivative -π ε at t0 = 0
        let eps = 0.1;
        let fam = make_builtin_family("cat_dissipative", &params(&[("eps", eps)])).unwrap();
        let theta = Observable::smooth(
            Arc::new(|x: &Point| (2.0 * PI * (x[0] - x[1])).cos()),
            Some(Arc::new(|x: &Point| {
                let s = -2.0 * PI * (2.0 * PI * (x[0] - x[1])).sin();
                [s, -s, 0.0]
            })),
        );
        let exact = -PI * eps;
        let mesh = Mesh::uniform(fam.domain().clone(), 128).unwrap();
        let op = build_ulam(fam.as_ref(), 0.0, &mesh, 64, 1).unwrap();
        let rho = srb_ulam(&op, 1e-13, 10_000).unwrap();
        let s = fdt_series(&op, &fam, 0.0, &theta, 40, &rho).unwrap();
        let r = fdt_resolvent(&op, &fam, 0.0, &theta, &rho).unwrap();
        assert!((s.derivative - exact).abs() < 0.05 * exact.abs(), "{s:?}");
        assert!((r.derivative - s.derivative).abs() < 1e-6, "{} vs {}", r.derivative, s.derivative);
        assert!(s.converged && s.tail_ratio < 0.95);
        let e = ergodic_response_sum(&fam, 0.0, &theta, 3, &OrbitParams { n_orbits: 16, n_steps: 20_000, burn_in: 50, seed: 3 }).unwrap();
        assert!((e.derivative - exact).abs() < (4.0 * e.error_bar).max(0.05 * exact.abs()), "{e:?}");
    }

    #[test]
    fn doubling_series_matches_resolvent() {
        let dbl = fam("doubling");
        let t0 = 0.03;
        let mesh = Mesh::uniform(dbl.domain().clone(), 1024).unwrap();
        let op = build_ulam(dbl.as_ref(), t0, &mesh, 64, 1).unwrap();
        let rho = srb_ulam(&op, 1e-14, 10_000).unwrap();
        // cos(2πx); sin(2πx) has zero response since the family commutes with x ↦ -x
        let p: Params = [("phase".to_string(), PI / 2.0)].into();
        let obs = make_builtin_observable("trig", &p, dbl.domain()).unwrap();
        let s = fdt_series(&op, &dbl, t0, &obs, 40, &rho).unwrap();
        let r = fdt_resolvent(&op, &dbl, t0, &obs, &rho).unwrap();
        assert!(s.tail_ratio.powi(40) < 1e-3, "{s:?}");
        // spectral (Fourier-Galerkin) value of the derivative
        assert!((s.derivative - 0.263138).abs() < 0.05 * 0.263138, "{}", s.derivative);
        assert!((s.derivative - r.derivative).abs() < 0.01 * r.derivative.abs(), "{} vs {}", s.derivative, r.derivative);
        assert!(s.mean_defect < 1e-12);
    }

    #[test]
    fn zero_field_gives_zero_sum() {
        let skew = make_builtin_family("skew_atomic", &Params::new()).unwrap();
        // dt is the constant (0, 1): with θ depending on the first coordinate only the pairing vanishes
        let obs = make_builtin_observable("trig", &Params::new(), skew.domain()).unwrap();
        let e = ergodic_response_sum(&skew, 0.0, &obs, 0, &OrbitParams { n_orbits: 2, n_steps: 10, burn_in: 0, seed: 0 }).unwrap();
        assert_eq!(e.derivative, 0.0);
    }
}
