//! Ulam discretization of the transfer operator, SRB estimation and resolvent
//! solves.
//!
//! Cells are indexed first-coordinate-fastest. Public vectors are always over
//! all mesh cells; on domains with bounded directions the operator lives on the
//! reachable cells only and the remaining entries are zero.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::dynamics::{orbit, DomainKind, MapFamily, ModelDomain, Point};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub domain: ModelDomain,
    pub cells_per_dim: Vec<usize>,
    pub n_cells: usize,
    pub cell_volume: f64,
}

impl Mesh {
    pub fn new(domain: ModelDomain, cells_per_dim: &[usize]) -> Result<Self> {
        if cells_per_dim.len() != domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: domain.dim(),
                found: cells_per_dim.len(),
            });
        }
        if cells_per_dim.contains(&0) {
            return Err(Error::invalid("cells_per_dim", "every entry must be >= 1"));
        }
        let n_cells = cells_per_dim.iter().product::<usize>();
        if n_cells > u32::MAX as usize {
            return Err(Error::invalid("cells_per_dim", "too many cells"));
        }
        let cell_volume = domain.volume() / n_cells as f64;
        Ok(Self {
            cells_per_dim: cells_per_dim.to_vec(),
            n_cells,
            cell_volume,
            domain,
        })
    }

    /// `n` cells along every axis.
    pub fn uniform(domain: ModelDomain, n: usize) -> Result<Self> {
        let d = domain.dim();
        Self::new(domain, &vec![n; d])
    }

    pub fn dim(&self) -> usize {
        self.cells_per_dim.len()
    }

    pub fn cell_width(&self, axis: usize) -> f64 {
        self.domain.width(axis) / self.cells_per_dim[axis] as f64
    }

    pub fn multi_index(&self, mut cell: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.dim());
        for &n in &self.cells_per_dim {
            idx.push(cell % n);
            cell /= n;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut cell = 0;
        for (&i, &n) in idx.iter().zip(&self.cells_per_dim).rev() {
            cell = cell * n + i;
        }
        cell
    }

    /// Cell containing `x` (after periodic wrapping), or `None` outside the
    /// bounded directions.
    pub fn locate(&self, x: &Point) -> Option<usize> {
        let x = self.domain.wrap(*x);
        let mut cell = 0;
        for axis in (0..self.dim()).rev() {
            let (lo, hi) = self.domain.bounds[axis];
            let n = self.cells_per_dim[axis];
            if !(x[axis] >= lo && x[axis] <= hi) {
                return None;
            }
            let i = (((x[axis] - lo) / (hi - lo)) * n as f64) as usize;
            cell = cell * n + i.min(n - 1);
        }
        Some(cell)
    }

    pub fn center(&self, cell: usize) -> Point {
        self.point_in_cell(cell, &[0.5; 3])
    }

    /// Point at relative position `frac` (each entry in `[0,1)`) inside `cell`.
    pub fn point_in_cell(&self, cell: usize, frac: &[f64; 3]) -> Point {
        let idx = self.multi_index(cell);
        let mut x = [0.0; 3];
        for axis in 0..self.dim() {
            let lo = self.domain.bounds[axis].0;
            x[axis] = lo + (idx[axis] as f64 + frac[axis]) * self.cell_width(axis);
        }
        x
    }
}

/// Additive recurrence with the generalized golden ratio: a well-spread
/// sequence in `[0,1)^d`.
struct LowDiscrepancy {
    step: [f64; 3],
    d: usize,
}

impl LowDiscrepancy {
    fn new(d: usize) -> Self {
        // phi_d solves x^(d+1) = x + 1
        let mut phi = 2.0f64;
        for _ in 0..64 {
            phi = (1.0 + phi).powf(1.0 / (d as f64 + 1.0));
        }
        let mut step = [0.0; 3];
        let mut a = 1.0;
        for s in step.iter_mut().take(d) {
            a /= phi;
            *s = a;
        }
        Self { step, d }
    }

    fn point(&self, k: usize, shift: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for j in 0..self.d {
            out[j] = (shift[j] + (k as f64 + 1.0) * self.step[j]).fract();
        }
        out
    }
}

fn cell_shift(seed: u64, cell: usize) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell as u64);
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Column-stochastic Ulam matrix of `f_t` on a mesh.
#[derive(Clone, Debug)]
pub struct UlamOperator {
    pub mesh: Mesh,
    /// Row-major matrix over the active cells; entry `(i, j)` is the fraction
    /// of active cell `j` mapped into active cell `i`.
    pub matrix: CsMat<f64>,
    /// Mesh cell of each active index, increasing.
    pub active: Vec<usize>,
    pub t: f64,
    pub samples_per_cell: usize,
    pub seed: u64,
}

/// Landing cells of one column, as `(cell, weight)` sorted by cell.
fn column(family: &dyn MapFamily, t: f64, mesh: &Mesh, cell: usize, samples: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    let d = mesh.dim();
    let shift = cell_shift(seed, cell);
    let w = 1.0 / samples as f64;
    let seq = LowDiscrepancy::new(d);
    let mut hits: Vec<usize> = Vec::with_capacity(samples);
    for k in 0..samples {
        let x = mesh.point_in_cell(cell, &seq.point(k, &shift));
        let y = family.eval(t, &x);
        if y[..d].iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                step: k,
                detail: format!("non-finite image of {x:?}"),
            });
        }
        match mesh.locate(&y) {
            Some(i) => hits.push(i),
            None => return Err(Error::Precondition(format!("image {y:?} of {x:?} leaves the mesh"))),
        }
    }
    hits.sort_unstable();
    let mut out: Vec<(usize, f64)> = Vec::new();
    for i in hits {
        match out.last_mut() {
            Some((c, v)) if *c == i => *v += w,
            _ => out.push((i, w)),
        }
    }
    Ok(out)
}

fn columns_for(
    family: &dyn MapFamily,
    t: f64,
    mesh: &Mesh,
    cells: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<Vec<(usize, f64)>>> {
    cells
        .par_iter()
        .map(|&c| {
            column(family, t, mesh, c, samples, seed).map_err(|e| Error::AtCell {
                cell: c,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Assembles the Ulam matrix from `samples_per_cell` low-discrepancy points
/// per cell. The in-cell points depend only on `(seed, cell)`, so operators at
/// different `t` share them.
pub fn build_ulam(family: &dyn MapFamily, t: f64, mesh: &Mesh, samples_per_cell: usize, seed: u64) -> Result<UlamOperator> {
    if samples_per_cell == 0 {
        return Err(Error::invalid("samples_per_cell", "must be >= 1"));
    }
    if family.domain() != &mesh.domain {
        return Err(Error::Precondition(format!("mesh domain does not match family `{}`", family.name())));
    }
    let (active, cols) = if mesh.domain.is_fully_periodic() {
        let all: Vec<usize> = (0..mesh.n_cells).collect();
        let cols = columns_for(family, t, mesh, &all, samples_per_cell, seed)?;
        (all, cols)
    } else {
        reachable_columns(family, t, mesh, samples_per_cell, seed)?
    };
    let mut position = vec![u32::MAX; mesh.n_cells];
    for (k, &c) in active.iter().enumerate() {
        position[c] = k as u32;
    }
    let n = active.len();
    let nnz = cols.iter().map(Vec::len).sum();
    let mut tri = TriMat::with_capacity((n, n), nnz);
    for (j, col) in cols.iter().enumerate() {
        for &(cell, w) in col {
            tri.add_triplet(position[cell] as usize, j, w);
        }
    }
    Ok(UlamOperator {
        mesh: mesh.clone(),
        matrix: tri.to_csr(),
        active,
        t,
        samples_per_cell,
        seed,
    })
}

/// Cells reachable from a burned-in orbit, with their columns.
fn reachable_columns(
    family: &dyn MapFamily,
    t: f64,
    mesh: &Mesh,
    samples: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<Vec<(usize, f64)>>)> {
    let pts = orbit(family, t, None, 2000, 1000, seed)?;
    let mut seen = BTreeSet::new();
    for p in &pts {
        if let Some(c) = mesh.locate(p) {
            seen.insert(c);
        }
    }
    let mut frontier: Vec<usize> = seen.iter().copied().collect();
    let mut found: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
    while !frontier.is_empty() {
        let cols = columns_for(family, t, mesh, &frontier, samples, seed)?;
        let mut next = Vec::new();
        for (&c, col) in frontier.iter().zip(cols) {
            for &(i, _) in &col {
                if seen.insert(i) {
                    next.push(i);
                }
            }
            found.push((c, col));
        }
        next.sort_unstable();
        frontier = next;
    }
    found.sort_unstable_by_key(|(c, _)| *c);
    Ok(found.into_iter().unzip())
}

impl UlamOperator {
    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    pub fn nnz(&self) -> usize {
        self.matrix.nnz()
    }

    fn is_full(&self) -> bool {
        self.active.len() == self.mesh.n_cells
    }

    /// Restriction of a cell vector to the active cells.
    pub fn to_active(&self, v: &[f64]) -> Vec<f64> {
        if self.is_full() {
            v.to_vec()
        } else {
            self.active.iter().map(|&c| v[c]).collect()
        }
    }

    /// Extension by zero of an active-cell vector.
    pub fn to_cells(&self, v: &[f64]) -> Vec<f64> {
        if self.is_full() {
            return v.to_vec();
        }
        let mut out = vec![0.0; self.mesh.n_cells];
        for (&c, &x) in self.active.iter().zip(v) {
            out[c] = x;
        }
        out
    }

    /// `L v` on active-cell vectors.
    pub(crate) fn apply_active(&self, v: &[f64]) -> Vec<f64> {
        let indptr = self.matrix.indptr();
        let indptr = indptr.raw_storage();
        let indices = self.matrix.indices();
        let data = self.matrix.data();
        (0..self.n_active())
            .into_par_iter()
            .map(|i| {
                let (a, b) = (indptr[i], indptr[i + 1]);
                indices[a..b].iter().zip(&data[a..b]).map(|(&j, &w)| w * v[j]).sum()
            })
            .collect()
    }

    /// `L v` on cell vectors.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        Ok(self.to_cells(&self.apply_active(&self.to_active(v))))
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.mesh.n_cells {
            return Err(Error::DimensionMismatch {
                expected: self.mesh.n_cells,
                found: n,
            });
        }
        Ok(())
    }

    /// Column sums, in active order.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_active()];
        for (&j, &w) in self.matrix.indices().iter().zip(self.matrix.data()) {
            sums[j] += w;
        }
        sums
    }

    /// Dense copy over the active cells (small meshes only).
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n_active();
        let mut m = vec![vec![0.0; n]; n];
        for (w, (i, j)) in self.matrix.iter() {
            m[i][j] = *w;
        }
        m
    }

    /// Uniform probability vector over the active cells.
    fn uniform_active(&self) -> Vec<f64> {
        vec![1.0 / self.n_active() as f64; self.n_active()]
    }
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    UlamVector,
    Empirical,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SrbMeasure {
    pub kind: MeasureKind,
    /// Over mesh cells (`UlamVector`) or over `support_points` (`Empirical`).
    pub weights: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub support_points: Vec<Point>,
    pub residual: f64,
    /// Present for Ulam measures: the mesh the weights live on.
    #[serde(skip)]
    pub mesh: Option<Mesh>,
    /// Modulus of the second eigenvalue of the Ulam matrix, when estimated.
    pub second_eigenvalue: Option<f64>,
    pub warnings: Vec<String>,
}

impl SrbMeasure {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Cell densities `weight / cell_volume`; Ulam measures only.
    pub fn density(&self) -> Result<Vec<f64>> {
        let mesh = self
            .mesh
            .as_ref()
            .ok_or_else(|| Error::Precondition("density needs an Ulam measure".into()))?;
        Ok(self.weights.iter().map(|w| w / mesh.cell_volume).collect())
    }

    /// Mass of each mesh cell (for empirical measures, the histogram).
    pub fn cell_masses(&self, mesh: &Mesh) -> Result<Vec<f64>> {
        match self.kind {
            MeasureKind::UlamVector => {
                if self.weights.len() != mesh.n_cells {
                    return Err(Error::DimensionMismatch {
                        expected: mesh.n_cells,
                        found: self.weights.len(),
                    });
                }
                Ok(self.weights.clone())
            }
            MeasureKind::Empirical => {
                let mut out = vec![0.0; mesh.n_cells];
                for (p, w) in self.support_points.iter().zip(&self.weights) {
                    if let Some(c) = mesh.locate(p) {
                        out[c] += w;
                    }
                }
                Ok(out)
            }
        }
    }

    /// CSV with one row per cell: multi-index columns then the weight.
    pub fn write_csv(&self, mesh: &Mesh, path: &Path) -> Result<()> {
        let masses = self.cell_masses(mesh)?;
        write_cell_csv(mesh, &masses, "weight", path)
    }
}

/// Writes a cell vector as CSV (`i0[,i1[,i2]],<name>`).
pub fn write_cell_csv(mesh: &Mesh, values: &[f64], name: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..mesh.dim()).map(|a| format!("i{a}")).collect();
    header.push(name.to_string());
    w.write_record(&header)?;
    for (c, v) in values.iter().enumerate() {
        let mut row: Vec<String> = mesh.multi_index(c).iter().map(|i| i.to_string()).collect();
        row.push(format!("{v:e}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_cell_csv`].
pub fn read_cell_csv(mesh: &Mesh, path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = vec![0.0; mesh.n_cells];
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != mesh.dim() + 1 {
            return Err(Error::Format(format!("expected {} columns, found {}", mesh.dim() + 1, rec.len())));
        }
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Format(format!("`{s}`: {e}")));
        let idx = (0..mesh.dim())
            .map(|a| {
                let i = parse(&rec[a])? as usize;
                if i >= mesh.cells_per_dim[a] {
                    return Err(Error::Format(format!("index {i} out of range on axis {a}")));
                }
                Ok(i)
            })
            .collect::<Result<Vec<_>>>()?;
        out[mesh.flat_index(&idx)] = parse(&rec[mesh.dim()])?;
    }
    Ok(out)
}

const SECOND_EIG_ITERS: usize = 200;

/// Modulus of the leading eigenvalue of `L` on mean-zero vectors, by power
/// iteration (geometric mean of the growth over the last half).
pub fn second_eigenvalue_modulus(op: &UlamOperator, iters: usize, seed: u64) -> f64 {
    let n = op.n_active();
    if n < 2 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let project = |w: &mut Vec<f64>| {
        let m = w.iter().sum::<f64>() / n as f64;
        w.iter_mut().for_each(|x| *x -= m);
        let s = l1(w);
        if s > 0.0 {
            w.iter_mut().for_each(|x| *x /= s);
        }
    };
    project(&mut w);
    let mut log_growth = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut next = op.apply_active(&w);
        let m = next.iter().sum::<f64>() / n as f64;
        next.iter_mut().for_each(|x| *x -= m);
        let g = l1(&next);
        if g == 0.0 {
            return 0.0;
        }
        log_growth.push(g.ln());
        w = next;
        project(&mut w);
    }
    let tail = &log_growth[iters / 2..];
    (tail.iter().sum::<f64>() / tail.len() as f64).exp()
}

/// Fixed vector of the Ulam matrix by power iteration from the uniform vector,
/// stopped when successive iterates are `tol`-close in total variation.
pub fn srb_ulam(op: &UlamOperator, tol: f64, max_iter: usize) -> Result<SrbMeasure> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be > 0"));
    }
    let mut v = op.uniform_active();
    let mut tv = f64::INFINITY;
    let mut converged = false;
    for _ in 0..max_iter {
        let mut next = op.apply_active(&v);
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= s);
        tv = 0.5 * l1_diff(&next, &v);
        v = next;
        if tv < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: max_iter,
            residual: tv,
        });
    }
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    let residual = l1_diff(&op.apply_active(&v), &v);
    let lambda2 = second_eigenvalue_modulus(op, SECOND_EIG_ITERS, op.seed);
    let mut warnings = Vec::new();
    if lambda2 > 1.0 - 1e-6 {
        warnings.push(format!(
            "second eigenvalue modulus {lambda2:.6} is ~1: the fixed vector may not be unique"
        ));
    }
    Ok(SrbMeasure {
        kind: MeasureKind::UlamVector,
        weights: op.to_cells(&v),
        support_points: Vec::new(),
        residual,
        mesh: Some(op.mesh.clone()),
        second_eigenvalue: Some(lambda2),
        warnings,
    })
}

/// Empirical measure with equal weights on all post-burn-in points of
/// `n_orbits` orbits started at seeded uniform points.
pub fn srb_birkhoff(
    family: &dyn MapFamily,
    t: f64,
    n_orbits: usize,
    n_steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<SrbMeasure> {
    if n_orbits == 0 || n_steps == 0 {
        return Err(Error::Precondition("n_orbits and n_steps must be >= 1".into()));
    }
    let orbits = (0..n_orbits)
        .into_par_iter()
        .map(|k| orbit(family, t, None, n_steps, burn_in, orbit_seed(seed, k)))
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<Point> = orbits.into_iter().flatten().collect();
    let w = 1.0 / points.len() as f64;
    Ok(SrbMeasure {
        kind: MeasureKind::Empirical,
        weights: vec![w; points.len()],
        support_points: points,
        residual: 0.0,
        mesh: None,
        second_eigenvalue: None,
        warnings: Vec::new(),
    })
}

/// Seed of the `k`-th orbit in an ensemble.
pub(crate) fn orbit_seed(seed: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng.gen()
}

/// `L^n` applied to the uniform vector, normalized.
pub fn push_lebesgue(op: &UlamOperator, n: usize) -> SrbMeasure {
    let mut v = op.uniform_active();
    for _ in 0..n {
        v = op.apply_active(&v);
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
    }
    let residual = l1_diff(&op.apply_active(&v), &v);
    SrbMeasure {
        kind: MeasureKind::UlamVector,
        weights: op.to_cells(&v),
        support_points: Vec::new(),
        residual,
        mesh: Some(op.mesh.clone()),
        second_eigenvalue: None,
        warnings: Vec::new(),
    }
}

const GMRES_RESTART: usize = 60;
const GMRES_MAX_CYCLES: usize = 200;
const RESOLVENT_TOL: f64 = 1e-10;
const NEUMANN_MAX_TERMS: usize = 100_000;

/// Solves `(I - L) u = rhs` on mean-zero vectors, returning the mean-zero
/// solution. Restarted GMRES, with the Neumann series as fallback.
pub fn resolvent_apply(op: &UlamOperator, rhs: &[f64]) -> Result<Vec<f64>> {
    op.check_len(rhs.len())?;
    let norm = l1(rhs);
    if norm == 0.0 {
        return Ok(vec![0.0; rhs.len()]);
    }
    let sum: f64 = rhs.iter().sum();
    if sum.abs() >= 1e-8 * norm {
        return Err(Error::Precondition(format!(
            "resolvent needs a mean-zero right-hand side; measured sum {sum:e} (mean {:e})",
            sum / rhs.len() as f64
        )));
    }
    let b = op.to_active(rhs);
    let target = RESOLVENT_TOL * norm;
    let (u, history) = gmres(op, &b, target);
    let u = match u {
        Some(u) => u,
        None => match neumann(op, &b, target) {
            Some(u) => u,
            None => return Err(Error::Stagnation { history }),
        },
    };
    Ok(op.to_cells(&u))
}

/// Mean-zero `u` with `(I - L) u`, and its L1 residual against `b`.
fn residual_l1(op: &UlamOperator, u: &[f64], b: &[f64]) -> f64 {
    let lu = op.apply_active(u);
    u.iter().zip(&lu).zip(b).map(|((u, l), b)| (u - l - b).abs()).sum()
}

fn remove_mean(u: &mut [f64]) {
    let m = u.iter().sum::<f64>() / u.len() as f64;
    u.iter_mut().for_each(|x| *x -= m);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gmres(op: &UlamOperator, b: &[f64], target_l1: f64) -> (Option<Vec<f64>>, Vec<f64>) {
    let n = b.len();
    let a = |v: &[f64]| -> Vec<f64> {
        let lv = op.apply_active(v);
        v.iter().zip(lv).map(|(x, l)| x - l).collect()
    };
    let mut x = vec![0.0; n];
    let mut history = Vec::new();
    for _ in 0..GMRES_MAX_CYCLES {
        let ax = a(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let res1 = l1(&r);
        history.push(res1);
        if res1 < target_l1 {
            remove_mean(&mut x);
            return (Some(x), history);
        }
        // stagnation: no progress over the last few cycles
        let k = history.len();
        if k >= 4 && history[k - 1] > 0.9 * history[k - 4] {
            return (None, history);
        }
        let beta = dot(&r, &r).sqrt();
        let m = GMRES_RESTART.min(n);
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|x| x / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut used = 0;
        for j in 0..m {
            let mut w = a(&v[j]);
            for i in 0..=j {
                h[i][j] = dot(&w, &v[i]);
                w.iter_mut().zip(&v[i]).for_each(|(w, v)| *w -= h[i][j] * v);
            }
            h[j + 1][j] = dot(&w, &w).sqrt();
            for i in 0..j {
                let tmp = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = tmp;
            }
            let d = h[j][j].hypot(h[j + 1][j]);
            if d == 0.0 {
                break;
            }
            cs[j] = h[j][j] / d;
            sn[j] = h[j + 1][j] / d;
            h[j][j] = d;
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            used = j + 1;
            let hn = (0..=j).map(|i| h[i][j]).fold(0.0f64, |s, x| s.max(x.abs()));
            if g[j + 1].abs() < 1e-15 * beta || h[j + 1][j] == 0.0 && hn == 0.0 {
                break;
            }
            let tail = dot(&w, &w).sqrt();
            if j + 1 < m {
                let norm_w = if tail > 0.0 { tail } else { 1.0 };
                v.push(w.iter().map(|x| x / norm_w).collect());
            }
        }
        // back substitution
        let mut y = vec![0.0; used];
        for i in (0..used).rev() {
            let s: f64 = (i + 1..used).map(|k| h[i][k] * y[k]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for (yi, vi) in y.iter().zip(&v) {
            x.iter_mut().zip(vi).for_each(|(x, v)| *x += yi * v);
        }
    }
    (None, history)
}

fn neumann(op: &UlamOperator, b: &[f64], target_l1: f64) -> Option<Vec<f64>> {
    let mut u = b.to_vec();
    let mut term = b.to_vec();
    for _ in 0..NEUMANN_MAX_TERMS {
        term = op.apply_active(&term);
        remove_mean(&mut term);
        u.iter_mut().zip(&term).for_each(|(u, t)| *u += t);
        if l1(&term) < 0.01 * target_l1 {
            remove_mean(&mut u);
            if residual_l1(op, &u, b) < target_l1 {
                return Some(u);
            }
        }
    }
    None
}

const MAGIC: &[u8; 8] = b"ULAMOP01";

fn domain_code(kind: DomainKind) -> u8 {
    match kind {
        DomainKind::Circle => 0,
        DomainKind::Torus2 => 1,
        DomainKind::Cylinder2 => 2,
        DomainKind::SolidTorus3 => 3,
    }
}

fn domain_from_code(code: u8) -> Result<DomainKind> {
    Ok(match code {
        0 => DomainKind::Circle,
        1 => DomainKind::Torus2,
        2 => DomainKind::Cylinder2,
        3 => DomainKind::SolidTorus3,
        _ => return Err(Error::Format(format!("unknown domain code {code}"))),
    })
}

impl UlamOperator {
    /// Binary triplet file: header (mesh, t, sampling, active cells) followed
    /// by little-endian `(u32 row, u32 col, f64 value)` entries in cell indices.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let dom = &self.mesh.domain;
        buf.push(domain_code(dom.kind));
        buf.push(dom.dim() as u8);
        for axis in 0..dom.dim() {
            buf.push(dom.periodic[axis] as u8);
            buf.extend_from_slice(&dom.bounds[axis].0.to_le_bytes());
            buf.extend_from_slice(&dom.bounds[axis].1.to_le_bytes());
            buf.extend_from_slice(&(self.mesh.cells_per_dim[axis] as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.t.to_le_bytes());
        buf.extend_from_slice(&(self.samples_per_cell as u64).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.active.len() as u64).to_le_bytes());
        for &c in &self.active {
            buf.extend_from_slice(&(c as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.nnz() as u64).to_le_bytes());
        for (w, (i, j)) in self.matrix.iter() {
            buf.extend_from_slice(&(self.active[i] as u32).to_le_bytes());
            buf.extend_from_slice(&(self.active[j] as u32).to_le_bytes());
            buf.extend_from_slice(&w.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not an Ulam operator file".into()));
        }
        let kind = domain_from_code(r.u8()?)?;
        let dim = r.u8()? as usize;
        if !(1..=3).contains(&dim) {
            return Err(Error::Format(format!("bad dimension {dim}")));
        }
        let (mut periodic, mut bounds, mut cells) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..dim {
            periodic.push(r.u8()? != 0);
            bounds.push((r.f64()?, r.f64()?));
            cells.push(r.u32()? as usize);
        }
        let mesh = Mesh::new(ModelDomain { kind, periodic, bounds }, &cells)?;
        let t = r.f64()?;
        let samples_per_cell = r.u64()? as usize;
        let seed = r.u64()?;
        let n_active = r.u64()? as usize;
        let mut active = Vec::with_capacity(n_active.min(mesh.n_cells));
        let mut position = vec![u32::MAX; mesh.n_cells];
        for k in 0..n_active {
            let c = r.u32()? as usize;
            if c >= mesh.n_cells || position[c] != u32::MAX {
                return Err(Error::Format(format!("bad active cell {c}")));
            }
            position[c] = k as u32;
            active.push(c);
        }
        let nnz = r.u64()? as usize;
        let mut tri = TriMat::with_capacity((n_active, n_active), nnz.min(bytes.len() / 16));
        for _ in 0..nnz {
            let (i, j, w) = (r.u32()? as usize, r.u32()? as usize, r.f64()?);
            let (pi, pj) = (
                position.get(i).copied().unwrap_or(u32::MAX),
                position.get(j).copied().unwrap_or(u32::MAX),
            );
            if pi == u32::MAX || pj == u32::MAX {
                return Err(Error::Format(format!("entry ({i}, {j}) outside the active cells")));
            }
            tri.add_triplet(pi as usize, pj as usize, w);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(Self {
            mesh,
            matrix: tri.to_csr(),
            active,
            t,
            samples_per_cell,
            seed,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::make_builtin_family;
    use crate::params::Params;
    use crate::Family;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn family(name: &str, kv: &[(&str, f64)]) -> Family {
        let p: Params = kv.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        make_builtin_family(name, &p).unwrap()
    }

    #[derive(Debug)]
    struct Identity(ModelDomain);

    impl MapFamily for Identity {
        fn name(&self) -> &str {
            "identity"
        }
        fn domain(&self) -> &ModelDomain {
            &self.0
        }
        fn unstable_dim(&self) -> usize {
            0
        }
        fn stable_dim(&self) -> usize {
            0
        }
        fn t_range(&self) -> (f64, f64) {
            (0.0, 0.0)
        }
        fn params(&self) -> Params {
            Params::new()
        }
        fn eval(&self, _t: f64, x: &Point) -> Point {
            *x
        }
        fn jac(&self, _t: f64, _x: &Point) -> DMatrix<f64> {
            DMatrix::identity(self.0.dim(), self.0.dim())
        }
        fn dt(&self, _t: f64, _x: &Point) -> Point {
            [0.0; 3]
        }
    }

    fn doubling_two_cells() -> UlamOperator {
        let dbl = family("doubling", &[]);
        let mesh = Mesh::uniform(ModelDomain::circle(), 2).unwrap();
        build_ulam(dbl.as_ref(), 0.0, &mesh, 100, 3).unwrap()
    }

    #[test]
    fn mesh_indexing_round_trips() {
        let mesh = Mesh::new(ModelDomain::solid_torus3(1.0), &[5, 3, 4]).unwrap();
        for c in 0..mesh.n_cells {
            assert_eq!(mesh.flat_index(&mesh.multi_index(c)), c);
            assert_eq!(mesh.locate(&mesh.center(c)), Some(c));
        }
        assert_eq!(mesh.multi_index(1), vec![1, 0, 0]);
        assert!(Mesh::new(ModelDomain::torus2(), &[4]).is_err());
    }

    #[test]
    fn doubling_two_cell_matrix() {
        let op = doubling_two_cells();
        // brute-force oracle: dense grid of 10^4 points per cell
        let mut oracle = [[0.0; 2]; 2];
        for j in 0..2 {
            for k in 0..10_000 {
                let x = (j as f64 + (k as f64 + 0.5) / 1e4) / 2.0;
                let y = (2.0 * x).fract();
                oracle[(y >= 0.5) as usize][j] += 1e-4;
            }
        }
        let m = op.to_dense();
        for i in 0..2 {
            for j in 0..2 {
                assert!((m[i][j] - 0.5).abs() < 0.02, "{m:?}");
                assert!((m[i][j] - oracle[i][j]).abs() < 0.02);
            }
        }
        let srb = srb_ulam(&op, 1e-14, 100).unwrap();
        assert!((srb.weights[0] - m[0][1] / (m[0][1] + m[1][0])).abs() < 1e-12);
        let push = push_lebesgue(&op, 0);
        assert_eq!(push.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn identity_matrix_and_simplicity_warning() {
        let id = Identity(ModelDomain::torus2());
        let mesh = Mesh::uniform(ModelDomain::torus2(), 8).unwrap();
        let op = build_ulam(&id, 0.0, &mesh, 9, 1).unwrap();
        assert_eq!(op.nnz(), 64);
        assert!(op.matrix.iter().all(|(w, (i, j))| i == j && (*w - 1.0).abs() < 1e-12));
        let srb = srb_ulam(&op, 1e-12, 10).unwrap();
        assert!((srb.second_eigenvalue.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(srb.warnings.len(), 1);
    }

    #[test]
    fn cat_translate_preserves_uniform() {
        let cat = family("cat_translate", &[]);
        let mesh = Mesh::uniform(ModelDomain::torus2(), 32).unwrap();
        let spc = 64;
        let op = build_ulam(cat.as_ref(), 0.0, &mesh, spc, 9).unwrap();
        let u = vec![1.0 / mesh.n_cells as f64; mesh.n_cells];
        let lu = op.apply(&u).unwrap();
        assert!(l1_diff(&lu, &u) < 2.0 / (spc as f64).sqrt());
        for s in op.column_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn srb_on_dissipative_cat() {
        let fam = family("cat_dissipative", &[("eps", 0.1)]);
        let mesh = Mesh::uniform(ModelDomain::torus2(), 128).unwrap();
        let op = build_ulam(fam.as_ref(), 0.02, &mesh, 64, 4).unwrap();
        let srb = srb_ulam(&op, 1e-14, 5000).unwrap();
        let total: f64 = srb.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(srb.weights.iter().all(|&w| w >= 0.0));
        assert!(srb.residual < 1e-10, "{}", srb.residual);
        let lambda2 = srb.second_eigenvalue.unwrap();
        assert!(lambda2 < 0.95, "{lambda2}");

        // geometric approach of pushed Lebesgue to the fixed vector
        let dist: Vec<f64> = (1..=20)
            .map(|n| l1_diff(&push_lebesgue(&op, n).weights, &srb.weights))
            .collect();
        let ratio = (dist[19] / dist[0]).powf(1.0 / 19.0);
        assert!(ratio < 1.0, "{dist:?}");

        // time averages agree on smooth observables
        let birk = srb_birkhoff(fam.as_ref(), 0.02, 64, 20_000, 100, 8).unwrap();
        let tests: [fn(&Point) -> f64; 5] = [
            |x| (TAU * x[0]).cos(),
            |x| (TAU * x[0]).sin(),
            |x| (TAU * (x[0] - x[1])).cos(),
            |x| (TAU * x[1]).cos() * (TAU * x[0]).sin(),
            |x| (2.0 * TAU * x[0]).cos() + (TAU * x[1]).sin(),
        ];
        let n = birk.len() as f64;
        for f in tests {
            let ulam: f64 = (0..mesh.n_cells).map(|c| srb.weights[c] * f(&mesh.center(c))).sum();
            let vals: Vec<f64> = birk.support_points.iter().map(f).collect();
            let mean = vals.iter().sum::<f64>() / n;
            // block standard error of the orbit means
            let blocks: Vec<f64> = vals.chunks(20_000).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
            let bm = blocks.iter().sum::<f64>() / blocks.len() as f64;
            let se = (blocks.iter().map(|b| (b - bm).powi(2)).sum::<f64>() / (blocks.len() as f64 - 1.0)).sqrt()
                / (blocks.len() as f64).sqrt();
            assert!((ulam - mean).abs() < (5e-3f64).max(3.0 * se), "{ulam} vs {mean} ± {se}");
        }
    }

    #[test]
    fn birkhoff_examples() {
        let skew = family("skew_atomic", &[("lambda", 0.5), ("c", 0.25)]);
        let m = srb_birkhoff(skew.as_ref(), 0.0, 4, 50, 60, 1).unwrap();
        for p in &m.support_points {
            assert!((p[1] - 0.5).abs() < 0.5f64.powi(55));
        }
        let one = srb_birkhoff(skew.as_ref(), 0.0, 1, 1, 0, 1).unwrap();
        assert_eq!(one.weights, vec![1.0]);

        let cat = family("cat_translate", &[]);
        let (n_orbits, n_steps) = (20, 5000);
        let m = srb_birkhoff(cat.as_ref(), 0.0, n_orbits, n_steps, 10, 2).unwrap();
        let mesh = Mesh::uniform(ModelDomain::torus2(), 4).unwrap();
        let bound = 3.0 / ((n_orbits * n_steps) as f64).sqrt();
        for w in m.cell_masses(&mesh).unwrap() {
            assert!((w - mesh.cell_volume).abs() < bound, "{w}");
        }
    }

    #[test]
    fn resolvent_examples() {
        let op = doubling_two_cells();
        assert_eq!(resolvent_apply(&op, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let m = op.to_dense();
        let u = resolvent_apply(&op, &[0.5, -0.5]).unwrap();
        // direct 2x2 solve on the mean-zero line: (1 - (m00 - m01)) u0 = 0.5
        let direct = 0.5 / (1.0 - (m[0][0] - m[0][1]));
        assert!((u[0] - direct).abs() < 1e-12 && (u[1] + direct).abs() < 1e-12, "{u:?}");
        match resolvent_apply(&op, &[1.0, 1.0]) {
            Err(Error::Precondition(msg)) => assert!(msg.contains("mean 1e0"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resolvent_matches_series_on_cat() {
        let fam = family("cat_dissipative", &[]);
        let mesh = Mesh::uniform(ModelDomain::torus2(), 64).unwrap();
        let op = build_ulam(fam.as_ref(), 0.0, &mesh, 32, 4).unwrap();
        let mut rhs: Vec<f64> = (0..mesh.n_cells).map(|c| (TAU * mesh.center(c)[0]).cos() + 0.3).collect();
        remove_mean(&mut rhs);
        let u = resolvent_apply(&op, &rhs).unwrap();
        assert!(u.iter().sum::<f64>().abs() < 1e-12);
        let lu = op.apply(&u).unwrap();
        let res: f64 = u.iter().zip(&lu).zip(&rhs).map(|((u, l), b)| (u - l - b).abs()).sum();
        assert!(res < 1e-10 * l1(&rhs));
        let series = neumann(&op, &op.to_active(&rhs), 1e-10 * l1(&rhs)).unwrap();
        assert!(l1_diff(&series, &u) < 1e-8 * l1(&u));
    }

    #[test]
    fn solenoid_prunes_unreachable_cells() {
        let sol = family("solenoid", &[]);
        let mesh = Mesh::new(sol.domain().clone(), &[32, 16, 16]).unwrap();
        let op = build_ulam(sol.as_ref(), 0.0, &mesh, 16, 1).unwrap();
        assert!(op.n_active() < mesh.n_cells / 2, "{}", op.n_active());
        for s in op.column_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let srb = srb_ulam(&op, 1e-12, 5000).unwrap();
        assert!((srb.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sol = family("solenoid", &[]);
        let mesh = Mesh::new(sol.domain().clone(), &[16, 8, 8]).unwrap();
        let op = build_ulam(sol.as_ref(), 0.01, &mesh, 8, 5).unwrap();
        let path = dir.path().join("op.bin");
        op.write_binary(&path).unwrap();
        let back = UlamOperator::read_binary(&path).unwrap();
        assert_eq!(back.mesh, op.mesh);
        assert_eq!(back.active, op.active);
        assert_eq!(back.t, op.t);
        assert_eq!(back.matrix, op.matrix);

        std::fs::write(&path, b"ULAMOP01\x07").unwrap();
        assert!(matches!(UlamOperator::read_binary(&path), Err(Error::Format(_))));

        let srb = srb_ulam(&op, 1e-12, 5000).unwrap();
        let csv = dir.path().join("m.csv");
        srb.write_csv(&mesh, &csv).unwrap();
        let w = read_cell_csv(&mesh, &csv).unwrap();
        assert_eq!(w, srb.weights);
    }

    #[test]
    fn build_is_deterministic() {
        let fam = family("cat_dissipative", &[]);
        let mesh = Mesh::uniform(ModelDomain::torus2(), 16).unwrap();
        let a = build_ulam(fam.as_ref(), 0.01, &mesh, 10, 7).unwrap();
        let b = build_ulam(fam.as_ref(), 0.01, &mesh, 10, 7).unwrap();
        assert_eq!(a.matrix, b.matrix);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn operators_are_column_stochastic(
            which in 0usize..4,
            n in 3usize..24,
            spc in 1usize..40,
            seed in 0u64..1000,
            t in -0.05f64..0.05,
        ) {
            let (name, cells) = [
                ("doubling", vec![n * 8]),
                ("cat_translate", vec![n, n]),
                ("cat_dissipative", vec![n, n + 1]),
                ("skew_atomic", vec![n, n]),
            ][which].clone();
            let fam = family(name, &[]);
            let mesh = Mesh::new(fam.domain().clone(), &cells).unwrap();
            let op = build_ulam(fam.as_ref(), t, &mesh, spc, seed).unwrap();
            prop_assert!(op.matrix.data().iter().all(|&w| (0.0..=1.0 + 1e-15).contains(&w)));
            for s in op.column_sums() {
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            // all-ones left vector is fixed
            let ones = vec![1.0; mesh.n_cells];
            let v: Vec<f64> = (0..mesh.n_cells).map(|c| (c % 7) as f64).collect();
            let lv = op.apply(&v).unwrap();
            let lhs: f64 = lv.iter().zip(&ones).map(|(a, b)| a * b).sum::<f64>();
            let rhs: f64 = op.to_cells(&op.to_active(&v)).iter().sum();
            prop_assert!((lhs - rhs).abs() < 1e-9 * rhs.max(1.0));
        }
    }
}
