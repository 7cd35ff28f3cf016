//! Smooth and Heaviside observables, mollification, the transversality
//! (cone) check and integration against measures.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{MapFamily, ModelDomain, Point};
use crate::error::{Error, Result};
use crate::params::{read_with_schema, ParamSpec, Params};
use crate::transfer::{MeasureKind, Mesh, SrbMeasure};

pub type ScalarFn = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&Point) -> Point + Send + Sync>;

/// `Θ(v) = 1` for `v > 0`, else `0`.
pub fn step(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableKind {
    Smooth,
    Heaviside,
}

/// Region outside which `h` vanishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SupportHint {
    Ball { center: Point, radius: f64 },
}

#[derive(Clone)]
pub struct Observable {
    kind: ObservableKind,
    h: ScalarFn,
    grad_h: Option<VectorFn>,
    g: Option<ScalarFn>,
    grad_g: Option<VectorFn>,
    a: f64,
    pub support: Option<SupportHint>,
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observable")
            .field("kind", &self.kind)
            .field("a", &self.a)
            .field("support", &self.support)
            .finish_non_exhaustive()
    }
}

impl Observable {
    pub fn smooth(h: ScalarFn, grad: Option<VectorFn>) -> Self {
        Self {
            kind: ObservableKind::Smooth,
            h,
            grad_h: grad,
            g: None,
            grad_g: None,
            a: 0.0,
            support: None,
        }
    }

    pub fn with_support(mut self, support: SupportHint) -> Self {
        self.support = Some(support);
        self
    }

    pub fn kind(&self) -> ObservableKind {
        self.kind
    }

    pub fn eval(&self, x: &Point) -> f64 {
        match self.kind {
            ObservableKind::Smooth => (self.h)(x),
            ObservableKind::Heaviside => {
                let g = self.g.as_ref().expect("heaviside observable has g");
                if g(x) > self.a {
                    (self.h)(x)
                } else {
                    0.0
                }
            }
        }
    }

    /// Gradient of a smooth observable, when known.
    pub fn grad(&self, x: &Point) -> Option<Point> {
        match self.kind {
            ObservableKind::Smooth => self.grad_h.as_ref().map(|f| f(x)),
            ObservableKind::Heaviside => None,
        }
    }

    pub fn has_grad(&self) -> bool {
        self.kind == ObservableKind::Smooth && self.grad_h.is_some()
    }

    pub fn h(&self, x: &Point) -> f64 {
        (self.h)(x)
    }

    pub fn g(&self, x: &Point) -> Option<f64> {
        self.g.as_ref().map(|g| g(x))
    }

    pub fn grad_g(&self, x: &Point) -> Option<Point> {
        self.grad_g.as_ref().map(|f| f(x))
    }

    pub fn threshold(&self) -> f64 {
        self.a
    }

    /// The same `h` and `g` with another threshold.
    pub fn with_threshold(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.a = a;
        out
    }

    /// Values at the cell centers.
    pub fn on_mesh(&self, mesh: &Mesh) -> Vec<f64> {
        (0..mesh.n_cells).into_par_iter().map(|c| self.eval(&mesh.center(c))).collect()
    }
}

/// `h · Θ(g - a)`.
pub fn make_heaviside(h: ScalarFn, g: ScalarFn, grad_g: VectorFn, a: f64) -> Observable {
    Observable {
        kind: ObservableKind::Heaviside,
        h,
        grad_h: None,
        g: Some(g),
        grad_g: Some(grad_g),
        a,
        support: None,
    }
}

/// Values on a mesh, for norms and for integration against Ulam measures.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub mesh: Mesh,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(mesh: Mesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_cells {
            return Err(Error::DimensionMismatch {
                expected: mesh.n_cells,
                found: values.len(),
            });
        }
        Ok(Self { mesh, values })
    }

    pub fn sample(obs: &Observable, mesh: &Mesh) -> Self {
        Self {
            values: obs.on_mesh(mesh),
            mesh: mesh.clone(),
        }
    }

    /// Smooth observable interpolating the grid values multilinearly between
    /// cell centers; its gradient interpolates central differences the same
    /// way. Fully periodic meshes only.
    pub fn to_observable(&self) -> Result<Observable> {
        if !self.mesh.domain.is_fully_periodic() {
            return Err(Error::Unsupported("grid interpolation needs a fully periodic mesh".into()));
        }
        let d = self.mesh.dim();
        let grads: Vec<GridFunction> = (0..d).map(|axis| self.central_difference(axis)).collect();
        let values = Arc::new(self.clone());
        let grads = Arc::new(grads);
        Ok(Observable::smooth(
            Arc::new(move |x| values.interpolate(x)),
            Some(Arc::new(move |x| {
                let mut g = [0.0; 3];
                for (axis, f) in grads.iter().enumerate() {
                    g[axis] = f.interpolate(x);
                }
                g
            })),
        ))
    }

    /// Periodic central difference along `axis`.
    pub fn central_difference(&self, axis: usize) -> GridFunction {
        let m = &self.mesh;
        let n = m.cells_per_dim[axis];
        let h = m.cell_width(axis);
        let values = (0..m.n_cells)
            .map(|c| {
                let mut idx = m.multi_index(c);
                let i = idx[axis];
                idx[axis] = (i + 1) % n;
                let up = self.values[m.flat_index(&idx)];
                idx[axis] = (i + n - 1) % n;
                let down = self.values[m.flat_index(&idx)];
                (up - down) / (2.0 * h)
            })
            .collect();
        GridFunction {
            mesh: m.clone(),
            values,
        }
    }

    /// Multilinear interpolation through cell centers.
    pub fn interpolate(&self, x: &Point) -> f64 {
        let m = &self.mesh;
        let d = m.dim();
        let x = m.domain.wrap(*x);
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for axis in 0..d {
            let s = (x[axis] - m.domain.bounds[axis].0) / m.cell_width(axis) - 0.5;
            let fl = s.floor();
            base[axis] = (fl as i64).rem_euclid(m.cells_per_dim[axis] as i64) as usize;
            frac[axis] = s - fl;
        }
        let mut value = 0.0;
        let mut idx = vec![0usize; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for axis in 0..d {
                let up = corner >> axis & 1 == 1;
                idx[axis] = (base[axis] + up as usize) % m.cells_per_dim[axis];
                w *= if up { frac[axis] } else { 1.0 - frac[axis] };
            }
            value += w * self.values[m.flat_index(&idx)];
        }
        value
    }
}

// ---------------------------------------------------------------- built-ins

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BuiltinObservable {
    Bump,
    BumpHeaviside,
    CoordinateThreshold,
    QuadraticMax,
    Trig,
}

impl BuiltinObservable {
    pub const ALL: [BuiltinObservable; 5] = [
        BuiltinObservable::Bump,
        BuiltinObservable::BumpHeaviside,
        BuiltinObservable::CoordinateThreshold,
        BuiltinObservable::QuadraticMax,
        BuiltinObservable::Trig,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinObservable::Bump => "bump",
            BuiltinObservable::BumpHeaviside => "bump_heaviside",
            BuiltinObservable::CoordinateThreshold => "coordinate_threshold",
            BuiltinObservable::QuadraticMax => "quadratic_max",
            BuiltinObservable::Trig => "trig",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|b| b.name() == name).ok_or_else(|| Error::Unknown {
            what: "observable",
            name: name.into(),
        })
    }

    pub fn description(self) -> &'static str {
        match self {
            BuiltinObservable::Bump => "smooth bump h(x) = exp(1 - 1/(1 - |x-c|^2/radius^2)), peak 1",
            BuiltinObservable::BumpHeaviside => "bump h times step of g(x) = <n, x - c> above a",
            BuiltinObservable::CoordinateThreshold => {
                "(1 + h_slope * x[h_axis]) times step of x[axis] above a, optionally cut to |x[window_axis] - window_center| <= window_width"
            }
            BuiltinObservable::QuadraticMax => "step of g(x) = -|x - c|^2 above a (max of g is 0, use a < 0)",
            BuiltinObservable::Trig => "amp * sin(2 pi <k, x> + phase)",
        }
    }

    pub fn schema(self) -> &'static [ParamSpec] {
        const CENTER: [ParamSpec; 3] = [
            ParamSpec { name: "cx", default: 0.5, help: "center, first coordinate" },
            ParamSpec { name: "cy", default: 0.5, help: "center, second coordinate" },
            ParamSpec { name: "cz", default: 0.0, help: "center, third coordinate" },
        ];
        match self {
            BuiltinObservable::Bump => &[
                CENTER[0],
                CENTER[1],
                CENTER[2],
                ParamSpec { name: "radius", default: 0.25, help: "support radius" },
            ],
            BuiltinObservable::BumpHeaviside => &[
                CENTER[0],
                CENTER[1],
                CENTER[2],
                ParamSpec { name: "radius", default: 0.25, help: "support radius of h" },
                ParamSpec { name: "nx", default: 1.0, help: "normal of the level set (normalized)" },
                ParamSpec { name: "ny", default: 0.0, help: "normal, second component" },
                ParamSpec { name: "nz", default: 0.0, help: "normal, third component" },
                ParamSpec { name: "a", default: 0.0, help: "threshold" },
            ],
            BuiltinObservable::CoordinateThreshold => &[
                ParamSpec { name: "axis", default: 0.0, help: "coordinate compared with a" },
                ParamSpec { name: "a", default: 0.5, help: "threshold" },
                ParamSpec { name: "h_axis", default: 0.0, help: "coordinate entering the weight h" },
                ParamSpec { name: "h_slope", default: 0.0, help: "slope of the weight h" },
                ParamSpec { name: "window_axis", default: 0.0, help: "coordinate restricted by the window" },
                ParamSpec { name: "window_center", default: 0.0, help: "center of the window" },
                ParamSpec { name: "window_width", default: 0.0, help: "half-width of the window, 0 for none" },
            ],
            BuiltinObservable::QuadraticMax => &[
                CENTER[0],
                CENTER[1],
                CENTER[2],
                ParamSpec { name: "a", default: -0.01, help: "threshold (< 0)" },
            ],
            BuiltinObservable::Trig => &[
                ParamSpec { name: "amp", default: 1.0, help: "amplitude" },
                ParamSpec { name: "k1", default: 1.0, help: "integer frequency, first coordinate" },
                ParamSpec { name: "k2", default: 0.0, help: "integer frequency, second coordinate" },
                ParamSpec { name: "k3", default: 0.0, help: "integer frequency, third coordinate" },
                ParamSpec { name: "phase", default: 0.0, help: "phase" },
            ],
        }
    }
}

fn axis_param(v: f64, dim: usize, name: &str) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || v as usize >= dim {
        return Err(Error::invalid(name, format!("must be an axis index below {dim}")));
    }
    Ok(v as usize)
}

/// Bump `exp(1 - 1/(1 - s))`, `s = |d|^2 / r^2`, and its gradient in `d`.
fn bump_profile(d: &Point, radius: f64) -> (f64, Point) {
    let s = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (radius * radius);
    if s >= 1.0 {
        return (0.0, [0.0; 3]);
    }
    let v = (1.0 - 1.0 / (1.0 - s)).exp();
    let ds = -v / ((1.0 - s) * (1.0 - s));
    let k = 2.0 * ds / (radius * radius);
    (v, [k * d[0], k * d[1], k * d[2]])
}

pub fn make_builtin_observable(name: &str, params: &Params, domain: &ModelDomain) -> Result<Observable> {
    let kind = BuiltinObservable::from_name(name)?;
    let p = read_with_schema(kind.schema(), params)?;
    let dim = domain.dim();
    let dom = Arc::new(domain.clone());
    let center = [p.get("cx").copied().unwrap_or(0.0), p.get("cy").copied().unwrap_or(0.0), p.get("cz").copied().unwrap_or(0.0)];
    let center = {
        let mut c = center;
        c.iter_mut().skip(dim).for_each(|v| *v = 0.0);
        c
    };
    let disp = {
        let dom = dom.clone();
        move |x: &Point| dom.displacement(&center, x)
    };
    Ok(match kind {
        BuiltinObservable::Trig => {
            let amp = p["amp"];
            let k = [p["k1"], p["k2"], p["k3"]];
            if k.iter().any(|v| v.fract() != 0.0) {
                return Err(Error::invalid("k", "frequencies must be integers"));
            }
            let scale: Vec<f64> = (0..dim).map(|i| TAU / domain.width(i)).collect();
            let phase = p["phase"];
            let arg = {
                let scale = scale.clone();
                move |x: &Point| phase + (0..dim).map(|i| k[i] * scale[i] * x[i]).sum::<f64>()
            };
            let arg2 = arg.clone();
            Observable::smooth(
                Arc::new(move |x| amp * arg(x).sin()),
                Some(Arc::new(move |x| {
                    let c = amp * arg2(x).cos();
                    let mut g = [0.0; 3];
                    for i in 0..dim {
                        g[i] = c * k[i] * scale[i];
                    }
                    g
                })),
            )
        }
        BuiltinObservable::Bump => {
            let radius = p["radius"];
            if !(radius > 0.0) {
                return Err(Error::invalid("radius", "must be > 0"));
            }
            let d2 = disp.clone();
            Observable::smooth(
                Arc::new(move |x| bump_profile(&disp(x), radius).0),
                Some(Arc::new(move |x| bump_profile(&d2(x), radius).1)),
            )
            .with_support(SupportHint::Ball { center, radius })
        }
        BuiltinObservable::BumpHeaviside => {
            let radius = p["radius"];
            if !(radius > 0.0) {
                return Err(Error::invalid("radius", "must be > 0"));
            }
            let mut n = [p["nx"], p["ny"], p["nz"]];
            n.iter_mut().skip(dim).for_each(|v| *v = 0.0);
            let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            if len == 0.0 {
                return Err(Error::invalid("nx", "normal must be nonzero"));
            }
            n.iter_mut().for_each(|v| *v /= len);
            let d2 = disp.clone();
            make_heaviside(
                Arc::new(move |x| bump_profile(&disp(x), radius).0),
                Arc::new(move |x| {
                    let d = d2(x);
                    n[0] * d[0] + n[1] * d[1] + n[2] * d[2]
                }),
                Arc::new(move |_| n),
                p["a"],
            )
            .with_support(SupportHint::Ball { center, radius })
        }
        BuiltinObservable::CoordinateThreshold => {
            let axis = axis_param(p["axis"], dim, "axis")?;
            let h_axis = axis_param(p["h_axis"], dim, "h_axis")?;
            let slope = p["h_slope"];
            let w_axis = axis_param(p["window_axis"], dim, "window_axis")?;
            let (w_center, w_width) = (p["window_center"], p["window_width"]);
            if !(w_width >= 0.0) {
                return Err(Error::invalid("window_width", "must be >= 0"));
            }
            let period = domain.periodic[w_axis].then(|| domain.width(w_axis));
            let inside = move |x: &Point| {
                if w_width == 0.0 {
                    return true;
                }
                let mut d = x[w_axis] - w_center;
                if let Some(l) = period {
                    d -= l * (d / l).round();
                }
                d.abs() <= w_width
            };
            let mut e = [0.0; 3];
            e[axis] = 1.0;
            make_heaviside(
                Arc::new(move |x| if inside(x) { 1.0 + slope * x[h_axis] } else { 0.0 }),
                Arc::new(move |x| x[axis]),
                Arc::new(move |_| e),
                p["a"],
            )
        }
        BuiltinObservable::QuadraticMax => {
            let d2 = disp.clone();
            make_heaviside(
                Arc::new(|_| 1.0),
                Arc::new(move |x| {
                    let d = disp(x);
                    -(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
                }),
                Arc::new(move |x| {
                    let d = d2(x);
                    [-2.0 * d[0], -2.0 * d[1], -2.0 * d[2]]
                }),
                p["a"],
            )
        }
    })
}

// -------------------------------------------------------------- mollifier

/// Quadrature nodes per axis. An even count keeps every node off the center,
/// so a jump through the evaluation point is split symmetrically.
pub const STENCIL_NODES: usize = 16;

fn stencil() -> ([f64; STENCIL_NODES], [f64; STENCIL_NODES]) {
    let mut nodes = [0.0; STENCIL_NODES];
    let mut weights = [0.0; STENCIL_NODES];
    for k in 0..STENCIL_NODES {
        let v = -1.0 + (2.0 * k as f64 + 1.0) / STENCIL_NODES as f64;
        nodes[k] = v;
        weights[k] = (-1.0 / (1.0 - v * v)).exp();
    }
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    (nodes, weights)
}

#[derive(Clone, Debug)]
pub struct Mollified {
    pub grid: GridFunction,
    pub eps: f64,
    /// Set when the kernel reached past a bounded side and was reflected.
    pub reflected: bool,
    pub warnings: Vec<String>,
}

fn check_eps(eps: f64, domain: &ModelDomain) -> Result<()> {
    let min_width = (0..domain.dim()).map(|i| domain.width(i)).fold(f64::INFINITY, f64::min);
    if !(eps > 0.0 && eps < min_width / 4.0) {
        return Err(Error::invalid("eps", format!("must lie in (0, {})", min_width / 4.0)));
    }
    Ok(())
}

/// Reflects bounded coordinates back into the domain; reports whether it had to.
fn reflect(domain: &ModelDomain, x: &mut Point) -> bool {
    let mut hit = false;
    for axis in 0..domain.dim() {
        if domain.periodic[axis] {
            continue;
        }
        let (lo, hi) = domain.bounds[axis];
        if x[axis] < lo {
            x[axis] = 2.0 * lo - x[axis];
            hit = true;
        } else if x[axis] > hi {
            x[axis] = 2.0 * hi - x[axis];
            hit = true;
        }
    }
    hit
}

/// `(θ * η_ε)(x)` by the tensor stencil; second value tells whether reflection
/// was needed.
pub fn mollify_at(obs: &Observable, eps: f64, domain: &ModelDomain, x: &Point) -> (f64, bool) {
    let (nodes, weights) = stencil();
    let d = domain.dim();
    let n = STENCIL_NODES;
    let total = n.pow(d as u32);
    let mut acc = 0.0;
    let mut reflected = false;
    for flat in 0..total {
        let mut y = *x;
        let mut w = 1.0;
        let mut r = flat;
        for axis in 0..d {
            let k = r % n;
            r /= n;
            y[axis] -= eps * nodes[k];
            w *= weights[k];
        }
        reflected |= reflect(domain, &mut y);
        acc += w * obs.eval(&domain.wrap(y));
    }
    (acc, reflected)
}

/// Mollified observable at every cell center.
pub fn mollify(obs: &Observable, eps: f64, mesh: &Mesh) -> Result<Mollified> {
    check_eps(eps, &mesh.domain)?;
    let vals: Vec<(f64, bool)> = (0..mesh.n_cells)
        .into_par_iter()
        .map(|c| mollify_at(obs, eps, &mesh.domain, &mesh.center(c)))
        .collect();
    let reflected = vals.iter().any(|v| v.1);
    let mut warnings = Vec::new();
    if reflected {
        warnings.push("kernel reached a bounded side; values there use reflected padding".to_string());
    }
    Ok(Mollified {
        grid: GridFunction {
            mesh: mesh.clone(),
            values: vals.into_iter().map(|v| v.0).collect(),
        },
        eps,
        reflected,
        warnings,
    })
}

// ---------------------------------------------------------- transversality

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Transversal,
    Tangent,
    Mixed,
    Vacuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransversalityReport {
    pub n_samples: usize,
    pub fraction_transversal: f64,
    /// Smallest `aperture - angle(∇g, unstable covectors)` over samples (radians).
    pub min_cone_margin: f64,
    pub critical_value_flag: bool,
    pub verdict: Verdict,
    /// Largest angle between covector estimates from two random starts.
    pub alignment_defect: f64,
}

const ALIGN_STEPS: usize = 30;
const CRITICAL_GRAD: f64 = 1e-8;

/// Orthonormal basis (columns) of the covectors at `x` that grow under
/// pullback by `Df^m`, i.e. those annihilating the stable directions.
pub fn unstable_covectors(family: &dyn MapFamily, t: f64, x: &Point, m: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let d = family.dim();
    let du = family.unstable_dim().max(1);
    let mut pts = Vec::with_capacity(m);
    let mut y = *x;
    for _ in 0..m {
        pts.push(y);
        y = family.eval(t, &y);
    }
    let mut w = DMatrix::from_fn(d, du, |_, _| rng.gen_range(-1.0..1.0)).qr().q();
    for p in pts.iter().rev() {
        w = (family.jac(t, p).transpose() * w).qr().q();
    }
    w
}

fn angle_to_span(v: &[f64], basis: &DMatrix<f64>) -> f64 {
    let mut perp = v.to_vec();
    let mut proj2 = 0.0;
    for c in 0..basis.ncols() {
        let p: f64 = (0..v.len()).map(|i| basis[(i, c)] * v[i]).sum();
        proj2 += p * p;
        for (i, x) in perp.iter_mut().enumerate() {
            *x -= p * basis[(i, c)];
        }
    }
    let perp = perp.iter().map(|x| x * x).sum::<f64>().sqrt();
    perp.atan2(proj2.sqrt())
}

fn span_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|c| angle_to_span(a.column(c).as_slice(), b))
        .fold(0.0, f64::max)
}

/// A point of `{g = a} ∩ supp h` found by bisection along a random segment.
fn sample_level_point(obs: &Observable, domain: &ModelDomain, rng: &mut ChaCha8Rng) -> Option<Point> {
    let d = domain.dim();
    let (base, len) = match &obs.support {
        Some(SupportHint::Ball { center, radius }) => {
            let mut p = *center;
            for v in p.iter_mut().take(d) {
                *v += rng.gen_range(-*radius..*radius);
            }
            (domain.wrap(p), *radius)
        }
        None => {
            let w = (0..d).map(|i| domain.width(i)).fold(f64::INFINITY, f64::min);
            (domain.random_point(rng), 0.25 * w)
        }
    };
    let mut dir = [0.0; 3];
    for v in dir.iter_mut().take(d) {
        *v = rng.gen_range(-1.0..1.0);
    }
    let at = |s: f64| {
        let mut p = base;
        for i in 0..d {
            p[i] += s * len * dir[i];
        }
        p
    };
    let phi = |s: f64| obs.g(&at(s)).unwrap() - obs.threshold();
    let (mut lo, mut hi) = (-1.0, 1.0);
    let (flo, fhi) = (phi(lo), phi(hi));
    if !(flo.is_finite() && fhi.is_finite()) || flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if phi(mid).signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = at(0.5 * (lo + hi));
    if !domain.contains(&domain.wrap(p)) {
        return None;
    }
    let p = domain.wrap(p);
    (obs.h(&p) != 0.0).then_some(p)
}

/// Samples the singular set `{g = a} ∩ supp h` and tests whether `∇g` lies in
/// the unstable cone of half-aperture `cone_aperture` (radians).
pub fn transversality_check(
    obs: &Observable,
    family: &dyn MapFamily,
    t: f64,
    n_samples: usize,
    cone_aperture: f64,
    seed: u64,
) -> Result<TransversalityReport> {
    if obs.kind() != ObservableKind::Heaviside {
        return Err(Error::Precondition("transversality needs a Heaviside observable".into()));
    }
    if !(cone_aperture > 0.0 && cone_aperture < std::f64::consts::FRAC_PI_2) {
        return Err(Error::invalid("cone_aperture", "must lie in (0, pi/2)"));
    }
    let domain = family.domain();
    let results: Vec<Option<(f64, bool, f64)>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let p = (0..50).find_map(|_| sample_level_point(obs, domain, &mut rng))?;
            let grad = obs.grad_g(&p).unwrap();
            let gn = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            let critical = gn < CRITICAL_GRAD;
            let cov = unstable_covectors(family, t, &p, ALIGN_STEPS, &mut rng);
            let cov2 = unstable_covectors(family, t, &p, ALIGN_STEPS, &mut rng);
            let defect = span_distance(&cov, &cov2);
            let margin = if critical {
                -f64::INFINITY
            } else {
                cone_aperture - angle_to_span(&grad[..family.dim()], &cov)
            };
            Some((margin, critical, defect))
        })
        .collect();
    let found: Vec<(f64, bool, f64)> = results.into_iter().flatten().collect();
    if found.is_empty() {
        return Ok(TransversalityReport {
            n_samples: 0,
            fraction_transversal: 0.0,
            min_cone_margin: f64::NAN,
            critical_value_flag: false,
            verdict: Verdict::Vacuous,
            alignment_defect: 0.0,
        });
    }
    let n = found.len();
    let good = found.iter().filter(|(m, c, _)| !c && *m >= 0.0).count();
    let critical = found.iter().any(|f| f.1);
    let fraction = good as f64 / n as f64;
    let verdict = if good == n && !critical {
        Verdict::Transversal
    } else if good == 0 {
        Verdict::Tangent
    } else {
        Verdict::Mixed
    };
    Ok(TransversalityReport {
        n_samples: n,
        fraction_transversal: fraction,
        min_cone_margin: found.iter().map(|f| f.0).fold(f64::INFINITY, f64::min),
        critical_value_flag: critical,
        verdict,
        alignment_defect: found.iter().map(|f| f.2).fold(0.0, f64::max),
    })
}

// ------------------------------------------------------------- integration

pub fn integrate(measure: &SrbMeasure, obs: &Observable) -> Result<f64> {
    match measure.kind {
        MeasureKind::UlamVector => {
            let mesh = measure
                .mesh
                .as_ref()
                .ok_or_else(|| Error::Precondition("Ulam measure without a mesh".into()))?;
            if mesh.n_cells != measure.weights.len() {
                return Err(Error::DimensionMismatch {
                    expected: mesh.n_cells,
                    found: measure.weights.len(),
                });
            }
            Ok(measure
                .weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(c, &w)| w * obs.eval(&mesh.center(c)))
                .sum())
        }
        MeasureKind::Empirical => Ok(measure
            .support_points
            .par_iter()
            .zip(&measure.weights)
            .map(|(p, w)| w * obs.eval(p))
            .sum()),
    }
}

/// Pairing of an Ulam measure with a grid function on the same mesh.
pub fn integrate_grid(measure: &SrbMeasure, f: &GridFunction) -> Result<f64> {
    if measure.kind == MeasureKind::Empirical {
        let masses = measure.cell_masses(&f.mesh)?;
        return Ok(masses.iter().zip(&f.values).map(|(w, v)| w * v).sum());
    }
    if measure.weights.len() != f.values.len() {
        return Err(Error::DimensionMismatch {
            expected: measure.weights.len(),
            found: f.values.len(),
        });
    }
    Ok(measure.weights.iter().zip(&f.values).map(|(w, v)| w * v).sum())
}
