//! Model map families on flat domains.
//!
//! Every family is a map `t -> f_t` on one of four flat model domains (circle,
//! 2-torus, cylinder, solid torus). Points are stored as `[f64; 3]`; entries
//! past the domain dimension are ignored and kept at zero.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{read_with_schema, ParamSpec, Params};

pub type Point = [f64; 3];

/// Default half-width of the parameter interval for every built-in.
pub const DEFAULT_EPS0: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Circle,
    Torus2,
    Cylinder2,
    SolidTorus3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDomain {
    pub kind: DomainKind,
    pub periodic: Vec<bool>,
    pub bounds: Vec<(f64, f64)>,
}

impl ModelDomain {
    pub fn circle() -> Self {
        Self {
            kind: DomainKind::Circle,
            periodic: vec![true],
            bounds: vec![(0.0, 1.0)],
        }
    }

    pub fn torus2() -> Self {
        Self {
            kind: DomainKind::Torus2,
            periodic: vec![true, true],
            bounds: vec![(0.0, 1.0), (0.0, 1.0)],
        }
    }

    /// Circle in the first coordinate times the interval `[lo, hi]`.
    pub fn cylinder2(lo: f64, hi: f64) -> Self {
        Self {
            kind: DomainKind::Cylinder2,
            periodic: vec![true, false],
            bounds: vec![(0.0, 1.0), (lo, hi)],
        }
    }

    /// Angle in `[0, 2pi)` times the square cross-section `[-radius, radius]^2`.
    pub fn solid_torus3(radius: f64) -> Self {
        Self {
            kind: DomainKind::SolidTorus3,
            periodic: vec![true, false, false],
            bounds: vec![(0.0, TAU), (-radius, radius), (-radius, radius)],
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_fully_periodic(&self) -> bool {
        self.periodic.iter().all(|&p| p)
    }

    pub fn width(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        hi - lo
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }

    /// Maps periodic coordinates into `[lo, hi)`. Bounded coordinates are untouched.
    pub fn wrap(&self, mut x: Point) -> Point {
        for (i, (&periodic, &(lo, hi))) in self.periodic.iter().zip(&self.bounds).enumerate() {
            if periodic {
                let p = hi - lo;
                let mut y = lo + (x[i] - lo).rem_euclid(p);
                if y >= hi {
                    y = lo;
                }
                x[i] = y;
            }
        }
        x
    }

    pub fn contains(&self, x: &Point) -> bool {
        self.bounds
            .iter()
            .enumerate()
            .all(|(i, &(lo, hi))| x[i] >= lo && x[i] <= hi)
    }

    /// `to - from`, using the minimal image along periodic axes.
    pub fn displacement(&self, from: &Point, to: &Point) -> Point {
        let mut d = [0.0; 3];
        for i in 0..self.dim() {
            let mut v = to[i] - from[i];
            if self.periodic[i] {
                let p = self.width(i);
                v -= p * (v / p).round();
            }
            d[i] = v;
        }
        d
    }

    pub fn random_point<R: Rng>(&self, rng: &mut R) -> Point {
        let mut x = [0.0; 3];
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            x[i] = rng.gen_range(lo..hi);
        }
        x
    }
}

/// A parametrized family `t -> f_t` together with its derivatives.
pub trait MapFamily: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn domain(&self) -> &ModelDomain;
    fn unstable_dim(&self) -> usize;
    fn stable_dim(&self) -> usize;
    fn t_range(&self) -> (f64, f64);
    /// Resolved parameter values, including defaults.
    fn params(&self) -> Params;

    /// `f_t(x)`, wrapped into the domain.
    fn eval(&self, t: f64, x: &Point) -> Point;
    fn jac(&self, t: f64, x: &Point) -> DMatrix<f64>;
    fn det_jac(&self, t: f64, x: &Point) -> f64 {
        self.jac(t, x).determinant()
    }
    /// `d/dt f_t(x)`.
    fn dt(&self, t: f64, x: &Point) -> Point;
    /// Spatial Jacobian of `dt`, when known in closed form.
    fn dt_jac(&self, _t: f64, _x: &Point) -> Option<DMatrix<f64>> {
        None
    }
    fn dt_is_constant(&self) -> bool {
        false
    }
    fn is_invertible(&self) -> bool {
        false
    }
    fn inverse(&self, _t: f64, _x: &Point) -> Option<Point> {
        None
    }
    /// All preimages of `x`, when the family can enumerate them.
    fn preimages(&self, t: f64, x: &Point) -> Option<Vec<Point>> {
        self.inverse(t, x).map(|y| vec![y])
    }

    fn dim(&self) -> usize {
        self.domain().dim()
    }
}

pub type Family = Arc<dyn MapFamily>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinFamily {
    Doubling,
    CatTranslate,
    CatDissipative,
    Solenoid,
    SkewAtomic,
}

impl BuiltinFamily {
    pub const ALL: [BuiltinFamily; 5] = [
        BuiltinFamily::CatDissipative,
        BuiltinFamily::CatTranslate,
        BuiltinFamily::Doubling,
        BuiltinFamily::SkewAtomic,
        BuiltinFamily::Solenoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinFamily::Doubling => "doubling",
            BuiltinFamily::CatTranslate => "cat_translate",
            BuiltinFamily::CatDissipative => "cat_dissipative",
            BuiltinFamily::Solenoid => "solenoid",
            BuiltinFamily::SkewAtomic => "skew_atomic",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::Unknown {
                what: "family",
                name: name.to_string(),
            })
    }

    pub fn description(self) -> &'static str {
        match self {
            BuiltinFamily::Doubling => "x -> 2x + t*amp*sin(2 pi x) mod 1 on the circle (non-invertible)",
            BuiltinFamily::CatTranslate => "x -> A x + t*(v1, v2) mod 1, A = [[2,1],[1,1]] (area-preserving)",
            BuiltinFamily::CatDissipative => "(x, y) -> (2x + y + t*eps*sin(2 pi x), x + y) mod 1",
            BuiltinFamily::Solenoid => {
                "(theta, u, v) -> (2 theta, lambda1 u + c cos theta, lambda2 v + c sin theta) + t*amp*shift; \
                 direction 0 = unstable_shift (theta), 1 = stable_shift (u)"
            }
            BuiltinFamily::SkewAtomic => "(theta, v) -> (2 theta mod 1, lambda v + c + t) on the cylinder",
        }
    }

    pub fn schema(self) -> &'static [ParamSpec] {
        const EPS0: ParamSpec = ParamSpec {
            name: "eps0",
            default: DEFAULT_EPS0,
            help: "half-width of the admissible t interval",
        };
        match self {
            BuiltinFamily::Doubling => &[
                ParamSpec { name: "amp", default: 1.0, help: "perturbation amplitude" },
                EPS0,
            ],
            BuiltinFamily::CatTranslate => &[
                ParamSpec { name: "v1", default: 1.0, help: "translation direction, first component" },
                ParamSpec { name: "v2", default: 0.5, help: "translation direction, second component" },
                EPS0,
            ],
            BuiltinFamily::CatDissipative => &[
                ParamSpec { name: "eps", default: 0.1, help: "amplitude of the sine perturbation" },
                EPS0,
            ],
            BuiltinFamily::Solenoid => &[
                ParamSpec { name: "lambda1", default: 0.4, help: "contraction rate of u, in (0, 1/2)" },
                ParamSpec { name: "lambda2", default: 0.4, help: "contraction rate of v, in (0, 1/2)" },
                ParamSpec { name: "c", default: 0.3, help: "offset radius of the image tube" },
                ParamSpec { name: "direction", default: 1.0, help: "0 = unstable_shift, 1 = stable_shift" },
                ParamSpec { name: "amp", default: 1.0, help: "perturbation amplitude" },
                EPS0,
            ],
            BuiltinFamily::SkewAtomic => &[
                ParamSpec { name: "lambda", default: 0.5, help: "fibre contraction, in (0, 1)" },
                ParamSpec { name: "c", default: 0.25, help: "fibre offset" },
                EPS0,
            ],
        }
    }
}

/// Builds a built-in family from its name and a flat parameter map.
pub fn make_builtin_family(name: &str, params: &Params) -> Result<Family> {
    let kind = BuiltinFamily::from_name(name)?;
    let p = read_with_schema(kind.schema(), params)?;
    let eps0 = p["eps0"];
    if !(eps0 > 0.0) {
        return Err(Error::invalid("eps0", "must be positive"));
    }
    Ok(match kind {
        BuiltinFamily::Doubling => {
            let amp = p["amp"];
            if TAU * eps0 * amp.abs() >= 1.0 {
                return Err(Error::invalid("amp", "2*pi*eps0*|amp| must be < 1 to stay expanding"));
            }
            Arc::new(Doubling { amp, eps0, domain: ModelDomain::circle() })
        }
        BuiltinFamily::CatTranslate => Arc::new(CatTranslate {
            v: [p["v1"], p["v2"]],
            eps0,
            domain: ModelDomain::torus2(),
        }),
        BuiltinFamily::CatDissipative => {
            let eps = p["eps"];
            if TAU * eps.abs() * eps0 >= 0.5 {
                return Err(Error::invalid("eps", "2*pi*|eps|*eps0 must be < 1/2"));
            }
            Arc::new(CatDissipative { eps, eps0, domain: ModelDomain::torus2() })
        }
        BuiltinFamily::Solenoid => Arc::new(Solenoid::new(
            p["lambda1"],
            p["lambda2"],
            p["c"],
            p["direction"],
            p["amp"],
            eps0,
        )?),
        BuiltinFamily::SkewAtomic => {
            let (lambda, c) = (p["lambda"], p["c"]);
            if !(lambda > 0.0 && lambda < 1.0) {
                return Err(Error::invalid("lambda", "must lie in (0, 1)"));
            }
            let lo = (c - eps0) / (1.0 - lambda) - 0.5;
            let hi = (c + eps0) / (1.0 - lambda) + 0.5;
            Arc::new(SkewAtomic { lambda, c, eps0, domain: ModelDomain::cylinder2(lo, hi) })
        }
    })
}

fn mat(rows: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, rows, data)
}

#[derive(Debug)]
pub struct Doubling {
    amp: f64,
    eps0: f64,
    domain: ModelDomain,
}

impl MapFamily for Doubling {
    fn name(&self) -> &str {
        "doubling"
    }
    fn domain(&self) -> &ModelDomain {
        &self.domain
    }
    fn unstable_dim(&self) -> usize {
        1
    }
    fn stable_dim(&self) -> usize {
        0
    }
    fn t_range(&self) -> (f64, f64) {
        (-self.eps0, self.eps0)
    }
    fn params(&self) -> Params {
        Params::from([("amp".into(), self.amp), ("eps0".into(), self.eps0)])
    }
    fn eval(&self, t: f64, x: &Point) -> Point {
        let y = 2.0 * x[0] + t * self.amp * (TAU * x[0]).sin();
        self.domain.wrap([y, 0.0, 0.0])
    }
    fn jac(&self, t: f64, x: &Point) -> DMatrix<f64> {
        mat(1, &[2.0 + TAU * t * self.amp * (TAU * x[0]).cos()])
    }
    fn dt(&self, _t: f64, x: &Point) -> Point {
        [self.amp * (TAU * x[0]).sin(), 0.0, 0.0]
    }
    fn dt_jac(&self, _t: f64, x: &Point) -> Option<DMatrix<f64>> {
        Some(mat(1, &[TAU * self.amp * (TAU * x[0]).cos()]))
    }
    fn preimages(&self, t: f64, x: &Point) -> Option<Vec<Point>> {
        Some(self.branch_preimages(t, x[0]).iter().map(|&y| [y, 0.0, 0.0]).collect())
    }
}

impl Doubling {
    /// The two preimages of `x` under `f_t`, found by safeguarded Newton on
    /// each monotone branch.
    pub fn branch_preimages(&self, t: f64, x: f64) -> [f64; 2] {
        let a = t * self.amp;
        let mut out = [0.0; 2];
        for (branch, slot) in out.iter_mut().enumerate() {
            // lift: find y in [branch/2, (branch+1)/2) with 2y + a sin(2 pi y) = x + branch
            let target = x + branch as f64;
            *slot = solve_monotone(|y| 2.0 * y + a * (TAU * y).sin() - target, |y| 2.0 + TAU * a * (TAU * y).cos(), 0.5 * branch as f64, 0.5 * (branch + 1) as f64);
        }
        out
    }
}

/// Root of an increasing function on `[lo, hi]` (Newton with bisection fallback).
fn solve_monotone(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut y = 0.5 * (lo + hi);
    for _ in 0..100 {
        let v = f(y);
        if v.abs() < 1e-15 {
            break;
        }
        if v > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        let step = y - v / df(y);
        y = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-16 {
            break;
        }
    }
    y
}

#[derive(Debug)]
pub struct CatTranslate {
    v: [f64; 2],
    eps0: f64,
    domain: ModelDomain,
}

impl MapFamily for CatTranslate {
    fn name(&self) -> &str {
        "cat_translate"
    }
    fn domain(&self) -> &ModelDomain {
        &self.domain
    }
    fn unstable_dim(&self) -> usize {
        1
    }
    fn stable_dim(&self) -> usize {
        1
    }
    fn t_range(&self) -> (f64, f64) {
        (-self.eps0, self.eps0)
    }
    fn params(&self) -> Params {
        Params::from([("v1".into(), self.v[0]), ("v2".into(), self.v[1]), ("eps0".into(), self.eps0)])
    }
    fn eval(&self, t: f64, x: &Point) -> Point {
        self.domain.wrap([
            2.0 * x[0] + x[1] + t * self.v[0],
            x[0] + x[1] + t * self.v[1],
            0.0,
        ])
    }
    fn jac(&self, _t: f64, _x: &Point) -> DMatrix<f64> {
        mat(2, &[2.0, 1.0, 1.0, 1.0])
    }
    fn det_jac(&self, _t: f64, _x: &Point) -> f64 {
        1.0
    }
    fn dt(&self, _t: f64, _x: &Point) -> Point {
        [self.v[0], self.v[1], 0.0]
    }
    fn dt_jac(&self, _t: f64, _x: &Point) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(2, 2))
    }
    fn dt_is_constant(&self) -> bool {
        true
    }
    fn is_invertible(&self) -> bool {
        true
    }
    fn inverse(&self, t: f64, x: &Point) -> Option<Point> {
        let (a, b) = (x[0] - t * self.v[0], x[1] - t * self.v[1]);
        Some(self.domain.wrap([a - b, -a + 2.0 * b, 0.0]))
    }
}

#[derive(Debug)]
pub struct CatDissipative {
    eps: f64,
    eps0: f64,
    domain: ModelDomain,
}

impl MapFamily for CatDissipative {
    fn name(&self) -> &str {
        "cat_dissipative"
    }
    fn domain(&self) -> &ModelDomain {
        &self.domain
    }
    fn unstable_dim(&self) -> usize {
        1
    }
    fn stable_dim(&self) -> usize {
        1
    }
    fn t_range(&self) -> (f64, f64) {
        (-self.eps0, self.eps0)
    }
    fn params(&self) -> Params {
        Params::from([("eps".into(), self.eps), ("eps0".into(), self.eps0)])
    }
    fn eval(&self, t: f64, x: &Point) -> Point {
        self.domain.wrap([
            2.0 * x[0] + x[1] + t * self.eps * (TAU * x[0]).sin(),
            x[0] + x[1],
            0.0,
        ])
    }
    fn jac(&self, t: f64, x: &Point) -> DMatrix<f64> {
        mat(2, &[2.0 + TAU * t * self.eps * (TAU * x[0]).cos(), 1.0, 1.0, 1.0])
    }
    fn det_jac(&self, t: f64, x: &Point) -> f64 {
        1.0 + TAU * t * self.eps * (TAU * x[0]).cos()
    }
    fn dt(&self, _t: f64, x: &Point) -> Point {
        [self.eps * (TAU * x[0]).sin(), 0.0, 0.0]
    }
    fn dt_jac(&self, _t: f64, x: &Point) -> Option<DMatrix<f64>> {
        Some(mat(2, &[TAU * self.eps * (TAU * x[0]).cos(), 0.0, 0.0, 0.0]))
    }
    fn is_invertible(&self) -> bool {
        true
    }
    fn inverse(&self, t: f64, x: &Point) -> Option<Point> {
        // x0 + a sin(2 pi x0) = X - Y (mod 1); the left side is a circle diffeomorphism
        let a = t * self.eps;
        let w = (x[0] - x[1]).rem_euclid(1.0);
        let x0 = solve_monotone(|y| y + a * (TAU * y).sin() - w, |y| 1.0 + TAU * a * (TAU * y).cos(), 0.0, 1.0);
        Some(self.domain.wrap([x0, x[1] - x0, 0.0]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftDirection {
    UnstableShift,
    StableShift,
}

#[derive(Debug)]
pub struct Solenoid {
    lambda: [f64; 2],
    c: f64,
    direction: ShiftDirection,
    amp: f64,
    eps0: f64,
    domain: ModelDomain,
}

impl Solenoid {
    fn new(l1: f64, l2: f64, c: f64, direction: f64, amp: f64, eps0: f64) -> Result<Self> {
        for (name, l) in [("lambda1", l1), ("lambda2", l2)] {
            if !(l > 0.0 && l < 0.5) {
                return Err(Error::invalid(name, "must lie in (0, 1/2) for disjoint branches"));
            }
        }
        if !(c > 0.0) {
            return Err(Error::invalid("c", "must be positive"));
        }
        let direction = match direction {
            0.0 => ShiftDirection::UnstableShift,
            1.0 => ShiftDirection::StableShift,
            _ => return Err(Error::invalid("direction", "must be 0 (unstable_shift) or 1 (stable_shift)")),
        };
        // box invariance: lambda R + c + eps0 |amp| <= R
        let radius = 1.05 * (c + eps0 * amp.abs()) / (1.0 - l1.max(l2));
        Ok(Self {
            lambda: [l1, l2],
            c,
            direction,
            amp,
            eps0,
            domain: ModelDomain::solid_torus3(radius),
        })
    }

    pub fn direction(&self) -> ShiftDirection {
        self.direction
    }

    fn shift(&self, t: f64) -> Point {
        match self.direction {
            ShiftDirection::UnstableShift => [t * self.amp, 0.0, 0.0],
            ShiftDirection::StableShift => [0.0, t * self.amp, 0.0],
        }
    }
}

impl MapFamily for Solenoid {
    fn name(&self) -> &str {
        "solenoid"
    }
    fn domain(&self) -> &ModelDomain {
        &self.domain
    }
    fn unstable_dim(&self) -> usize {
        1
    }
    fn stable_dim(&self) -> usize {
        2
    }
    fn t_range(&self) -> (f64, f64) {
        (-self.eps0, self.eps0)
    }
    fn params(&self) -> Params {
        Params::from([
            ("lambda1".into(), self.lambda[0]),
            ("lambda2".into(), self.lambda[1]),
            ("c".into(), self.c),
            ("direction".into(), if self.direction == ShiftDirection::StableShift { 1.0 } else { 0.0 }),
            ("amp".into(), self.amp),
            ("eps0".into(), self.eps0),
        ])
    }
    fn eval(&self, t: f64, x: &Point) -> Point {
        let s = self.shift(t);
        self.domain.wrap([
            2.0 * x[0] + s[0],
            self.lambda[0] * x[1] + self.c * x[0].cos() + s[1],
            self.lambda[1] * x[2] + self.c * x[0].sin(),
        ])
    }
    fn jac(&self, _t: f64, x: &Point) -> DMatrix<f64> {
        let (s, c) = x[0].sin_cos();
        mat(3, &[2.0, 0.0, 0.0, -self.c * s, self.lambda[0], 0.0, self.c * c, 0.0, self.lambda[1]])
    }
    fn det_jac(&self, _t: f64, _x: &Point) -> f64 {
        2.0 * self.lambda[0] * self.lambda[1]
    }
    fn dt(&self, _t: f64, _x: &Point) -> Point {
        self.shift(1.0)
    }
    fn dt_jac(&self, _t: f64, _x: &Point) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(3, 3))
    }
    fn dt_is_constant(&self) -> bool {
        true
    }
    fn is_invertible(&self) -> bool {
        true
    }
    /// Inverse on the image of the solid torus: of the two angular preimages,
    /// the one whose cross-section coordinates are closest to the core circle.
    fn inverse(&self, t: f64, x: &Point) -> Option<Point> {
        let s = self.shift(t);
        let base = (x[0] - s[0]).rem_euclid(TAU) / 2.0;
        [base, base + PI]
            .into_iter()
            .map(|theta| {
                let u = (x[1] - s[1] - self.c * theta.cos()) / self.lambda[0];
                let v = (x[2] - self.c * theta.sin()) / self.lambda[1];
                [theta, u, v]
            })
            .min_by(|a, b| (a[1].hypot(a[2])).total_cmp(&b[1].hypot(b[2])))
            .map(|p| self.domain.wrap(p))
    }
}

#[derive(Debug)]
pub struct SkewAtomic {
    lambda: f64,
    c: f64,
    eps0: f64,
    domain: ModelDomain,
}

impl SkewAtomic {
    /// Height of the invariant circle at parameter `t`.
    pub fn invariant_height(&self, t: f64) -> f64 {
        (self.c + t) / (1.0 - self.lambda)
    }
}

impl MapFamily for SkewAtomic {
    fn name(&self) -> &str {
        "skew_atomic"
    }
    fn domain(&self) -> &ModelDomain {
        &self.domain
    }
    fn unstable_dim(&self) -> usize {
        1
    }
    fn stable_dim(&self) -> usize {
        1
    }
    fn t_range(&self) -> (f64, f64) {
        (-self.eps0, self.eps0)
    }
    fn params(&self) -> Params {
        Params::from([("lambda".into(), self.lambda), ("c".into(), self.c), ("eps0".into(), self.eps0)])
    }
    fn eval(&self, t: f64, x: &Point) -> Point {
        self.domain.wrap([2.0 * x[0], self.lambda * x[1] + self.c + t, 0.0])
    }
    fn jac(&self, _t: f64, _x: &Point) -> DMatrix<f64> {
        mat(2, &[2.0, 0.0, 0.0, self.lambda])
    }
    fn dt(&self, _t: f64, _x: &Point) -> Point {
        [0.0, 1.0, 0.0]
    }
    fn dt_jac(&self, _t: f64, _x: &Point) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(2, 2))
    }
    fn dt_is_constant(&self) -> bool {
        true
    }
}

/// `X_t = (d/dt f_t) o f_t^{-1}` with its divergence.
#[derive(Clone, Debug)]
pub struct PerturbationField {
    family: Family,
    t: f64,
}

/// Step for central differences of vector fields.
pub const FD_STEP: f64 = 1e-5;

pub fn perturbation_field(family: &Family, t: f64) -> Result<PerturbationField> {
    if !family.is_invertible() && !family.dt_is_constant() {
        return Err(Error::Unsupported(format!(
            "`{}` is not invertible and its t-derivative is not constant; \
             use the mollified pushforward of the t-derivative (response module) instead",
            family.name()
        )));
    }
    Ok(PerturbationField {
        family: family.clone(),
        t,
    })
}

impl PerturbationField {
    pub fn t(&self) -> f64 {
        self.t
    }

    fn preimage(&self, x: &Point) -> Point {
        self.family
            .inverse(self.t, x)
            .expect("invertible family must provide an inverse")
    }

    pub fn at(&self, x: &Point) -> Point {
        if self.family.dt_is_constant() {
            self.family.dt(self.t, x)
        } else {
            self.family.dt(self.t, &self.preimage(x))
        }
    }

    pub fn divergence(&self, x: &Point) -> f64 {
        let d = self.family.dim();
        if self.family.dt_is_constant() {
            return 0.0;
        }
        let y = self.preimage(x);
        if let Some(ddt) = self.family.dt_jac(self.t, &y) {
            // DX(x) = D(dt)(y) . Df(y)^{-1}
            if let Some(inv) = self.family.jac(self.t, &y).try_inverse() {
                return (ddt * inv).trace();
            }
        }
        let mut div = 0.0;
        for i in 0..d {
            let mut xp = *x;
            let mut xm = *x;
            xp[i] += FD_STEP;
            xm[i] -= FD_STEP;
            let dom = self.family.domain();
            div += (self.at(&dom.wrap(xp))[i] - self.at(&dom.wrap(xm))[i]) / (2.0 * FD_STEP);
        }
        div
    }
}

/// Iterates `f_t` from `x0` (or from a seeded uniform point when `x0` is
/// `None`), discarding `burn_in` steps and returning the next `n_steps`.
pub fn orbit(
    family: &dyn MapFamily,
    t: f64,
    x0: Option<Point>,
    n_steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<Point>> {
    if n_steps == 0 {
        return Err(Error::Precondition("orbit needs n_steps >= 1".into()));
    }
    let dom = family.domain();
    let mut x = match x0 {
        Some(x) => {
            if !dom.contains(&dom.wrap(x)) {
                return Err(Error::Precondition(format!("initial point {x:?} outside the domain")));
            }
            dom.wrap(x)
        }
        None => dom.random_point(&mut ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut out = Vec::with_capacity(n_steps);
    for step in 1..=burn_in + n_steps {
        x = family.eval(t, &x);
        if x[..dom.dim()].iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                step,
                detail: format!("non-finite orbit point {x:?}"),
            });
        }
        if step > burn_in {
            out.push(x);
        }
    }
    Ok(out)
}
