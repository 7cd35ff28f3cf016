//! Finite-time hyperbolicity rates and the volume/contraction conditions that
//! govern fractional response.
//!
//! For a sample point `x` on the attractor and horizon `m` the estimator forms
//!
//! * the growth of `Df^m` restricted to the unstable subspace `E^u(x)`
//!   (frame pushed forward from the orbit's past),
//! * the growth of `Df^m` restricted to the stable subspace `E^s(x)`
//!   (frame pulled back from the orbit's future through inverse Jacobians, so
//!   rounding never leaks into the expanding direction),
//! * `|det Df^m(x)|`,
//!
//! all accumulated through QR re-orthonormalization, and aggregates with the
//! inf/sup over samples.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{MapFamily, Point};
use crate::error::{Error, Result};

/// Steps used to align the unstable/stable frames before measuring.
const ALIGN_STEPS: usize = 40;
const BURN_IN: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicRates {
    /// Weakest contraction (sup over samples of the stable growth).
    pub nu_s: f64,
    /// Strongest contraction.
    pub nu_s_bar: f64,
    /// Weakest expansion (inf over samples).
    pub nu_u: f64,
    /// Strongest volume contraction, inf of `|det Df^m|^(1/m)`.
    #[serde(rename = "J")]
    pub j: f64,
    pub horizon_m: usize,
    pub n_samples: usize,
    pub t: f64,
}

impl HyperbolicRates {
    /// Rates given directly, e.g. reference values quoted from the literature.
    pub fn from_values(nu_s: f64, nu_s_bar: f64, nu_u: f64, j: f64) -> Result<Self> {
        let r = Self {
            nu_s,
            nu_s_bar,
            nu_u,
            j,
            horizon_m: 0,
            n_samples: 0,
            t: 0.0,
        };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        if !(self.nu_s_bar > 0.0 && self.nu_s_bar <= self.nu_s && self.nu_s < 1.0) {
            return Err(Error::Precondition(format!(
                "need 0 < nu_s_bar <= nu_s < 1, got nu_s_bar = {}, nu_s = {}",
                self.nu_s_bar, self.nu_s
            )));
        }
        if !(self.nu_u > 1.0) {
            return Err(Error::Precondition(format!("need nu_u > 1, got {}", self.nu_u)));
        }
        if !(self.j > 0.0) {
            return Err(Error::Precondition(format!("need J > 0, got {}", self.j)));
        }
        Ok(())
    }

    /// Worst case over several parameter values: the rates entering the
    /// conditions are sup/inf over `t`.
    pub fn worst_case(all: &[HyperbolicRates]) -> Option<HyperbolicRates> {
        let first = all.first()?;
        let mut out = first.clone();
        for r in &all[1..] {
            out.nu_s = out.nu_s.max(r.nu_s);
            out.nu_s_bar = out.nu_s_bar.min(r.nu_s_bar);
            out.nu_u = out.nu_u.min(r.nu_u);
            out.j = out.j.min(r.j);
            out.n_samples += r.n_samples;
        }
        Some(out)
    }
}

/// Per-sample finite-time rates (already `m`-th roots).
#[derive(Clone, Copy, Debug)]
struct SampleRates {
    unstable: f64,
    stable_weak: f64,
    stable_strong: f64,
    volume: f64,
}

fn random_frame(d: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, k, |_, _| rng.gen_range(-1.0..1.0));
    m.qr().q()
}

/// Multiplies `acc` by `r` on the left, keeping the scale in `log_scale`.
fn accumulate(acc: &mut DMatrix<f64>, log_scale: &mut f64, r: &DMatrix<f64>) {
    *acc = r * &*acc;
    let s = acc.amax();
    if s > 0.0 && s.is_finite() {
        *acc /= s;
        *log_scale += s.ln();
    }
}

fn log_singular_values(acc: &DMatrix<f64>, log_scale: f64) -> (f64, f64) {
    let sv = acc.singular_values();
    let max = sv.max();
    let min = sv.min();
    (max.ln() + log_scale, min.ln() + log_scale)
}

fn sample_rates(family: &dyn MapFamily, t: f64, m: usize, rng: &mut ChaCha8Rng, index: usize) -> Result<SampleRates> {
    let (d, du, ds) = (family.dim(), family.unstable_dim(), family.stable_dim());
    let dom = family.domain();
    let mut x: Point = dom.random_point(rng);
    for _ in 0..BURN_IN {
        x = family.eval(t, &x);
    }
    let len = ALIGN_STEPS + m + ALIGN_STEPS;
    let mut jacs = Vec::with_capacity(len);
    let mut log_det = 0.0;
    for k in 0..len {
        if k >= ALIGN_STEPS && k < ALIGN_STEPS + m {
            log_det += family.det_jac(t, &x).abs().ln();
        }
        jacs.push(family.jac(t, &x));
        x = family.eval(t, &x);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                step: k,
                detail: "non-finite orbit point".into(),
            });
        }
    }

    // unstable frame at x_A, aligned by pushing forward from x_0
    let mut q = random_frame(d, du, rng);
    for jac in &jacs[..ALIGN_STEPS] {
        q = (jac * &q).qr().q();
    }
    let mut acc_u = DMatrix::identity(du, du);
    let mut scale_u = 0.0;
    for jac in &jacs[ALIGN_STEPS..ALIGN_STEPS + m] {
        let qr = (jac * &q).qr();
        accumulate(&mut acc_u, &mut scale_u, &qr.r());
        q = qr.q();
    }
    let (_, log_u_min) = log_singular_values(&acc_u, scale_u);

    // stable frame at x_{A+m}, aligned by pulling back from the end of the orbit
    let inverses = jacs
        .iter()
        .map(|j| {
            j.clone().try_inverse().ok_or_else(|| Error::LossOfHyperbolicity {
                sample: index,
                detail: "singular Jacobian".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = random_frame(d, ds, rng);
    for inv in inverses[ALIGN_STEPS + m..].iter().rev() {
        s = (inv * &s).qr().q();
    }
    let mut acc_s = DMatrix::identity(ds, ds);
    let mut scale_s = 0.0;
    for inv in inverses[ALIGN_STEPS..ALIGN_STEPS + m].iter().rev() {
        let qr = (inv * &s).qr();
        accumulate(&mut acc_s, &mut scale_s, &qr.r());
        s = qr.q();
    }
    // backward growth of the stable frame; forward growth is its reciprocal
    let (log_back_max, log_back_min) = log_singular_values(&acc_s, scale_s);
    let mf = m as f64;
    let out = SampleRates {
        unstable: (log_u_min / mf).exp(),
        stable_weak: (-log_back_min / mf).exp(),
        stable_strong: (-log_back_max / mf).exp(),
        volume: (log_det / mf).exp(),
    };
    // consecutive-singular-value gap must beat 1.01^m
    if !(out.unstable > 1.0 && out.stable_weak < 1.0 && out.unstable / out.stable_weak >= 1.01) {
        return Err(Error::LossOfHyperbolicity {
            sample: index,
            detail: format!(
                "expansion {:.6} vs contraction {:.6} over m = {m}",
                out.unstable, out.stable_weak
            ),
        });
    }
    Ok(out)
}

/// Finite-horizon estimates of the weakest/strongest contraction, the weakest
/// expansion and the volume rate, from `n_samples` burned-in orbit points.
pub fn finite_time_rates(family: &dyn MapFamily, t: f64, m: usize, n_samples: usize, seed: u64) -> Result<HyperbolicRates> {
    if m < 8 {
        return Err(Error::Precondition(format!("horizon m must be >= 8, got {m}")));
    }
    if n_samples == 0 {
        return Err(Error::Precondition("n_samples must be >= 1".into()));
    }
    if family.unstable_dim() == 0 || family.stable_dim() == 0 {
        return Err(Error::Unsupported(format!(
            "`{}` has d_u = {}, d_s = {}; rates need both expanding and contracting directions",
            family.name(),
            family.unstable_dim(),
            family.stable_dim()
        )));
    }
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sample_rates(family, t, m, &mut rng, i)
        })
        .collect::<Result<Vec<_>>>()?;
    let fold = |f: fn(&SampleRates) -> f64, pick: fn(f64, f64) -> f64| samples.iter().map(f).reduce(pick).unwrap();
    let rates = HyperbolicRates {
        nu_s: fold(|s| s.stable_weak, f64::max),
        nu_s_bar: fold(|s| s.stable_strong, f64::min),
        nu_u: fold(|s| s.unstable, f64::min),
        j: fold(|s| s.volume, f64::min),
        horizon_m: m,
        n_samples,
        t,
    };
    Ok(rates)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// `nu_u^(-beta) < J^(1/p)`
    Star1,
    /// `nu_s < J`
    Star3,
    /// `d_u log nu_u > d_s |log nu_s_bar| - |log nu_s|`
    Star4,
}

impl Condition {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "star1" => Ok(Condition::Star1),
            "star3" => Ok(Condition::Star3),
            "star4" => Ok(Condition::Star4),
            _ => Err(Error::Unknown {
                what: "condition",
                name: name.into(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionInputs {
    pub p: f64,
    pub beta: f64,
    pub d_u: usize,
    pub d_s: usize,
}

/// Outcome of one condition; `lhs`/`rhs` are logarithms and
/// `margin = rhs - lhs`, with `holds` iff `margin > 0` (ties fail).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub inputs: ConditionInputs,
}

pub fn check_condition(
    rates: &HyperbolicRates,
    condition: Condition,
    p: f64,
    beta: f64,
    d_u: usize,
    d_s: usize,
) -> Result<ConditionReport> {
    rates.validate()?;
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::invalid("p", "must be in (1, inf)"));
    }
    if condition == Condition::Star1 && !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid("beta", "must be in (0, 1)"));
    }
    let (lhs, rhs) = match condition {
        Condition::Star1 => (-beta * rates.nu_u.ln(), rates.j.ln() / p),
        Condition::Star3 => (rates.nu_s.ln(), rates.j.ln()),
        Condition::Star4 => (
            d_s as f64 * rates.nu_s_bar.ln().abs() - rates.nu_s.ln().abs(),
            d_u as f64 * rates.nu_u.ln(),
        ),
    };
    let margin = rhs - lhs;
    Ok(ConditionReport {
        condition,
        holds: margin > 0.0,
        lhs,
        rhs,
        margin,
        inputs: ConditionInputs { p, beta, d_u, d_s },
    })
}

/// Largest Hölder exponent guaranteed for an observable in `H^r_p`:
/// `r - (1/p) |log J| / |log nu_s|`. Non-positive values mean no guarantee.
pub fn predicted_holder_bound(rates: &HyperbolicRates, r: f64, p: f64) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::invalid("p", "must be > 1"));
    }
    if !(r > 0.0 && r < 1.0 / p) {
        return Err(Error::invalid("r", format!("must lie in (0, 1/p) = (0, {})", 1.0 / p)));
    }
    rates.validate()?;
    Ok(r - rates.j.ln().abs() / (p * rates.nu_s.ln().abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::make_builtin_family;
    use crate::params::Params;
    use proptest::prelude::*;

    /// Independent 2x2 symmetric eigen-solver (quadratic formula).
    fn eig2(a: f64, b: f64, d: f64) -> (f64, f64) {
        let tr = a + d;
        let det = a * d - b * b;
        let disc = (tr * tr / 4.0 - det).sqrt();
        (tr / 2.0 + disc, tr / 2.0 - disc)
    }

    fn family(name: &str, kv: &[(&str, f64)]) -> crate::Family {
        let p: Params = kv.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        make_builtin_family(name, &p).unwrap()
    }

    #[test]
    fn cat_rates_match_eigenvalues() {
        let (lu, ls) = eig2(2.0, 1.0, 1.0);
        let cat = family("cat_translate", &[]);
        for m in [8, 20, 33] {
            let r = finite_time_rates(cat.as_ref(), 0.0, m, 16, 1).unwrap();
            assert!((r.nu_u - lu).abs() < 1e-6, "{}", r.nu_u);
            assert!((r.nu_s - ls).abs() < 1e-6, "{}", r.nu_s);
            assert!((r.nu_s_bar - ls).abs() < 1e-6);
            assert!((r.j - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn solenoid_rates_are_constant() {
        let sol = family("solenoid", &[("lambda1", 0.4), ("lambda2", 0.4), ("c", 0.3)]);
        for m in [8, 20] {
            let r = finite_time_rates(sol.as_ref(), 0.0, m, 8, 2).unwrap();
            assert!((r.nu_s - 0.4).abs() < 1e-12, "{}", r.nu_s);
            assert!((r.nu_s_bar - 0.4).abs() < 1e-12);
            assert!((r.j - 0.32).abs() < 1e-12);
            assert!(r.nu_u > 1.9 && r.nu_u < 2.1, "{}", r.nu_u);
        }
    }

    #[test]
    fn rejects_families_without_stable_direction() {
        let dbl = family("doubling", &[]);
        assert!(matches!(finite_time_rates(dbl.as_ref(), 0.0, 10, 4, 0), Err(Error::Unsupported(_))));
        let cat = family("cat_translate", &[]);
        assert!(finite_time_rates(cat.as_ref(), 0.0, 4, 4, 0).is_err());
    }

    #[test]
    fn conditions() {
        let sol = HyperbolicRates::from_values(0.4, 0.4, 2.0, 0.32).unwrap();
        let rep = check_condition(&sol, Condition::Star3, 2.0, 0.5, 1, 2).unwrap();
        assert!(!rep.holds);
        assert!((rep.margin - (0.32f64 / 0.4).ln()).abs() < 1e-15);

        let (lu, ls) = eig2(2.0, 1.0, 1.0);
        let cat = HyperbolicRates::from_values(ls, ls, lu, 1.0).unwrap();
        assert!(check_condition(&cat, Condition::Star3, 2.0, 0.5, 1, 1).unwrap().holds);
        for (p, beta) in [(1.1, 0.01), (4.0, 0.5), (50.0, 0.99)] {
            assert!(check_condition(&cat, Condition::Star1, p, beta, 1, 1).unwrap().holds);
        }

        // quoted counterexample regime: J = nu_s = 1/2 is a tie and fails
        let tie = HyperbolicRates::from_values(0.5, 0.5, 2.0, 0.5).unwrap();
        let rep = check_condition(&tie, Condition::Star3, 2.0, 0.5, 1, 2).unwrap();
        assert!(!rep.holds);
        assert_eq!(rep.margin, 0.0);

        assert!(check_condition(&cat, Condition::Star1, 1.0, 0.5, 1, 1).is_err());
        assert!(check_condition(&cat, Condition::Star1, 2.0, 1.5, 1, 1).is_err());
    }

    #[test]
    fn star4_arithmetic() {
        // d_u log nu_u = log 2 vs 2 |log 0.4| - |log 0.4| = |log 0.4|
        let sol = HyperbolicRates::from_values(0.4, 0.4, 2.0, 0.32).unwrap();
        let rep = check_condition(&sol, Condition::Star4, 2.0, 0.5, 1, 2).unwrap();
        assert!((rep.margin - (2f64.ln() - 0.4f64.ln().abs())).abs() < 1e-15);
        assert!(!rep.holds);
    }

    #[test]
    fn holder_bound_examples() {
        let unit = HyperbolicRates::from_values(0.382, 0.382, 2.618, 1.0).unwrap();
        assert_eq!(predicted_holder_bound(&unit, 0.3, 3.0).unwrap(), 0.3);

        let sol = HyperbolicRates::from_values(0.4, 0.4, 2.0, 0.32).unwrap();
        let a = predicted_holder_bound(&sol, 0.49, 2.0).unwrap();
        let independent = 0.49 - 0.5 * (0.32f64.ln() / 0.4f64.ln());
        assert!((a - independent).abs() < 1e-14);
        assert!(a < 0.0 && (a + 0.1316).abs() < 1e-3);

        let mild = HyperbolicRates::from_values(0.5, 0.5, 2.0, 0.9).unwrap();
        let a = predicted_holder_bound(&mild, 0.2, 4.0).unwrap();
        assert!((a - (0.2 - 0.25 * 0.10536051565782628 / std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((a - 0.162).abs() < 1e-3);

        assert!(predicted_holder_bound(&mild, 0.3, 4.0).is_err());
    }

    #[test]
    fn two_dimensional_builtins_satisfy_star3() {
        for (name, t) in [("cat_translate", 0.03), ("cat_dissipative", 0.04), ("cat_dissipative", -0.04), ("skew_atomic", 0.0)] {
            let f = family(name, &[]);
            let r = finite_time_rates(f.as_ref(), t, 12, 32, 5).unwrap();
            assert!(r.nu_s < r.j + 1e-6, "{name}: nu_s {} J {}", r.nu_s, r.j);
            // volume is bracketed by products of extreme singular growths
            let lower = r.nu_u.powi(f.unstable_dim() as i32) * r.nu_s_bar.powi(f.stable_dim() as i32);
            assert!(r.j >= lower / (1.0 + 5e-2), "{name}: J {} lower {}", r.j, lower);
        }
    }

    #[test]
    fn worst_case_combines_sup_and_inf() {
        let a = HyperbolicRates::from_values(0.4, 0.3, 2.0, 0.9).unwrap();
        let b = HyperbolicRates::from_values(0.45, 0.35, 1.8, 0.95).unwrap();
        let w = HyperbolicRates::worst_case(&[a, b]).unwrap();
        assert_eq!((w.nu_s, w.nu_s_bar, w.nu_u, w.j), (0.45, 0.3, 1.8, 0.9));
    }

    proptest! {
        #[test]
        fn holder_bound_is_monotone(
            r in 0.01f64..0.45,
            dr in 0.0f64..0.04,
            j in 0.05f64..1.0,
            dj in 0.0f64..0.5,
            nu_s in 0.05f64..0.95,
            p in 1.05f64..2.0,
        ) {
            let r2 = (r + dr).min(0.999 / p);
            let r = r.min(r2);
            let j2 = (j + dj).min(1.0);
            let lo = HyperbolicRates::from_values(nu_s, nu_s, 2.0, j).unwrap();
            let hi = HyperbolicRates::from_values(nu_s, nu_s, 2.0, j2).unwrap();
            prop_assume!(r < 1.0 / p);
            let base = predicted_holder_bound(&lo, r, p).unwrap();
            prop_assert!(predicted_holder_bound(&lo, r2, p).unwrap() >= base);
            prop_assert!(predicted_holder_bound(&hi, r, p).unwrap() >= base);
            // weaker contraction (nu_s closer to 1) makes the correction larger
            let weaker = HyperbolicRates::from_values((nu_s + 0.04).min(0.99), nu_s, 2.0, j).unwrap();
            prop_assert!(predicted_holder_bound(&weaker, r, p).unwrap() <= base + 1e-15);
        }
    }
}
