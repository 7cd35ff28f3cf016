//! Post-processing of response curves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::MapFamily;
use crate::error::{Error, Result};
use crate::observables::{Observable, ObservableKind};
use crate::rates::{check_condition, predicted_holder_bound, Condition, HyperbolicRates};
use crate::response::{estimate_at, mean_and_error, EstimatorParams, ResponseCurve};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    LinearFit {
        slope,
        intercept,
        r_squared,
    }
}

/// Smallest exponent a fit must show to count as Hölder rather than a jump.
pub const MIN_EXPONENT: f64 = 0.05;
/// Fits below this `r_squared` are not trusted.
pub const MIN_R_SQUARED: f64 = 0.9;

/// Power-law fit `|R(t) - R(t0)| ≈ C |t - t0|^alpha` on one set of points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub alpha_hat: f64,
    pub constant_hat: f64,
    pub r_squared: f64,
    pub scale_range: (f64, f64),
    pub n_points: usize,
    /// Largest increment error among the points used.
    pub noise_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderFit {
    pub alpha_hat: f64,
    pub constant_hat: f64,
    pub r_squared: f64,
    pub scale_range: (f64, f64),
    pub n_points: usize,
    pub noise_floor: f64,
    /// Fits on `t < t0` and `t > t0` alone, when each has three usable points.
    pub left: Option<PowerFit>,
    pub right: Option<PowerFit>,
    /// `(|t - t0|, |R(t) - R(t0)|)` for every usable point.
    pub points: Vec<(f64, f64)>,
}

impl HolderFit {
    /// A finite positive exponent with a trustworthy fit.
    pub fn passes_quality_gate(&self) -> bool {
        self.alpha_hat > MIN_EXPONENT && self.r_squared >= MIN_R_SQUARED
    }

    /// CSV with columns `scale,abs_increment`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["scale", "abs_increment"])?;
        for (h, d) in &self.points {
            w.write_record(&[format!("{h:e}"), format!("{d:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn power_fit(points: &[(f64, f64, f64)]) -> Option<PowerFit> {
    if points.len() < 3 {
        return None;
    }
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let fit = linear_fit(&x, &y);
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(0.0, f64::max);
    Some(PowerFit {
        alpha_hat: fit.slope,
        constant_hat: fit.intercept.exp(),
        r_squared: fit.r_squared,
        scale_range: (lo, hi),
        n_points: points.len(),
        noise_floor: points.iter().map(|p| p.2).fold(0.0, f64::max),
    })
}

/// Fits `log|R(t) - R(t0)|` against `log|t - t0|` over the points within
/// `scale_decades` decades of the widest offset whose increment exceeds three
/// times its own error.
pub fn holder_fit(curve: &ResponseCurve, t0: f64, scale_decades: u32) -> Result<HolderFit> {
    if scale_decades < 1 {
        return Err(Error::invalid("scale_decades", "must be >= 1"));
    }
    let i0 = curve
        .index_of(t0)
        .ok_or_else(|| Error::Precondition(format!("t0 = {t0} is not a grid point of the curve")))?;
    let r0 = curve.r_values[i0];
    let widest = curve.t_values.iter().map(|t| (t - t0).abs()).fold(0.0, f64::max);
    let cutoff = widest * 10f64.powi(-(scale_decades as i32));
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut largest_noise = 0.0f64;
    for (i, &t) in curve.t_values.iter().enumerate() {
        let h = (t - t0).abs();
        if i == i0 || h < cutoff {
            continue;
        }
        let d = (curve.r_values[i] - r0).abs();
        let noise = curve.increment_error(i, i0);
        largest_noise = largest_noise.max(noise);
        if d > 3.0 * noise {
            if t < t0 { &mut left } else { &mut right }.push((h, d, noise));
        }
    }
    let pooled: Vec<_> = left.iter().chain(&right).copied().collect();
    let fit = power_fit(&pooled).ok_or(Error::NoiseDominated {
        needed: 3,
        noise_floor: largest_noise,
    })?;
    let mut points: Vec<(f64, f64)> = pooled.iter().map(|p| (p.0, p.1)).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(HolderFit {
        alpha_hat: fit.alpha_hat,
        constant_hat: fit.constant_hat,
        r_squared: fit.r_squared,
        scale_range: fit.scale_range,
        n_points: fit.n_points,
        noise_floor: fit.noise_floor,
        left: power_fit(&left),
        right: power_fit(&right),
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpReport {
    pub jump: bool,
    /// Gap across the narrowest bracket.
    pub gap: f64,
    /// `(δ, |R(t0+δ) - R(t0-δ)|, error)` from the widest bracket down.
    pub brackets: Vec<(f64, f64, f64)>,
}

/// A jump at `t0` is reported when every symmetric bracket, less three times
/// its error, keeps a gap of at least `c_min`.
pub fn jump_detect(curve: &ResponseCurve, t0: f64, c_min: f64) -> Result<JumpReport> {
    if !(c_min > 0.0) {
        return Err(Error::invalid("c_min", "must be > 0"));
    }
    let mut brackets = Vec::new();
    for (i, &t) in curve.t_values.iter().enumerate() {
        let h = t - t0;
        if h <= 0.0 {
            continue;
        }
        if let Some(j) = curve.index_of(t0 - h) {
            brackets.push((h, (curve.r_values[i] - curve.r_values[j]).abs(), curve.increment_error(i, j)));
        }
    }
    if brackets.len() < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 symmetric brackets around t0 = {t0}, found {}",
            brackets.len()
        )));
    }
    brackets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let jump = brackets.iter().all(|&(_, g, e)| g - 3.0 * e >= c_min);
    Ok(JumpReport {
        jump,
        gap: brackets.last().unwrap().1,
        brackets,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVerdict {
    Consistent,
    NumericalBiasWarning,
    NoGuarantee,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Guaranteed exponent; `None` when `(r, p)` is outside its domain.
    pub alpha_max: Option<f64>,
    pub alpha_hat: f64,
    pub r_squared: f64,
    pub star3_holds: bool,
    pub star3_margin: f64,
    pub verdict: BoundVerdict,
    pub note: String,
}

/// Compares a measured exponent with the guaranteed one. The guarantee is a
/// lower bound, so a measurement above it is consistent and one below it
/// points at estimator bias.
pub fn bound_comparison(fit: &HolderFit, rates: &HyperbolicRates, r: f64, p: f64) -> BoundReport {
    let alpha_max = predicted_holder_bound(rates, r, p).ok();
    let (star3_holds, star3_margin) = match check_condition(rates, Condition::Star3, p.max(1.0 + 1e-12), 0.5, 1, 1) {
        Ok(c) => (c.holds, c.margin),
        Err(_) => (false, f64::NAN),
    };
    let (verdict, note) = if !(fit.r_squared >= MIN_R_SQUARED) {
        (BoundVerdict::Inconclusive, format!("fit r_squared {:.3} below {MIN_R_SQUARED}", fit.r_squared))
    } else {
        match alpha_max {
            None => (BoundVerdict::Inconclusive, format!("no bound for r = {r}, p = {p}")),
            Some(a) if a <= 0.0 => (BoundVerdict::NoGuarantee, "no guarantee; measurement informational".into()),
            Some(a) if fit.alpha_hat >= a - 0.1 => (
                BoundVerdict::Consistent,
                format!("measured {:.3} vs guaranteed {a:.3}", fit.alpha_hat),
            ),
            Some(a) => (
                BoundVerdict::NumericalBiasWarning,
                format!("measured {:.3} below guaranteed {a:.3}; suspect the estimator", fit.alpha_hat),
            ),
        }
    };
    BoundReport {
        alpha_max,
        alpha_hat: fit.alpha_hat,
        r_squared: fit.r_squared,
        star3_holds,
        star3_margin,
        verdict,
        note,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvtQuotient {
    pub a_values: Vec<f64>,
    pub s: f64,
    /// `R_{as} / R_a`, `None` where `R_a` is within ten noise floors of zero.
    pub quotients: Vec<Option<f64>>,
    pub errors: Vec<Option<f64>>,
    pub r_a: Vec<f64>,
    pub r_as: Vec<f64>,
    /// `|Q_i - Q_{i-1}|` between consecutive defined entries.
    pub stabilization: Vec<Option<f64>>,
    pub t: f64,
}

impl EvtQuotient {
    /// CSV with columns `a,R_a,R_as,quotient,error`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["a", "R_a", "R_as", "quotient", "error"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for i in 0..self.a_values.len() {
            w.write_record(&[
                format!("{:e}", self.a_values[i]),
                format!("{:e}", self.r_a[i]),
                format!("{:e}", self.r_as[i]),
                opt(self.quotients[i]),
                opt(self.errors[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Quotients `∫ h Θ(g - as) dρ_t / ∫ h Θ(g - a) dρ_t` for the Heaviside
/// observable `obs = h Θ(g - ·)`, with `max g = 0` and thresholds `a < 0`.
pub fn evt_quotient(
    family: &dyn MapFamily,
    obs: &Observable,
    s: f64,
    a_list: &[f64],
    t: f64,
    estimator: &EstimatorParams,
) -> Result<EvtQuotient> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::invalid("s", "must lie in (0, 1)"));
    }
    if a_list.iter().any(|&a| !(a < 0.0)) {
        return Err(Error::invalid("a_list", "thresholds must be negative"));
    }
    if a_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("a_list", "must increase toward 0"));
    }
    if obs.kind() != ObservableKind::Heaviside {
        return Err(Error::Precondition("the quotient needs a Heaviside observable".into()));
    }
    let thresholded: Vec<Observable> = a_list
        .iter()
        .flat_map(|&a| [obs.with_threshold(a), obs.with_threshold(a * s)])
        .collect();
    let refs: Vec<&Observable> = thresholded.iter().collect();
    let est = estimate_at(family, t, &refs, estimator).map_err(|e| e.at_t(t))?;
    let mut out = EvtQuotient {
        a_values: a_list.to_vec(),
        s,
        quotients: Vec::new(),
        errors: Vec::new(),
        r_a: Vec::new(),
        r_as: Vec::new(),
        stabilization: Vec::new(),
        t,
    };
    for pair in est.chunks(2) {
        let (ra, ras) = (&pair[0], &pair[1]);
        out.r_a.push(ra.value);
        out.r_as.push(ras.value);
        if !(ra.value > 10.0 * ra.error && ra.value > 0.0) {
            out.quotients.push(None);
            out.errors.push(None);
            continue;
        }
        let q = ras.value / ra.value;
        let err = match estimator {
            EstimatorParams::Birkhoff { .. } => {
                // delta method on the per-orbit means
                let lin: Vec<f64> = ras
                    .diagnostics
                    .iter()
                    .zip(&ra.diagnostics)
                    .map(|(b, a)| (b - q * a) / ra.value)
                    .collect();
                mean_and_error(&lin).1
            }
            _ => ra
                .diagnostics
                .iter()
                .zip(&ras.diagnostics)
                .map(|(da, db)| (q - (ras.value - db) / (ra.value - da)).abs())
                .sum(),
        };
        out.quotients.push(Some(q));
        out.errors.push(Some(err));
    }
    let mut prev: Option<f64> = None;
    for q in &out.quotients {
        out.stabilization.push(match (prev, q) {
            (Some(p), Some(q)) => Some((q - p).abs()),
            _ => None,
        });
        if q.is_some() {
            prev = *q;
        }
    }
    Ok(out)
}
