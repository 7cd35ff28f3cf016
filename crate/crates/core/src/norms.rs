//! Fourier-multiplier norms on periodic grids: `H^r_p`, the anisotropic cone
//! norms, mollifier scaling laws and the indicator membership study.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::analysis::linear_fit;
use crate::dynamics::ModelDomain;
use crate::error::{Error, Result};
use crate::observables::{GridFunction, Observable};
use crate::transfer::Mesh;

fn require_periodic(mesh: &Mesh) -> Result<()> {
    if !mesh.domain.is_fully_periodic() {
        return Err(Error::Unsupported("Fourier norms need a fully periodic mesh".into()));
    }
    Ok(())
}

/// In-place N-D FFT (unnormalized both ways), first axis fastest.
fn fft_nd(data: &mut [Complex64], dims: &[usize], inverse: bool) {
    let mut planner = FftPlanner::new();
    let mut stride = 1;
    for &n in dims {
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let block = stride * n;
        // lines along this axis: start offsets `outer * block + inner`
        let starts: Vec<usize> = (0..data.len() / block)
            .flat_map(|o| (0..stride).map(move |i| o * block + i))
            .collect();
        let lines: Vec<Vec<Complex64>> = starts
            .par_iter()
            .map(|&s| {
                let mut line: Vec<Complex64> = (0..n).map(|k| data[s + k * stride]).collect();
                fft.process(&mut line);
                line
            })
            .collect();
        for (s, line) in starts.iter().zip(lines) {
            for (k, v) in line.into_iter().enumerate() {
                data[s + k * stride] = v;
            }
        }
        stride = block;
    }
}

/// Angular frequency vector `2π k / period` of each spectral index.
fn frequencies(mesh: &Mesh) -> Vec<[f64; 3]> {
    let d = mesh.dim();
    (0..mesh.n_cells)
        .map(|c| {
            let idx = mesh.multi_index(c);
            let mut xi = [0.0; 3];
            for a in 0..d {
                let n = mesh.cells_per_dim[a] as i64;
                let j = idx[a] as i64;
                let k = if j <= n / 2 { j } else { j - n };
                xi[a] = TAU * k as f64 / mesh.domain.width(a);
            }
            xi
        })
        .collect()
}

fn norm2(xi: &[f64; 3]) -> f64 {
    xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]
}

/// Applies the real multiplier `m(ξ)` and returns the real part of the result.
fn apply_multiplier(f: &GridFunction, m: impl Fn(&[f64; 3]) -> f64 + Sync) -> Vec<f64> {
    let spec = spectrum(f);
    multiply_and_invert(&f.mesh, &spec, m)
}

fn spectrum(f: &GridFunction) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = f.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(&mut data, &f.mesh.cells_per_dim, false);
    data
}

fn multiply_and_invert(mesh: &Mesh, spec: &[Complex64], m: impl Fn(&[f64; 3]) -> f64 + Sync) -> Vec<f64> {
    let xi = frequencies(mesh);
    let mut data: Vec<Complex64> = spec.par_iter().zip(&xi).map(|(s, x)| s * m(x)).collect();
    fft_nd(&mut data, &mesh.cells_per_dim, true);
    let scale = 1.0 / mesh.n_cells as f64;
    data.iter().map(|z| z.re * scale).collect()
}

/// Cell-volume-weighted discrete `L_p` norm.
pub fn lp_norm(values: &[f64], cell_volume: f64, p: f64) -> f64 {
    if p == 2.0 {
        return (values.iter().map(|v| v * v).sum::<f64>() * cell_volume).sqrt();
    }
    (values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * cell_volume).powf(1.0 / p)
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::invalid("p", "must lie in (1, inf)"));
    }
    Ok(())
}

/// `‖(1 + |ξ|²)^{r/2} f‖_{L_p}` with the multiplier applied spectrally.
pub fn sobolev_norm(f: &GridFunction, r: f64, p: f64) -> Result<f64> {
    require_periodic(&f.mesh)?;
    check_p(p)?;
    let g = apply_multiplier(f, |xi| (1.0 + norm2(xi)).powf(r / 2.0));
    Ok(lp_norm(&g, f.mesh.cell_volume, p))
}

/// Share of the multiplier-weighted energy carried by the top quarter of the
/// spectrum (per axis). Above 1% the `p != 2` norms are aliasing-limited.
pub fn aliasing_fraction(f: &GridFunction, r: f64) -> Result<f64> {
    require_periodic(&f.mesh)?;
    let spec = spectrum(f);
    let mesh = &f.mesh;
    let (mut top, mut total) = (0.0, 0.0);
    for (c, s) in spec.iter().enumerate() {
        let idx = mesh.multi_index(c);
        let mut xi = [0.0; 3];
        let mut high = false;
        for a in 0..mesh.dim() {
            let n = mesh.cells_per_dim[a];
            let k = if idx[a] <= n / 2 { idx[a] } else { n - idx[a] };
            high |= 4 * k > (3 * n) / 2;
            xi[a] = TAU * k as f64 / mesh.domain.width(a);
        }
        let e = s.norm_sqr() * (1.0 + norm2(&xi)).powf(r);
        total += e;
        if high {
            top += e;
        }
    }
    Ok(if total > 0.0 { top / total } else { 0.0 })
}

/// Smooth cutoff between the unstable and stable frequency cones of a 2D
/// system. Cones are symmetric under `ξ -> -ξ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeSystem {
    /// Direction (radians) of the unstable cone axis in frequency space.
    pub unstable_axis: f64,
    /// Half-aperture of the closed sector where `φ₊ = 1`.
    pub half_aperture: f64,
    /// Angular width of the transition; `φ₊ = 0` beyond `half_aperture + width`.
    pub transition_width: f64,
}

pub const DEFAULT_TRANSITION: f64 = 10.0 * PI / 180.0;

impl ConeSystem {
    pub fn new(unstable_axis: f64, half_aperture: f64, transition_width: f64) -> Result<Self> {
        if !(half_aperture >= 0.0 && transition_width > 0.0 && half_aperture + transition_width < PI / 2.0) {
            return Err(Error::invalid(
                "half_aperture",
                "need half_aperture >= 0, width > 0 and their sum below pi/2",
            ));
        }
        Ok(Self {
            unstable_axis,
            half_aperture,
            transition_width,
        })
    }

    /// Angle between the line through `ξ` and the unstable axis, in `[0, π/2]`.
    pub fn axis_distance(&self, angle: f64) -> f64 {
        let d = (angle - self.unstable_axis).rem_euclid(PI);
        d.min(PI - d)
    }

    pub fn phi_plus(&self, angle: f64) -> f64 {
        let d = self.axis_distance(angle);
        if d <= self.half_aperture {
            return 1.0;
        }
        let s = (d - self.half_aperture) / self.transition_width;
        if s >= 1.0 {
            return 0.0;
        }
        1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }

    pub fn phi_minus(&self, angle: f64) -> f64 {
        1.0 - self.phi_plus(angle)
    }

    /// Whether the direction lies in the closed stable sector (`φ₊ = 0`).
    pub fn in_stable_sector(&self, angle: f64) -> bool {
        self.axis_distance(angle) >= self.half_aperture + self.transition_width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnisotropicNorm {
    pub total: f64,
    pub plus_part: f64,
    pub minus_part: f64,
}

/// `‖Ψ_{u,+} f‖_p + ‖Ψ_{s,-} f‖_p` with `Ψ_{u,+}(ξ) = (1+|ξ|²)^{u/2} φ₊(ξ/|ξ|)`
/// and `Ψ_{s,-}(ξ) = (1+|ξ|²)^{s/2} φ₋(ξ/|ξ|)`; `ξ = 0` goes to the plus part.
pub fn anisotropic_norm(f: &GridFunction, cones: &ConeSystem, u: f64, s: f64, p: f64) -> Result<AnisotropicNorm> {
    require_periodic(&f.mesh)?;
    if f.mesh.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: f.mesh.dim(),
        });
    }
    check_p(p)?;
    if !(u >= 0.0) || !(s <= 0.0) {
        return Err(Error::invalid("u, s", "need u >= 0 and s <= 0"));
    }
    let spec = spectrum(f);
    let plus = multiply_and_invert(&f.mesh, &spec, |xi| {
        let n = norm2(xi);
        if n == 0.0 {
            1.0
        } else {
            (1.0 + n).powf(u / 2.0) * cones.phi_plus(xi[1].atan2(xi[0]))
        }
    });
    let minus = multiply_and_invert(&f.mesh, &spec, |xi| {
        let n = norm2(xi);
        if n == 0.0 {
            0.0
        } else {
            (1.0 + n).powf(s / 2.0) * cones.phi_minus(xi[1].atan2(xi[0]))
        }
    });
    let plus_part = lp_norm(&plus, f.mesh.cell_volume, p);
    let minus_part = lp_norm(&minus, f.mesh.cell_volume, p);
    Ok(AnisotropicNorm {
        total: plus_part + minus_part,
        plus_part,
        minus_part,
    })
}

/// Discrete kernel `η_ε` sampled at grid offsets (normalized), as a grid
/// function centered at the origin cell.
fn kernel_on_grid(mesh: &Mesh, eps: f64) -> Vec<f64> {
    let d = mesh.dim();
    let bump = |v: f64| if v.abs() < 1.0 { (-1.0 / (1.0 - v * v)).exp() } else { 0.0 };
    let mut k: Vec<f64> = (0..mesh.n_cells)
        .map(|c| {
            let idx = mesh.multi_index(c);
            (0..d)
                .map(|a| {
                    let n = mesh.cells_per_dim[a] as i64;
                    let j = idx[a] as i64;
                    let off = if j <= n / 2 { j } else { j - n };
                    bump(off as f64 * mesh.cell_width(a) / eps)
                })
                .product()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Circular convolution with the sampled kernel `η_ε` (FFT).
pub fn mollify_grid(f: &GridFunction, eps: f64) -> Result<GridFunction> {
    require_periodic(&f.mesh)?;
    let min_cells = f.mesh.cells_per_dim.iter().copied().min().unwrap_or(0);
    let widths = (0..f.mesh.dim()).map(|a| f.mesh.domain.width(a)).fold(f64::INFINITY, f64::min);
    if !(eps > 0.0 && eps < widths / 4.0) || min_cells < 4 {
        return Err(Error::invalid("eps", format!("must lie in (0, {})", widths / 4.0)));
    }
    let kernel = GridFunction::new(f.mesh.clone(), kernel_on_grid(&f.mesh, eps))?;
    let ks = spectrum(&kernel);
    let fs = spectrum(f);
    let mut prod: Vec<Complex64> = fs.iter().zip(&ks).map(|(a, b)| a * b).collect();
    fft_nd(&mut prod, &f.mesh.cells_per_dim, true);
    let scale = 1.0 / f.mesh.n_cells as f64;
    GridFunction::new(f.mesh.clone(), prod.iter().map(|z| z.re * scale).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub eps: Vec<f64>,
    /// `‖M_ε θ - θ‖_{H^{r̃}_p}` per scale.
    pub approx_norms: Vec<f64>,
    /// `‖M_ε θ‖_{H^{1+r̃}_p}` per scale.
    pub blowup_norms: Vec<f64>,
    pub approx_slope: f64,
    pub smooth_blowup_slope: f64,
    /// `r - r̃` and `r - 1 - r̃`.
    pub expected_approx_slope: f64,
    pub expected_blowup_slope: f64,
    /// The approximation error decays at least like `ε`: no singularity seen.
    pub smooth_input: bool,
}

/// Fits the two mollifier scaling laws in log-log coordinates.
pub fn verify_scaling(obs: &Observable, r: f64, r_tilde: f64, p: f64, eps_list: &[f64], mesh: &Mesh) -> Result<ScalingFit> {
    require_periodic(mesh)?;
    check_p(p)?;
    if !(0.0 < r_tilde && r_tilde < r && r < 1.0 / p) {
        return Err(Error::invalid("r_tilde", "need 0 < r_tilde < r < 1/p"));
    }
    if eps_list.len() < 4 {
        return Err(Error::invalid("eps_list", "need at least 4 scales"));
    }
    let ratio = eps_list[1] / eps_list[0];
    if eps_list.iter().any(|&e| !(e > 0.0))
        || eps_list.windows(2).any(|w| ((w[1] / w[0]) / ratio - 1.0).abs() > 1e-6)
        || ratio == 1.0
    {
        return Err(Error::invalid("eps_list", "must be a geometric sequence of positive scales"));
    }
    let theta = GridFunction::sample(obs, mesh);
    let mut approx = Vec::new();
    let mut blowup = Vec::new();
    for &eps in eps_list {
        let m = mollify_grid(&theta, eps)?;
        let diff = GridFunction::new(mesh.clone(), m.values.iter().zip(&theta.values).map(|(a, b)| a - b).collect())?;
        approx.push(sobolev_norm(&diff, r_tilde, p)?);
        blowup.push(sobolev_norm(&m, 1.0 + r_tilde, p)?);
    }
    let usable = |v: &[f64]| -> (Vec<f64>, Vec<f64>) {
        eps_list
            .iter()
            .zip(v)
            .filter(|(_, &n)| n.is_finite() && n > 1e-13)
            .map(|(e, n)| (e.ln(), n.ln()))
            .unzip()
    };
    let (xa, ya) = usable(&approx);
    let (xb, yb) = usable(&blowup);
    let smooth_floor = xa.len() < 3;
    if xb.len() < 3 {
        return Err(Error::Precondition("degenerate fit: fewer than 3 usable scales".into()));
    }
    let approx_slope = if smooth_floor { f64::NAN } else { linear_fit(&xa, &ya).slope };
    let smooth_blowup_slope = linear_fit(&xb, &yb).slope;
    Ok(ScalingFit {
        eps: eps_list.to_vec(),
        approx_norms: approx,
        blowup_norms: blowup,
        approx_slope,
        smooth_blowup_slope,
        expected_approx_slope: r - r_tilde,
        expected_blowup_slope: r - 1.0 - r_tilde,
        smooth_input: smooth_floor || approx_slope >= 1.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipRow {
    pub r: f64,
    pub resolution: usize,
    pub norm: f64,
}

/// `H^r_p` norm of the indicator of `[0, 1/2)` on the circle, per `r` and
/// resolution.
pub fn indicator_membership_study(r_list: &[f64], p: f64, resolutions: &[usize]) -> Result<Vec<MembershipRow>> {
    check_p(p)?;
    let mut rows = Vec::new();
    for &n in resolutions {
        let mesh = Mesh::uniform(ModelDomain::circle(), n)?;
        let values = (0..n).map(|c| if mesh.center(c)[0] < 0.5 { 1.0 } else { 0.0 }).collect();
        let f = GridFunction::new(mesh, values)?;
        for &r in r_list {
            rows.push(MembershipRow {
                r,
                resolution: n,
                norm: sobolev_norm(&f, r, p)?,
            });
        }
    }
    Ok(rows)
}

/// Slope of `log2 norm` against `log2 resolution` for one `r`.
pub fn membership_slope(rows: &[MembershipRow], r: f64) -> f64 {
    let (x, y): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|row| row.r == r)
        .map(|row| ((row.resolution as f64).log2(), row.norm.log2()))
        .unzip();
    linear_fit(&x, &y).slope
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::make_builtin_observable;
    use crate::params::Params;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn grid(n: &[usize], f: impl Fn(f64, f64) -> f64) -> GridFunction {
        let dom = if n.len() == 1 { ModelDomain::circle() } else { ModelDomain::torus2() };
        let mesh = Mesh::new(dom, n).unwrap();
        let values = (0..mesh.n_cells)
            .map(|c| {
                let x = mesh.center(c);
                f(x[0], x[1])
            })
            .collect();
        GridFunction::new(mesh, values).unwrap()
    }

    fn params(kv: &[(&str, f64)]) -> Params {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn sobolev_examples() {
        let c = grid(&[16, 8], |_, _| -1.7);
        for (r, p) in [(0.0, 2.0), (0.7, 2.0), (1.5, 3.0)] {
            assert!((sobolev_norm(&c, r, p).unwrap() - 1.7).abs() < 1e-12);
        }
        let s = grid(&[256], |x, _| (TAU * x).sin());
        for r in [0.0, 0.3, 1.0, 2.0] {
            let expected = (1.0 + 4.0 * PI * PI).powf(r / 2.0) / 2f64.sqrt();
            assert!((sobolev_norm(&s, r, 2.0).unwrap() - expected).abs() < 1e-10);
        }
        let f = grid(&[32, 32], |x, y| (x - 0.3).abs() + y * y);
        for p in [1.5, 2.0, 4.0] {
            let direct = lp_norm(&f.values, f.mesh.cell_volume, p);
            assert!((sobolev_norm(&f, 0.0, p).unwrap() - direct).abs() < 1e-12);
        }
        let cyl = Mesh::uniform(ModelDomain::cylinder2(0.0, 1.0), 8).unwrap();
        assert!(sobolev_norm(&GridFunction::new(cyl, vec![0.0; 64]).unwrap(), 0.5, 2.0).is_err());
    }

    #[test]
    fn plancherel_at_p2() {
        let f = grid(&[64, 32], |x, y| ((3.0 * x).sin() + (TAU * y).cos() * x).exp());
        let r = 0.8;
        let spec = spectrum(&f);
        let xi = frequencies(&f.mesh);
        let n = f.mesh.n_cells as f64;
        let sum: f64 = spec.iter().zip(&xi).map(|(s, x)| s.norm_sqr() * (1.0 + norm2(x)).powf(r)).sum();
        let plancherel = (sum / (n * n)).sqrt();
        assert!((sobolev_norm(&f, r, 2.0).unwrap() - plancherel).abs() < 1e-10 * plancherel);
    }

    #[test]
    fn multiplier_composition_is_identity() {
        let f = grid(&[32, 16], |x, y| if x > 0.4 { 1.0 + y } else { -y });
        let up = GridFunction::new(f.mesh.clone(), apply_multiplier(&f, |xi| (1.0 + norm2(xi)).powf(0.35))).unwrap();
        let back = apply_multiplier(&up, |xi| (1.0 + norm2(xi)).powf(-0.35));
        for (a, b) in back.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn cone_cutoffs() {
        let cones = ConeSystem::new(0.0, 0.4, DEFAULT_TRANSITION).unwrap();
        for k in 0..720 {
            let a = k as f64 * PI / 360.0;
            let p = cones.phi_plus(a);
            assert!((0.0..=1.0).contains(&p));
            assert_eq!(p + cones.phi_minus(a), 1.0);
            if cones.axis_distance(a) <= 0.4 {
                assert_eq!(p, 1.0);
            }
            if cones.in_stable_sector(a) {
                assert_eq!(p, 0.0);
            }
        }
        assert_eq!(cones.phi_plus(PI), 1.0);
        assert!(ConeSystem::new(0.0, 1.5, 0.2).is_err());
    }

    #[test]
    fn anisotropic_examples() {
        let cones = ConeSystem::new(0.0, PI / 6.0, DEFAULT_TRANSITION).unwrap();
        let h = grid(&[64, 64], |_, y| 0.3 + (-((y - 0.5) / 0.05).powi(2)).exp());
        let mean = h.values.iter().sum::<f64>() / h.values.len() as f64;
        let n = anisotropic_norm(&h, &cones, 0.5, -1.0, 2.0).unwrap();
        assert!((n.plus_part - mean.abs()).abs() < 1e-10, "{n:?} mean {mean}");
        let c = grid(&[16, 16], |_, _| -2.0);
        let n = anisotropic_norm(&c, &cones, 0.7, -1.5, 2.0).unwrap();
        assert!((n.total - 2.0).abs() < 1e-12 && n.minus_part < 1e-12);

        // triangle bounds with u = s = 0
        let f = grid(&[64, 64], |x, y| if x > 0.5 { (TAU * y).sin() } else { 0.2 });
        let n = anisotropic_norm(&f, &cones, 0.0, 0.0, 2.0).unwrap();
        let l2 = lp_norm(&f.values, f.mesh.cell_volume, 2.0);
        assert!(n.plus_part.max(n.minus_part) <= n.total + 1e-12);
        assert!(l2 <= n.plus_part + n.minus_part + 1e-12);
        let r1 = ModelDomain::circle();
        let one_d = GridFunction::new(Mesh::uniform(r1, 8).unwrap(), vec![0.0; 8]).unwrap();
        assert!(anisotropic_norm(&one_d, &cones, 0.0, 0.0, 2.0).is_err());
    }

    #[test]
    fn stable_part_of_step_times_bump_is_refinement_stable() {
        let cones = ConeSystem::new(0.0, PI / 4.0 - DEFAULT_TRANSITION, DEFAULT_TRANSITION).unwrap();
        let f = |x: f64, y: f64| if x > 0.5 { (-((y - 0.5) / 0.05).powi(2)).exp() } else { 0.0 };
        let vals: Vec<f64> = [128, 256, 512]
            .iter()
            .map(|&n| anisotropic_norm(&grid(&[n, n], f), &cones, 0.0, -1.5, 2.0).unwrap().minus_part)
            .collect();
        assert!(vals.iter().all(|v| v.is_finite() && *v > 0.0));
        assert!((vals[1] / vals[0] - 1.0).abs() < 0.1 && (vals[2] / vals[1] - 1.0).abs() < 0.1, "{vals:?}");
    }

    #[test]
    fn membership_study() {
        let rows = indicator_membership_study(&[0.0, 0.4, 0.6], 2.0, &[1024, 2048, 4096, 8192, 16384]).unwrap();
        for row in rows.iter().filter(|r| r.r == 0.0) {
            assert!((row.norm - 0.5f64.sqrt()).abs() < 1e-12);
        }
        let r04: Vec<f64> = rows.iter().filter(|r| r.r == 0.4).map(|r| r.norm).collect();
        let (lo, hi) = r04.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo < 1.05, "{r04:?}");
        let slope = membership_slope(&rows, 0.6);
        assert!((slope - 0.1).abs() < 0.03, "{slope}");
    }

    #[test]
    fn step_scaling_laws() {
        let circle = ModelDomain::circle();
        let stepf = make_builtin_observable("coordinate_threshold", &params(&[("a", 0.5)]), &circle).unwrap();
        let mesh = Mesh::uniform(circle.clone(), 1 << 16).unwrap();
        let eps: Vec<f64> = (0..5).map(|k| 0.04 / 2f64.powi(k)).collect();
        let fit = verify_scaling(&stepf, 0.49, 0.25, 2.0, &eps, &mesh).unwrap();
        assert!((fit.approx_slope - 0.25).abs() < 0.05, "{fit:?}");
        assert!((fit.smooth_blowup_slope + 0.75).abs() < 0.1, "{fit:?}");
        assert!(!fit.smooth_input);

        let trig = make_builtin_observable("trig", &Params::new(), &circle).unwrap();
        let small = Mesh::uniform(circle, 4096).unwrap();
        let fit = verify_scaling(&trig, 0.49, 0.25, 2.0, &eps, &small).unwrap();
        assert!(fit.smooth_input, "{fit:?}");

        assert!(verify_scaling(&stepf, 0.4, 0.45, 2.0, &eps, &small).is_err());
        assert!(verify_scaling(&stepf, 0.49, 0.25, 2.0, &eps[..3], &small).is_err());
    }

    #[test]
    fn mollify_grid_matches_quadrature() {
        let circle = ModelDomain::circle();
        let mesh = Mesh::uniform(circle.clone(), 2048).unwrap();
        let obs = Observable::smooth(Arc::new(|x| (TAU * x[0]).sin() + (3.0 * TAU * x[0]).cos()), None);
        let a = mollify_grid(&GridFunction::sample(&obs, &mesh), 0.05).unwrap();
        let b = crate::observables::mollify(&obs, 0.05, &mesh).unwrap();
        for (x, y) in a.values.iter().zip(&b.grid.values) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sobolev_norm_monotone_in_r(
            vals in proptest::collection::vec(-1.0f64..1.0, 64),
            r1 in -1.0f64..2.0,
            dr in 0.0f64..1.0,
        ) {
            let mean = vals.iter().sum::<f64>() / 64.0;
            let mesh = Mesh::uniform(ModelDomain::circle(), 64).unwrap();
            let f = GridFunction::new(mesh, vals.iter().map(|v| v - mean).collect()).unwrap();
            let a = sobolev_norm(&f, r1, 2.0).unwrap();
            let b = sobolev_norm(&f, r1 + dr, 2.0).unwrap();
            prop_assert!(b >= a * (1.0 - 1e-12));
        }
    }
}
