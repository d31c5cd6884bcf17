//! Closed-form marginal quantities for a standard normal prior transported to
//! an isotropic Gaussian mixture under independent coupling and straight
//! interpolation paths.
//!
//! For component `k` with mean `m_k` and std `s_k`, `x_t` given `k` is
//! `N(t m_k, sigma_k^2 I)` with `sigma_k^2 = (1 - t)^2 + t^2 s_k^2`, and
//! `u = x1 - x0` given `(x_t, k)` is Gaussian with
//!
//! ```text
//! mean  m_k + (t s_k^2 - (1 - t)) / sigma_k^2 * (x - t m_k)
//! var   s_k^2 / sigma_k^2  (per coordinate)
//! ```
//!
//! Mixing over the component posterior gives the marginal velocity and the
//! conditional covariance of `u` by the law of total variance.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::points::Points;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("invalid mixture: {0}")]
    InvalidSpec(String),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("point has dimension {found}, mixture has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("density {density:e} at x = {x:?}, t = {t} is below the support floor {floor:e}")]
    OutOfSupport { x: Vec<f64>, t: f64, density: f64, floor: f64 },
    #[error("the fundamental-limit check is one-dimensional")]
    NotOneDimensional,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmSpec {
    weights: Vec<f64>,
    means: Points,
    stds: Vec<f64>,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Points, stds: Vec<f64>) -> Result<Self, OracleError> {
        let bad = |m: &str| Err(OracleError::InvalidSpec(m.to_string()));
        let k = weights.len();
        if k == 0 {
            return bad("need at least one component");
        }
        if means.len() != k || stds.len() != k {
            return bad("weights, means and stds must have equal length");
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return bad("weights must be non-negative and sum to 1");
        }
        if stds.iter().any(|s| !(*s > 0.0 && s.is_finite())) || !means.all_finite() {
            return bad("stds must be positive and means finite");
        }
        Ok(Self { weights, means, stds })
    }

    /// Equal-weight one-dimensional mixture.
    pub fn one_dim(means: &[f64], stds: &[f64]) -> Result<Self, OracleError> {
        let k = means.len();
        Self::new(vec![1.0 / k as f64; k], Points::new(1, means.to_vec()), stds.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.means.dim()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Points {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    fn check(&self, x: &[f64], t: f64) -> Result<(), OracleError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(OracleError::TimeOutOfRange(t));
        }
        if x.len() != self.dim() {
            return Err(OracleError::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        Ok(())
    }

    fn variance(&self, k: usize, t: f64) -> f64 {
        let s = self.stds[k];
        (1.0 - t).powi(2) + t * t * s * s
    }

    /// `ln(w_k N(x; t m_k, sigma_k^2 I))` per component.
    fn log_joint(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.dim() as f64;
        (0..self.components())
            .map(|k| {
                let var = self.variance(k, t);
                let sq: f64 = x.iter().zip(self.means.row(k)).map(|(xi, m)| (xi - t * m).powi(2)).sum();
                self.weights[k].ln() - 0.5 * d * (2.0 * PI * var).ln() - 0.5 * sq / var
            })
            .collect()
    }

    /// Posterior mean of `u` within component `k`.
    fn component_velocity(&self, k: usize, x: &[f64], t: f64) -> Vec<f64> {
        let s2 = self.stds[k].powi(2);
        let c = (t * s2 - (1.0 - t)) / self.variance(k, t);
        self.means.row(k).iter().zip(x).map(|(m, xi)| m + c * (xi - t * m)).collect()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Component responsibilities at `(x, t)`.
pub fn responsibilities(spec: &GmmSpec, x: &[f64], t: f64) -> Result<Vec<f64>, OracleError> {
    spec.check(x, t)?;
    let lj = spec.log_joint(x, t);
    let lse = log_sum_exp(&lj);
    Ok(lj.iter().map(|l| (l - lse).exp()).collect())
}

/// `p(x, t)`: mixture of `N(t m_k, sigma_k^2 I)`.
pub fn marginal_density(spec: &GmmSpec, x: &[f64], t: f64) -> Result<f64, OracleError> {
    spec.check(x, t)?;
    Ok(log_sum_exp(&spec.log_joint(x, t)).exp())
}

/// `v(x, t) = E[x1 - x0 | x_t = x]`.
pub fn marginal_velocity(spec: &GmmSpec, x: &[f64], t: f64) -> Result<Vec<f64>, OracleError> {
    Ok(velocity_parts(spec, x, t)?.0)
}

type Parts = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

/// Marginal velocity, responsibilities and per-component posterior means.
fn velocity_parts(spec: &GmmSpec, x: &[f64], t: f64) -> Result<Parts, OracleError> {
    let r = responsibilities(spec, x, t)?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(OracleError::OutOfSupport { x: x.to_vec(), t, density: 0.0, floor: 0.0 });
    }
    let vk: Vec<Vec<f64>> = (0..spec.components()).map(|k| spec.component_velocity(k, x, t)).collect();
    let mut v = vec![0.0; spec.dim()];
    for (rk, vk) in r.iter().zip(&vk) {
        for (a, b) in v.iter_mut().zip(vk) {
            *a += rk * b;
        }
    }
    Ok((v, r, vk))
}

/// `Sigma(x, t) = Cov(u | x_t = x)`, row-major `d x d`.
pub fn conditional_variance(spec: &GmmSpec, x: &[f64], t: f64) -> Result<Vec<f64>, OracleError> {
    let (within, between) = variance_terms(spec, x, t)?;
    Ok(within.iter().zip(&between).map(|(a, b)| a + b).collect())
}

/// Within-component and between-component parts of `Sigma`, each `d x d`.
pub fn variance_terms(spec: &GmmSpec, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>), OracleError> {
    let (v, r, vk) = velocity_parts(spec, x, t)?;
    let d = spec.dim();
    let mut within = vec![0.0; d * d];
    let mut between = vec![0.0; d * d];
    for k in 0..spec.components() {
        let w = r[k] * spec.stds[k].powi(2) / spec.variance(k, t);
        for i in 0..d {
            within[i * d + i] += w;
            for j in 0..d {
                between[i * d + j] += r[k] * (vk[k][i] - v[i]) * (vk[k][j] - v[j]);
            }
        }
    }
    Ok((within, between))
}

/// Smallest eigenvalue of a symmetric row-major matrix.
pub fn min_eigenvalue(d: usize, m: &[f64]) -> f64 {
    let mat = DMatrix::from_row_slice(d, d, m);
    mat.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

pub const DEFAULT_DENSITY_FLOOR: f64 = 1e-15;
pub const RESIDUAL_DELTA: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualRow {
    pub x: f64,
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    pub rows: Vec<ResidualRow>,
    pub max_residual: f64,
}

impl ResidualReport {
    fn from_rows(rows: Vec<ResidualRow>) -> Self {
        let max_residual = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
        Self { rows, max_residual }
    }

    /// Largest `|lhs|` among rows at time `t`.
    pub fn max_abs_lhs_at(&self, t: f64) -> f64 {
        self.rows.iter().filter(|r| (r.t - t).abs() < 1e-12).map(|r| r.lhs.abs()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,t,lhs,rhs,residual")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.x, r.t, r.lhs, r.rhs, r.residual)?;
        }
        Ok(())
    }
}

/// Central-difference stencil width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
    FivePoint,
}

/// Finite-difference steps, stencil and support floor for the residual checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdSteps {
    pub h_x: f64,
    pub h_t: f64,
    pub stencil: Stencil,
    pub density_floor: f64,
}

impl Default for FdSteps {
    fn default() -> Self {
        Self { h_x: 1e-4, h_t: 1e-4, stencil: Stencil::FivePoint, density_floor: DEFAULT_DENSITY_FLOOR }
    }
}

impl FdSteps {
    fn reach(&self) -> f64 {
        match self.stencil {
            Stencil::ThreePoint => self.h_t,
            Stencil::FivePoint => 2.0 * self.h_t,
        }
    }
}

fn central_diff(f: impl Fn(f64) -> Result<f64, OracleError>, a: f64, h: f64, stencil: Stencil) -> Result<f64, OracleError> {
    Ok(match stencil {
        Stencil::ThreePoint => (f(a + h)? - f(a - h)?) / (2.0 * h),
        Stencil::FivePoint => {
            let near = f(a + h)? - f(a - h)?;
            let far = f(a + 2.0 * h)? - f(a - 2.0 * h)?;
            (8.0 * near - far) / (12.0 * h)
        }
    })
}

fn relative_residual(lhs: f64, rhs: f64) -> f64 {
    (lhs - rhs).abs() / (lhs.abs() + rhs.abs() + RESIDUAL_DELTA)
}

fn scalar_field<F>(f: F) -> impl Fn(f64, f64) -> Result<f64, OracleError>
where
    F: Fn(&[f64], f64) -> Result<f64, OracleError>,
{
    move |x, t| f(&[x], t)
}

fn check_support(spec: &GmmSpec, x: f64, t: f64, floor: f64) -> Result<f64, OracleError> {
    let p = marginal_density(spec, &[x], t)?;
    if !(p >= floor) {
        return Err(OracleError::OutOfSupport { x: vec![x], t, density: p, floor });
    }
    Ok(p)
}

fn grid_check(
    spec: &GmmSpec,
    xs: &[f64],
    ts: &[f64],
    steps: FdSteps,
    mut sides: impl FnMut(f64, f64, f64) -> Result<(f64, f64), OracleError>,
) -> Result<ResidualReport, OracleError> {
    if spec.dim() != 1 {
        return Err(OracleError::NotOneDimensional);
    }
    let mut rows = Vec::with_capacity(xs.len() * ts.len());
    for &t in ts {
        if t - steps.reach() < 0.0 || t + steps.reach() > 1.0 {
            return Err(OracleError::TimeOutOfRange(t));
        }
        for &x in xs {
            let p = check_support(spec, x, t, steps.density_floor)?;
            let (lhs, rhs) = sides(x, t, p)?;
            rows.push(ResidualRow { x, t, lhs, rhs, residual: relative_residual(lhs, rhs) });
        }
    }
    Ok(ResidualReport::from_rows(rows))
}

/// Checks `dv/dt + v dv/dx = -(1/p) d(p Sigma)/dx` on a 1D grid with central
/// differences of the closed-form field.
pub fn check_fundamental_limit(
    spec: &GmmSpec,
    xs: &[f64],
    ts: &[f64],
    steps: FdSteps,
) -> Result<ResidualReport, OracleError> {
    let v = scalar_field(|x, t| Ok(marginal_velocity(spec, x, t)?[0]));
    let p_sigma = scalar_field(|x, t| Ok(marginal_density(spec, x, t)? * conditional_variance(spec, x, t)?[0]));
    let (hx, ht, st) = (steps.h_x, steps.h_t, steps.stencil);
    grid_check(spec, xs, ts, steps, |x, t, p| {
        let dv_dt = central_diff(|s| v(x, s), t, ht, st)?;
        let dv_dx = central_diff(|y| v(y, t), x, hx, st)?;
        let lhs = dv_dt + v(x, t)? * dv_dx;
        let rhs = -central_diff(|y| p_sigma(y, t), x, hx, st)? / p;
        Ok((lhs, rhs))
    })
}

/// Continuity equation `dp/dt + d(p v)/dx = 0`. Rows report `lhs = dp/dt`
/// and `rhs = -d(p v)/dx`.
pub fn check_continuity(
    spec: &GmmSpec,
    xs: &[f64],
    ts: &[f64],
    steps: FdSteps,
) -> Result<ResidualReport, OracleError> {
    let p = scalar_field(|x, t| marginal_density(spec, x, t));
    let flux = scalar_field(|x, t| Ok(marginal_density(spec, x, t)? * marginal_velocity(spec, x, t)?[0]));
    let (hx, ht, st) = (steps.h_x, steps.h_t, steps.stencil);
    grid_check(spec, xs, ts, steps, |x, t, _| {
        let dp_dt = central_diff(|s| p(x, s), t, ht, st)?;
        let dflux_dx = central_diff(|y| flux(y, t), x, hx, st)?;
        Ok((dp_dt, -dflux_dx))
    })
}

/// `n` evenly spaced values from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn standard() -> GmmSpec {
        GmmSpec::one_dim(&[0.0], &[1.0]).unwrap()
    }

    fn two_modes() -> GmmSpec {
        GmmSpec::one_dim(&[-2.0, 2.0], &[0.3, 0.3]).unwrap()
    }

    /// Draws `(x_t, u)` pairs from the 1D mixture by simulation.
    fn simulate(spec: &GmmSpec, t: f64, n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut k = 0;
                let mut acc = spec.weights()[0];
                while u > acc && k + 1 < spec.components() {
                    k += 1;
                    acc += spec.weights()[k];
                }
                let x0: f64 = rng.sample(StandardNormal);
                let z: f64 = rng.sample(StandardNormal);
                let x1 = spec.means().row(k)[0] + spec.stds()[k] * z;
                ((1.0 - t) * x0 + t * x1, x1 - x0)
            })
            .collect()
    }

    #[test]
    fn spec_validation() {
        assert!(GmmSpec::new(vec![0.5, 0.4], Points::new(1, vec![0.0, 1.0]), vec![1.0, 1.0]).is_err());
        assert!(GmmSpec::one_dim(&[0.0], &[0.0]).is_err());
        assert!(GmmSpec::one_dim(&[], &[]).is_err());
    }

    #[test]
    fn self_map_density_is_standard_normal() {
        let s = standard();
        for t in [0.0f64, 0.2, 0.5, 0.9, 1.0] {
            for x in [-1.5f64, 0.0, 0.7] {
                let var: f64 = (1.0 - t).powi(2) + t * t;
                let expected = (-x * x / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
                assert!((marginal_density(&s, &[x], t).unwrap() - expected).abs() < 1e-14);
            }
        }
        let p0 = marginal_density(&two_modes(), &[0.4], 0.0).unwrap();
        assert!((p0 - (-0.08f64).exp() / (2.0 * PI).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one() {
        let spec = two_modes();
        let xs = linspace(-12.0, 12.0, 24_001);
        let h = xs[1] - xs[0];
        for t in linspace(0.1, 0.9, 9).into_iter().chain([0.0, 1.0]) {
            let vals: Vec<f64> = xs.iter().map(|&x| marginal_density(&spec, &[x], t).unwrap()).collect();
            let total = h * (vals.iter().sum::<f64>() - 0.5 * (vals[0] + vals[vals.len() - 1]));
            assert!((total - 1.0).abs() < 1e-6, "t={t}: {total}");
        }
    }

    #[test]
    fn density_matches_monte_carlo_histogram() {
        let spec = two_modes();
        let t = 0.6;
        let n = 1_000_000;
        let samples = simulate(&spec, t, n, 1);
        let width = 0.05;
        let mut worst: f64 = 0.0;
        for c in linspace(-1.6, 1.6, 17).iter().map(|c| c.signum() * 1.2 + c * 0.1) {
            let count = samples.iter().filter(|(x, _)| (x - c).abs() < width / 2.0).count();
            let p = marginal_density(&spec, &[c], t).unwrap();
            let empirical = count as f64 / (n as f64 * width);
            worst = worst.max((empirical - p).abs() / p);
        }
        assert!(worst < 0.03, "{worst}");
    }

    #[test]
    fn symmetric_velocities_vanish() {
        for t in [0.1, 0.5, 0.9] {
            assert_eq!(marginal_velocity(&standard(), &[0.0], t).unwrap(), vec![0.0]);
            assert!(marginal_velocity(&two_modes(), &[0.0], t).unwrap()[0].abs() < 1e-15);
        }
    }

    #[test]
    fn velocity_matches_monte_carlo_conditional_mean() {
        let spec = GmmSpec::one_dim(&[5.0], &[1.0]).unwrap();
        let (t, x) = (0.5, 2.5);
        let samples = simulate(&spec, t, 10_000_000, 2);
        let sel: Vec<f64> = samples.iter().filter(|(xt, _)| (xt - x).abs() < 0.005).map(|s| s.1).collect();
        let n = sel.len() as f64;
        let mean = sel.iter().sum::<f64>() / n;
        let var = sel.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let v = marginal_velocity(&spec, &[x], t).unwrap()[0];
        assert!((mean - v).abs() < 3.0 * (var / n).sqrt(), "mc {mean} vs {v}");
        // conditional variance check on the same bin
        let sigma = conditional_variance(&spec, &[x], t).unwrap()[0];
        assert!((var - sigma).abs() < 0.03 * sigma, "mc var {var} vs {sigma}");
    }

    #[test]
    fn mixture_moments_match_monte_carlo() {
        let spec = two_modes();
        for (t, x) in [(0.3, 0.2), (0.6, 1.0), (0.5, -0.3)] {
            let samples = simulate(&spec, t, 4_000_000, 3);
            let sel: Vec<f64> = samples.iter().filter(|(xt, _)| (xt - x).abs() < 0.005).map(|s| s.1).collect();
            let n = sel.len() as f64;
            let mean = sel.iter().sum::<f64>() / n;
            let var = sel.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let v = marginal_velocity(&spec, &[x], t).unwrap()[0];
            let sigma = conditional_variance(&spec, &[x], t).unwrap()[0];
            // bin-width bias is negligible next to 4 standard errors here
            assert!((mean - v).abs() < 4.0 * (var / n).sqrt(), "t={t} x={x}: mc {mean} vs {v}");
            assert!((var - sigma).abs() < 0.1 * sigma, "t={t} x={x}: mc var {var} vs {sigma}");
        }
    }

    #[test]
    fn variance_shrinks_as_target_collapses() {
        let mut prev = f64::INFINITY;
        for s in [1.0, 0.5, 0.1, 0.01, 0.001] {
            let spec = GmmSpec::one_dim(&[1.0], &[s]).unwrap();
            let sigma = conditional_variance(&spec, &[0.3], 0.6).unwrap()[0];
            assert!(sigma < prev);
            prev = sigma;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn between_component_spread_dominates_early() {
        let spec = two_modes();
        let (within, between) = variance_terms(&spec, &[0.0], 0.01).unwrap();
        let total = conditional_variance(&spec, &[0.0], 0.01).unwrap();
        assert!(between[0] > within[0]);
        assert!(total[0] - between[0] >= 0.0);
        let spec2 = GmmSpec::new(
            vec![0.25; 4],
            Points::from_rows(&[[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0], [0.3, -1.0]]),
            vec![0.3, 0.5, 0.2, 0.4],
        )
        .unwrap();
        for (x, t) in [([0.1, -0.2], 0.01), ([1.0, 1.0], 0.5), ([-3.0, 0.5], 0.95)] {
            let (w, b) = variance_terms(&spec2, &x, t).unwrap();
            let total: Vec<f64> = w.iter().zip(&b).map(|(a, c)| a + c).collect();
            assert_eq!(total[1], total[2]);
            assert!(min_eigenvalue(2, &total) >= -1e-10);
            let diff: Vec<f64> = total.iter().zip(&b).map(|(a, c)| a - c).collect();
            assert!(min_eigenvalue(2, &diff) >= -1e-12);
        }
    }

    #[test]
    fn late_time_posterior_collapse() {
        // the component label becomes certain near t = 1, so the
        // between-component spread vanishes; the within part tends to the
        // prior variance because x0 stays unknown given x1
        let spec = two_modes();
        let mut prev = f64::INFINITY;
        for t in [0.6, 0.7, 0.8, 0.9, 0.99] {
            let (w, b) = variance_terms(&spec, &[0.5], t).unwrap();
            assert!(b[0] < prev);
            prev = b[0];
            assert!(w[0] <= 1.0 / (1.0 - t).powi(2) + 1.0);
        }
        assert!(prev < 1e-6, "{prev}");
        let (w, _) = variance_terms(&spec, &[2.0], 1.0).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fundamental_limit_on_standard_spec() {
        let rep = check_fundamental_limit(&standard(), &linspace(-3.0, 3.0, 13), &linspace(0.1, 0.9, 9), FdSteps::default())
            .unwrap();
        assert!(rep.max_residual < 1e-3, "{}", rep.max_residual);
    }

    #[test]
    fn fundamental_limit_on_two_mode_spec() {
        let (xs, ts) = (linspace(-4.0, 4.0, 41), linspace(0.1, 0.9, 9));
        let rep = check_fundamental_limit(&two_modes(), &xs, &ts, FdSteps::default()).unwrap();
        assert!(rep.max_residual < 1e-3, "{}", rep.max_residual);
        assert!(rep.max_abs_lhs_at(0.1) > 0.01);
        let cont = check_continuity(&two_modes(), &xs, &ts, FdSteps::default()).unwrap();
        assert!(cont.max_residual < 1e-3, "{}", cont.max_residual);
    }

    #[test]
    fn continuity_on_standard_spec() {
        let rep = check_continuity(&standard(), &linspace(-3.0, 3.0, 13), &linspace(0.1, 0.9, 9), FdSteps::default()).unwrap();
        assert!(rep.max_residual < 1e-3, "{}", rep.max_residual);
    }

    #[test]
    fn support_floor_is_enforced() {
        let strict = FdSteps { density_floor: 1e-12, ..FdSteps::default() };
        let err = check_fundamental_limit(&two_modes(), &[4.0], &[0.9], strict).unwrap_err();
        assert!(matches!(err, OracleError::OutOfSupport { .. }));
        assert!(matches!(
            check_fundamental_limit(&two_modes(), &[0.0], &[0.0], FdSteps::default()),
            Err(OracleError::TimeOutOfRange(_))
        ));
    }

    #[test]
    fn residual_csv() {
        let rep = check_continuity(&standard(), &[0.0], &[0.5], FdSteps::default()).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("x,t,lhs,rhs,residual\n0,0.5,"));
    }
}
