//! Path-geometry measurements: finite-difference material derivative,
//! curvature proxy, one-step Euler error and speed variation.

use std::io::Write;

use thiserror::Error;

use crate::field::VelocityField;
use crate::model::ModelError;
use crate::points::{norm, Points};
use crate::sampler::{heun_integrate, SamplerError, Trajectory};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("probe invalid: t = {t}, eps = {eps} (need eps > 0 and t + eps <= 1)")]
    InvalidProbe { t: f64, eps: f64 },
    #[error("field returned non-finite values at t = {0}")]
    NonFinite(f64),
    #[error("trajectory has repeated or decreasing times")]
    DegenerateTrajectory,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

pub const DEFAULT_EPS_FD: f64 = 1e-3;
pub const DEFAULT_STAB_EPS: f64 = 1e-6;

/// Forward-difference estimate of `Dv/Dt` along the field's own flow,
/// `(v(x + eps v, t + eps) - v(x, t)) / eps`, at every row of `xs`.
pub fn material_derivative_fd<F: VelocityField + ?Sized>(
    field: &F,
    xs: &Points,
    t: f64,
    eps: f64,
) -> Result<Points, DiagnosticsError> {
    let v = field.velocity(xs, t)?;
    material_derivative_with(field, xs, &v, t, eps)
}

/// Same as [`material_derivative_fd`] with `v(x, t)` already known.
fn material_derivative_with<F: VelocityField + ?Sized>(
    field: &F,
    xs: &Points,
    v: &Points,
    t: f64,
    eps: f64,
) -> Result<Points, DiagnosticsError> {
    if !(eps > 0.0) || t + eps > 1.0 || t < 0.0 {
        return Err(DiagnosticsError::InvalidProbe { t, eps });
    }
    if !v.all_finite() {
        return Err(DiagnosticsError::NonFinite(t));
    }
    let data = xs.data().iter().zip(v.data()).map(|(x, v)| x + eps * v).collect();
    let ahead = field.velocity(&Points::new(xs.dim(), data), t + eps)?;
    if !ahead.all_finite() {
        return Err(DiagnosticsError::NonFinite(t + eps));
    }
    let acc = ahead.data().iter().zip(v.data()).map(|(a, b)| (a - b) / eps).collect();
    Ok(Points::new(xs.dim(), acc))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnotSample {
    pub t: f64,
    pub kappa: f64,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureReport {
    /// Knot samples per trajectory.
    pub paths: Vec<Vec<KnotSample>>,
    /// `sum_k kappa_k (t_{k+1} - t_k)` per trajectory.
    pub path_integrals: Vec<f64>,
    /// Pooled over every knot of every trajectory.
    pub mean_kappa: f64,
    pub max_kappa: f64,
    /// Mean of `path_integrals`.
    pub mean_path_integral: f64,
}

impl CurvatureReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "traj_id,t,kappa,speed")?;
        for (i, path) in self.paths.iter().enumerate() {
            for s in path {
                writeln!(w, "{i},{},{},{}", s.t, s.kappa, s.speed)?;
            }
        }
        Ok(())
    }

    /// Pooled mean of kappa at each knot time.
    pub fn mean_by_time(&self) -> Vec<(f64, f64)> {
        let Some(first) = self.paths.first() else { return vec![] };
        (0..first.len())
            .map(|k| {
                let mean = self.paths.iter().map(|p| p[k].kappa).sum::<f64>() / self.paths.len() as f64;
                (first[k].t, mean)
            })
            .collect()
    }
}

fn check_times(times: &[f64]) -> Result<(), DiagnosticsError> {
    if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(DiagnosticsError::DegenerateTrajectory);
    }
    Ok(())
}

/// `kappa = |x''| / (|x'|^2 + stab_eps)` at each step-start knot, with `x'`
/// the stored velocity and `x''` the finite-difference material derivative.
pub fn curvature_proxy<F: VelocityField + ?Sized>(
    traj: &Trajectory,
    field: &F,
    stab_eps: f64,
    eps_fd: f64,
) -> Result<CurvatureReport, DiagnosticsError> {
    check_times(&traj.times)?;
    let n = traj.num_paths();
    let mut paths = vec![Vec::with_capacity(traj.steps()); n];
    let mut path_integrals = vec![0.0; n];
    for k in 0..traj.steps() {
        let (t, h) = (traj.times[k], traj.times[k + 1] - traj.times[k]);
        let x = &traj.states[k];
        let v = &traj.velocities[k];
        let acc = material_derivative_with(field, x, v, t, eps_fd)?;
        for i in 0..n {
            let speed = norm(v.row(i));
            let kappa = norm(acc.row(i)) / (speed * speed + stab_eps);
            paths[i].push(KnotSample { t, kappa, speed });
            path_integrals[i] += kappa * h;
        }
    }
    let all = paths.iter().flatten().map(|s| s.kappa);
    let count = (n * traj.steps()).max(1) as f64;
    let mean_kappa = all.clone().sum::<f64>() / count;
    let max_kappa = all.fold(0.0, f64::max);
    let mean_path_integral = path_integrals.iter().sum::<f64>() / n.max(1) as f64;
    Ok(CurvatureReport { paths, path_integrals, mean_kappa, max_kappa, mean_path_integral })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneStepRow {
    /// `|x(1) - (x0 + v(x0, 0))|` against a fine Heun reference.
    pub measured: f64,
    /// `|Dv/Dt(x0, 0)| / 2`.
    pub predicted: f64,
    /// `measured / predicted`; `None` when the prediction is zero.
    pub ratio: Option<f64>,
}

pub const REFERENCE_NFE: usize = 256;

/// Compares the one-step Euler endpoint error with its leading Taylor term.
pub fn one_step_error_check<F: VelocityField + ?Sized>(
    field: &F,
    x0s: &Points,
    eps_fd: f64,
) -> Result<Vec<OneStepRow>, DiagnosticsError> {
    let reference = heun_integrate(field, x0s, REFERENCE_NFE)?;
    let v0 = field.velocity(x0s, 0.0)?;
    let acc = material_derivative_with(field, x0s, &v0, 0.0, eps_fd)?;
    let exact = reference.last();
    Ok((0..x0s.len())
        .map(|i| {
            let euler: Vec<f64> = x0s.row(i).iter().zip(v0.row(i)).map(|(x, v)| x + v).collect();
            let diff: Vec<f64> = exact.row(i).iter().zip(&euler).map(|(a, b)| a - b).collect();
            let measured = norm(&diff);
            let predicted = 0.5 * norm(acc.row(i));
            let ratio = (predicted > 0.0).then(|| measured / predicted);
            OneStepRow { measured, predicted, ratio }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedProfile {
    /// `(t, |v|)` per trajectory.
    pub paths: Vec<Vec<(f64, f64)>>,
    /// Coefficient of variation of speed per trajectory.
    pub cv: Vec<f64>,
    pub median_cv: f64,
}

/// Population coefficient of variation; zero for an all-zero series.
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean.abs()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Speed at every step-start knot and its variation along each path.
pub fn kinetic_energy_profile(traj: &Trajectory) -> SpeedProfile {
    let n = traj.num_paths();
    let paths: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|i| {
            traj.velocities.iter().zip(&traj.times).map(|(v, &t)| (t, norm(v.row(i)))).collect()
        })
        .collect();
    let cv: Vec<f64> = paths
        .iter()
        .map(|p| coefficient_of_variation(&p.iter().map(|s| s.1).collect::<Vec<_>>()))
        .collect();
    let median_cv = median(&cv);
    SpeedProfile { paths, cv, median_cv }
}

/// One row of the summary CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticSummary {
    pub run_id: String,
    pub mean_kappa: f64,
    pub max_kappa: f64,
    pub path_integral_kappa: f64,
    pub speed_cv: f64,
}

impl DiagnosticSummary {
    pub fn new(run_id: &str, curvature: &CurvatureReport, speed: &SpeedProfile) -> Self {
        Self {
            run_id: run_id.to_string(),
            mean_kappa: curvature.mean_kappa,
            max_kappa: curvature.max_kappa,
            path_integral_kappa: curvature.mean_path_integral,
            speed_cv: speed.median_cv,
        }
    }
}

pub fn write_summary_csv<W: Write>(mut w: W, rows: &[DiagnosticSummary]) -> std::io::Result<()> {
    writeln!(w, "run_id,mean_kappa,max_kappa,path_integral_kappa,speed_cv")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.run_id, r.mean_kappa, r.max_kappa, r.path_integral_kappa, r.speed_cv)?;
    }
    Ok(())
}
