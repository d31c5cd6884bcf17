//! Fixed-step ODE integration of `dx/dt = v(x, t)` from `t = 0` to `t = 1`.

use std::io::Write;
use std::str::FromStr;

use thiserror::Error;

use crate::data::sample_prior;
use crate::field::{CountingField, ModelField, VelocityField};
use crate::model::{ModelError, VelocityModel};
use crate::points::Points;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("nfe must be at least 1")]
    ZeroNfe,
    #[error("heun needs an even nfe, got {0}")]
    OddHeunNfe(usize),
    #[error("state became non-finite at t = {0}")]
    NonFinite(f64),
    #[error("unknown solver `{0}` (expected euler or heun)")]
    UnknownSolver(String),
    #[error("invalid sample request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Euler,
    Heun,
}

impl FromStr for Solver {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euler" => Ok(Solver::Euler),
            "heun" => Ok(Solver::Heun),
            other => Err(SamplerError::UnknownSolver(other.to_string())),
        }
    }
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
        })
    }
}

/// A batch of trajectories on a shared time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `t_0 = 0 < ... < t_K = 1`.
    pub times: Vec<f64>,
    /// `K + 1` states.
    pub states: Vec<Points>,
    /// `K` velocities, one per step start.
    pub velocities: Vec<Points>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.velocities.len()
    }

    pub fn num_paths(&self) -> usize {
        self.states.first().map_or(0, Points::len)
    }

    pub fn last(&self) -> &Points {
        self.states.last().expect("trajectory has an initial state")
    }

    /// Writes `traj_id,k,t,x0,x1,v0,v1` rows; velocity columns are empty at the
    /// final knot. Points of dimension 1 leave the second columns empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "traj_id,k,t,x0,x1,v0,v1")?;
        let d = self.states[0].dim();
        let col = |row: &[f64], k: usize| if k < d { row[k].to_string() } else { String::new() };
        for i in 0..self.num_paths() {
            for (k, t) in self.times.iter().enumerate() {
                let x = self.states[k].row(i);
                let (v0, v1) = match self.velocities.get(k) {
                    Some(v) => (col(v.row(i), 0), col(v.row(i), 1)),
                    None => (String::new(), String::new()),
                };
                writeln!(w, "{i},{k},{t},{},{},{v0},{v1}", col(x, 0), col(x, 1))?;
            }
        }
        Ok(())
    }
}

fn uniform_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| k as f64 / steps as f64).collect()
}

fn axpy(x: &Points, h: f64, v: &Points) -> Points {
    let data = x.data().iter().zip(v.data()).map(|(a, b)| a + h * b).collect();
    Points::new(x.dim(), data)
}

/// Forward Euler with `nfe` uniform steps.
pub fn euler_integrate<F: VelocityField + ?Sized>(field: &F, x0: &Points, nfe: usize) -> Result<Trajectory, SamplerError> {
    if nfe == 0 {
        return Err(SamplerError::ZeroNfe);
    }
    let times = uniform_grid(nfe);
    let mut states = vec![x0.clone()];
    let mut velocities = Vec::with_capacity(nfe);
    for k in 0..nfe {
        let (t, h) = (times[k], times[k + 1] - times[k]);
        let v = field.velocity(&states[k], t)?;
        let next = axpy(&states[k], h, &v);
        if !next.all_finite() {
            return Err(SamplerError::NonFinite(times[k + 1]));
        }
        velocities.push(v);
        states.push(next);
    }
    Ok(Trajectory { times, states, velocities })
}

/// Heun's method (Euler predictor, trapezoidal corrector): `nfe / 2` steps.
pub fn heun_integrate<F: VelocityField + ?Sized>(field: &F, x0: &Points, nfe: usize) -> Result<Trajectory, SamplerError> {
    if nfe == 0 {
        return Err(SamplerError::ZeroNfe);
    }
    if nfe % 2 != 0 {
        return Err(SamplerError::OddHeunNfe(nfe));
    }
    let steps = nfe / 2;
    let times = uniform_grid(steps);
    let mut states = vec![x0.clone()];
    let mut velocities = Vec::with_capacity(steps);
    for k in 0..steps {
        let (t, t1) = (times[k], times[k + 1]);
        let h = t1 - t;
        let x = &states[k];
        let v = field.velocity(x, t)?;
        let pred = axpy(x, h, &v);
        let v_pred = field.velocity(&pred, t1)?;
        let data = x
            .data()
            .iter()
            .zip(v.data().iter().zip(v_pred.data()))
            .map(|(a, (p, q))| a + 0.5 * h * (p + q))
            .collect();
        let next = Points::new(x.dim(), data);
        if !next.all_finite() {
            return Err(SamplerError::NonFinite(t1));
        }
        velocities.push(v);
        states.push(next);
    }
    Ok(Trajectory { times, states, velocities })
}

pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Points,
    nfe: usize,
    solver: Solver,
) -> Result<Trajectory, SamplerError> {
    match solver {
        Solver::Euler => euler_integrate(field, x0, nfe),
        Solver::Heun => heun_integrate(field, x0, nfe),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelRequest {
    None,
    Single(usize),
    PerSample(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub n: usize,
    pub nfe: usize,
    pub solver: Solver,
    pub cfg_scale: f64,
    pub labels: LabelRequest,
    pub seed: u64,
}

impl SampleRequest {
    pub fn new(n: usize, nfe: usize, seed: u64) -> Self {
        Self { n, nfe, solver: Solver::Euler, cfg_scale: 1.0, labels: LabelRequest::None, seed }
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub points: Points,
    pub labels: Option<Vec<usize>>,
    pub trajectory: Trajectory,
    /// Solver evaluations of the field.
    pub nfe: usize,
    /// Network forward passes; twice `nfe` under guidance.
    pub model_calls: usize,
}

/// Draws prior samples from `req.seed` and integrates them.
pub fn sample(model: &VelocityModel, req: &SampleRequest) -> Result<SampleOutput, SamplerError> {
    if req.n == 0 {
        return Err(SamplerError::InvalidRequest("n must be positive".into()));
    }
    let conditional = model.config().is_conditional();
    let labels = match &req.labels {
        LabelRequest::None => None,
        LabelRequest::Single(l) => Some(vec![*l; req.n]),
        LabelRequest::PerSample(l) if l.len() == req.n => Some(l.clone()),
        LabelRequest::PerSample(l) => {
            return Err(SamplerError::InvalidRequest(format!("{} labels for {} samples", l.len(), req.n)))
        }
    };
    if !conditional && (labels.is_some() || req.cfg_scale != 1.0) {
        return Err(ModelError::NotConditional.into());
    }
    if req.cfg_scale != 1.0 && labels.is_none() {
        return Err(SamplerError::InvalidRequest("guidance needs labels".into()));
    }
    let field = match &labels {
        Some(l) => ModelField::guided(model, l.clone(), req.cfg_scale)?,
        None => ModelField::unconditional(model),
    };
    let counting = CountingField::new(field);
    let x0 = sample_prior(req.n, model.config().data_dim, req.seed);
    let trajectory = integrate(&counting, &x0, req.nfe, req.solver)?;
    Ok(SampleOutput {
        points: trajectory.last().clone(),
        labels,
        nfe: counting.evals(),
        model_calls: counting.model_calls(),
        trajectory,
    })
}
