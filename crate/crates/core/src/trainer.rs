//! Optimization loop: AdamW with a cosine schedule, global-norm clipping, an
//! EMA shadow of the weights and periodic evaluation on the shadow.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::coupling::{apply_coupling, ot_couple, CoupledBatch, CouplingError};
use crate::data::{sample_prior, sample_prior_with, sample_target, sample_target_with, DataError, DatasetSpec};
use crate::diagnostics::{curvature_proxy, DiagnosticsError, DEFAULT_EPS_FD, DEFAULT_STAB_EPS};
use crate::field::ModelField;
use crate::metrics::{mode_coverage, sliced_wasserstein, MetricError};
use crate::model::{init_params, write_checkpoint, ModelConfig, ModelError, ModelParams, VelocityModel};
use crate::objectives::{
    build_loss, draw_gate, sample_epsilon, sample_time, LossConfig, LossTerms, ObjectiveError, TrainingBatch,
};
use crate::points::Points;
use crate::sampler::{euler_integrate, SamplerError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("epoch {epoch} is past the schedule horizon {t_max}")]
    PastHorizon { epoch: usize, t_max: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite parameter update")]
    NonFiniteUpdate,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite {what} at step {step}; last good checkpoint: {}", last_good.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    Diverged { step: usize, what: &'static str, last_good: Option<PathBuf> },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `eta_min + (lr_base - eta_min)(1 + cos(pi epoch / t_max)) / 2`.
pub fn cosine_lr(epoch: usize, lr_base: f64, t_max: usize, eta_min_ratio: f64) -> Result<f64, TrainError> {
    if epoch > t_max {
        return Err(TrainError::PastHorizon { epoch, t_max });
    }
    let eta_min = eta_min_ratio * lr_base;
    if epoch == 0 {
        return Ok(lr_base);
    }
    if epoch == t_max {
        return Ok(eta_min);
    }
    let c = (std::f64::consts::PI * epoch as f64 / t_max as f64).cos();
    Ok(eta_min + 0.5 * (lr_base - eta_min) * (1.0 + c))
}

/// Rescales `grads` in place to global norm at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) -> Result<f64, TrainError> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr_base: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps_adam: f64,
}

impl OptimState {
    pub fn new(n: usize, lr_base: f64, weight_decay: f64) -> Self {
        Self { step: 0, m: vec![0.0; n], v: vec![0.0; n], lr_base, weight_decay, betas: (0.9, 0.999), eps_adam: 1e-8 }
    }
}

/// One AdamW update with decoupled weight decay. Leaves everything untouched
/// if the update would be non-finite.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimState, lr: f64) -> Result<(), TrainError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(TrainError::LengthMismatch(params.len(), grads.len()));
    }
    let (b1, b2) = state.betas;
    let step = state.step + 1;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let mut next = params.to_vec();
    for i in 0..params.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grads[i] * grads[i];
        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps_adam) + state.weight_decay * params[i];
        next[i] = params[i] - lr * update;
        if !next[i].is_finite() {
            return Err(TrainError::NonFiniteUpdate);
        }
    }
    params.copy_from_slice(&next);
    state.m = m;
    state.v = v;
    state.step = step;
    Ok(())
}

/// `shadow = decay * shadow + (1 - decay) * params`.
pub fn ema_update(shadow: &mut [f64], params: &[f64], decay: f64) {
    assert_eq!(shadow.len(), params.len(), "EMA shadow length mismatch");
    for (s, p) in shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Cosine horizon in epochs.
    pub t_max: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eta_min_ratio: f64,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub ot_enabled: bool,
    pub label_drop_prob: f64,
    pub seed: u64,
    /// Evaluate every this many optimizer steps.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub eval_projections: usize,
    pub eval_nfe: Vec<usize>,
    pub curvature_paths: usize,
    pub curvature_nfe: usize,
    /// Seed for the fixed evaluation prior, reference set and projections,
    /// shared by every run so that runs are comparable.
    pub eval_seed: u64,
    pub keep_checkpoints: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            epochs: 2500,
            steps_per_epoch: 1,
            batch_size: 256,
            t_max: 2500,
            lr: 5e-4,
            weight_decay: 1e-4,
            eta_min_ratio: 0.1,
            ema_decay: 0.995,
            clip_norm: 1.0,
            ot_enabled: true,
            label_drop_prob: 0.15,
            seed: 0,
            eval_every: 250,
            eval_samples: 8192,
            eval_projections: 64,
            eval_nfe: vec![1, 2, 4],
            curvature_paths: 512,
            curvature_nfe: 32,
            eval_seed: 12345,
            keep_checkpoints: 5,
        }
    }
}

impl TrainRunConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 || self.t_max == 0 {
            return bad("epochs, steps_per_epoch, batch_size and t_max must be positive");
        }
        if self.epochs - 1 > self.t_max {
            return bad("epochs must not exceed t_max + 1");
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return bad("lr and clip_norm must be positive, weight_decay non-negative");
        }
        for (name, p) in [("eta_min_ratio", self.eta_min_ratio), ("ema_decay", self.ema_decay), ("label_drop_prob", self.label_drop_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TrainError::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.eval_every == 0 || self.eval_samples < 2 || self.eval_projections == 0 || self.eval_nfe.is_empty() {
            return bad("evaluation settings must be positive");
        }
        if self.eval_nfe.contains(&0) || self.curvature_nfe < 2 || self.curvature_paths == 0 {
            return bad("evaluation nfe must be positive and curvature_nfe at least 2");
        }
        if self.keep_checkpoints == 0 {
            return bad("keep_checkpoints must be positive");
        }
        Ok(())
    }
}

pub const METRIC_LOG_HEADER: &str = "step,lr,fm_loss,iso_loss,total_loss,sw2_nfe1,sw2_nfe2,sw2_nfe4,mean_curvature";
pub const METRIC_LOG_FILE: &str = "metrics.csv";
pub const COUPLING_LOG_FILE: &str = "coupling.csv";

/// One row per evaluation. Losses are means over the steps since the
/// previous row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub fm_loss: f64,
    /// `None` when the regularizer never ran in the interval.
    pub iso_loss: Option<f64>,
    pub total_loss: f64,
    /// Sliced W2 per entry of `eval_nfe`.
    pub sw2: Vec<f64>,
    /// Mean path integral of the curvature proxy.
    pub mean_curvature: f64,
}

pub fn write_metric_log<W: Write>(mut w: W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "{METRIC_LOG_HEADER}")?;
    for r in rows {
        let iso = r.iso_loss.map(|v| v.to_string()).unwrap_or_default();
        let sw2 = |i: usize| r.sw2.get(i).map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.lr,
            r.fm_loss,
            iso,
            r.total_loss,
            sw2(0),
            sw2(1),
            sw2(2),
            r.mean_curvature
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub fm_loss: f64,
    pub iso_loss: Option<f64>,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    /// Mean squared distance of the training pairs before interpolation.
    pub mean_pair_cost: f64,
    /// Network forward passes per sample this step.
    pub model_calls: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model_config: ModelConfig,
    pub params: ModelParams,
    pub ema_params: ModelParams,
    pub metrics: Vec<MetricRow>,
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    pub fn ema_model(&self) -> VelocityModel {
        VelocityModel::new(self.model_config.clone(), self.ema_params.clone()).expect("trained params match config")
    }
}

/// Fixed evaluation inputs shared across runs with the same `eval_seed`.
struct EvalSet {
    prior: Points,
    reference: Points,
    labels: Option<Vec<usize>>,
    curvature_prior: Points,
    curvature_labels: Option<Vec<usize>>,
}

impl EvalSet {
    fn new(run: &TrainRunConfig, data: &DatasetSpec, conditional: bool) -> Result<Self, TrainError> {
        let dim = data.data_dim();
        let reference = sample_target(data, run.eval_samples, run.eval_seed)?;
        let m = run.curvature_paths;
        Ok(Self {
            prior: sample_prior(run.eval_samples, dim, run.eval_seed.wrapping_add(1)),
            curvature_prior: sample_prior(m, dim, run.eval_seed.wrapping_add(2)),
            curvature_labels: conditional.then(|| reference.labels.iter().cycle().take(m).copied().collect()),
            labels: conditional.then(|| reference.labels.clone()),
            reference: reference.points,
        })
    }
}

fn field_for<'a>(model: &'a VelocityModel, labels: &Option<Vec<usize>>) -> Result<ModelField<'a>, ModelError> {
    match labels {
        Some(l) => ModelField::guided(model, l.clone(), 1.0),
        None => Ok(ModelField::unconditional(model)),
    }
}

/// Sliced W2 per nfe and the mean curvature path integral of `model`.
fn evaluate(model: &VelocityModel, eval: &EvalSet, run: &TrainRunConfig) -> Result<(Vec<f64>, f64), TrainError> {
    let field = field_for(model, &eval.labels)?;
    let mut sw2 = Vec::with_capacity(run.eval_nfe.len());
    for &nfe in &run.eval_nfe {
        let traj = euler_integrate(&field, &eval.prior, nfe)?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.eval_seed.wrapping_add(3));
        sw2.push(sliced_wasserstein(traj.last(), &eval.reference, run.eval_projections, &mut rng)?);
    }
    let field = field_for(model, &eval.curvature_labels)?;
    let traj = euler_integrate(&field, &eval.curvature_prior, run.curvature_nfe)?;
    let curv = curvature_proxy(&traj, &field, DEFAULT_STAB_EPS, DEFAULT_EPS_FD)?;
    Ok((sw2, curv.mean_path_integral))
}

/// Mode coverage of `model` samples at `nfe` against the dataset's centers.
pub fn coverage_at(model: &VelocityModel, data: &DatasetSpec, n: usize, nfe: usize, seed: u64) -> Result<Option<f64>, TrainError> {
    let Some(centers) = data.mode_centers() else { return Ok(None) };
    let labels = model
        .config()
        .is_conditional()
        .then(|| (0..n).map(|i| i % data.num_classes()).collect::<Vec<_>>());
    let field = field_for(model, &labels)?;
    let traj = euler_integrate(&field, &sample_prior(n, data.data_dim(), seed), nfe)?;
    Ok(Some(mode_coverage(traj.last(), &centers).fraction))
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_step{step:06}.isofm"))
}

fn draw_batch(
    rng: &mut ChaCha8Rng,
    run: &TrainRunConfig,
    loss: &LossConfig,
    data: &DatasetSpec,
    null_class: Option<usize>,
) -> Result<(TrainingBatch, f64, bool), TrainError> {
    let n = run.batch_size;
    let target = sample_target_with(data, n, rng)?;
    let x0 = sample_prior_with(rng, n, data.data_dim());
    let labels = null_class.map(|_| target.labels.clone());
    let coupled = if run.ot_enabled {
        ot_couple(&x0, &target.points, labels.as_deref())?
    } else {
        let identity: Vec<usize> = (0..n).collect();
        apply_coupling(&x0, &target.points, labels.as_deref(), &identity)?
    };
    let pair_cost = coupled.mean_pair_cost();
    let CoupledBatch { x0, x1, labels } = coupled;
    let t = sample_time(n, loss.t_mu, loss.t_sigma, rng);
    let eps = sample_epsilon(loss, &t, rng);
    let gate = draw_gate(loss.p_iso, rng);
    // Drop draws are taken for every sample so the stream does not depend on
    // whether the model is conditional.
    let drops: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < run.label_drop_prob).collect();
    let labels = match (labels, null_class) {
        (Some(l), Some(null)) => Some(l.into_iter().zip(drops).map(|(y, d)| if d { null } else { y }).collect()),
        _ => None,
    };
    Ok((TrainingBatch::new(x0, x1, labels, t, eps)?, pair_cost, gate))
}

/// Runs the full schedule. With `out_dir`, writes the metric log, coupling
/// log and rotating checkpoints of the EMA weights there.
pub fn train(
    run: &TrainRunConfig,
    loss: &LossConfig,
    model_config: &ModelConfig,
    data: &DatasetSpec,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    run.validate()?;
    loss.validate()?;
    model_config.validate()?;
    data.validate()?;
    if model_config.data_dim != data.data_dim() {
        return Err(ModelError::DimensionMismatch { expected: data.data_dim(), found: model_config.data_dim }.into());
    }
    if model_config.is_conditional() && model_config.num_classes != data.num_classes() {
        return Err(TrainError::InvalidConfig(format!(
            "model has {} classes but dataset {} has {}",
            model_config.num_classes,
            data.name,
            data.num_classes()
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let model = VelocityModel::new(model_config.clone(), init_params(model_config, run.seed))?;
    let mut params = model.params().flatten();
    let mut shadow = params.clone();
    let mut opt = OptimState::new(params.len(), run.lr, run.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let eval = EvalSet::new(run, data, model_config.is_conditional())?;
    let template = model.params().clone();

    let mut steps = Vec::with_capacity(run.total_steps());
    let mut metrics = Vec::new();
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let mut coupling_log = String::from("step,mean_pair_cost\n");
    let mut window_start = 0;

    let diverged = |step: usize, what: &'static str, shadow: &[f64], checkpoints: &[PathBuf]| -> TrainError {
        let last_good = out_dir.and_then(|dir| {
            let path = dir.join("last_good.isofm");
            let ok = template
                .with_flat(shadow)
                .ok()
                .and_then(|p| write_checkpoint(&path, model_config, &p).ok());
            ok.map(|_| path).or_else(|| checkpoints.last().cloned())
        });
        TrainError::Diverged { step, what, last_good }
    };

    for step in 1..=run.total_steps() {
        let epoch = (step - 1) / run.steps_per_epoch;
        let lr = cosine_lr(epoch, run.lr, run.t_max, run.eta_min_ratio)?;
        let (batch, pair_cost, gate) = draw_batch(&mut rng, run, loss, data, model_config.null_class())?;
        let mut graph = build_loss(&model, &batch, loss, LossTerms::Total { gate }, false)?;
        let values = graph.evaluate(&params)?;
        if !values.total.is_finite() {
            return Err(diverged(step, "loss", &shadow, &checkpoints));
        }
        let mut grads = graph.gradient()?;
        let grad_norm = match clip_gradients(&mut grads, run.clip_norm) {
            Ok(n) => n,
            Err(_) => return Err(diverged(step, "gradient", &shadow, &checkpoints)),
        };
        let clipped_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if adamw_step(&mut params, &grads, &mut opt, lr).is_err() {
            return Err(diverged(step, "update", &shadow, &checkpoints));
        }
        ema_update(&mut shadow, &params, run.ema_decay);
        coupling_log.push_str(&format!("{step},{pair_cost}\n"));
        steps.push(StepRecord {
            step,
            lr,
            fm_loss: values.fm.unwrap_or(f64::NAN),
            iso_loss: values.iso,
            total_loss: values.total,
            grad_norm,
            clipped_norm,
            mean_pair_cost: pair_cost,
            model_calls: graph.model_calls / batch.len(),
        });

        if step % run.eval_every == 0 || step == run.total_steps() {
            let window = &steps[window_start..];
            window_start = steps.len();
            let mean = |f: &dyn Fn(&StepRecord) -> f64| window.iter().map(f).sum::<f64>() / window.len() as f64;
            let isos: Vec<f64> = window.iter().filter_map(|s| s.iso_loss).collect();
            let ema_params = template.with_flat(&shadow)?;
            let ema_model = model.with_params(ema_params.clone());
            let (sw2, mean_curvature) = evaluate(&ema_model, &eval, run)?;
            metrics.push(MetricRow {
                step,
                lr,
                fm_loss: mean(&|s| s.fm_loss),
                iso_loss: (!isos.is_empty()).then(|| isos.iter().sum::<f64>() / isos.len() as f64),
                total_loss: mean(&|s| s.total_loss),
                sw2,
                mean_curvature,
            });
            if let Some(dir) = out_dir {
                let path = checkpoint_path(dir, step);
                write_checkpoint(&path, model_config, &ema_params)?;
                checkpoints.push(path);
                while checkpoints.len() > run.keep_checkpoints {
                    fs::remove_file(checkpoints.remove(0))?;
                }
                let mut buf = Vec::new();
                write_metric_log(&mut buf, &metrics)?;
                fs::write(dir.join(METRIC_LOG_FILE), buf)?;
                fs::write(dir.join(COUPLING_LOG_FILE), &coupling_log)?;
            }
        }
    }
    Ok(TrainOutcome {
        model_config: model_config.clone(),
        params: template.with_flat(&params)?,
        ema_params: template.with_flat(&shadow)?,
        metrics,
        steps,
        checkpoints,
    })
}
