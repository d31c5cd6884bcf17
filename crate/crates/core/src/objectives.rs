//! Flow-matching regression loss, the isokinetic lookahead regularizer and the
//! time / lookahead-step samplers.
//!
//! The regularizer compares `v(x_t, t)` with a detached evaluation at the
//! self-guided lookahead point `x_t + eps * sg(v(x_t, t))`, time `t + eps`.
//! Two forms are available: the weighted, speed-normalized L1 residual
//! (default) and the plain squared L2 residual.

use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal, StandardNormal};
use thiserror::Error;

use crate::autodiff::grad_check;
use crate::autodiff::{Bindings, Graph, GraphError, NodeId, Tensor};
use crate::model::{ModelError, VelocityModel};
use crate::points::Points;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IsoNorm {
    /// `w * |(v_curr - sg(v_next)) / s|_1` with `s = |sg(v_curr)|_2 + zeta`.
    L1Normalized,
    /// `|v_curr - sg(v_next)|_2^2`, no weight and no normalization.
    L2Squared,
}

/// How the per-sample L1 residual is reduced over data dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum L1Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsDist {
    LogNormal { median: f64, log_std: f64 },
    /// `scale * Beta(a, b)`.
    Beta { a: f64, b: f64, scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_fm: f64,
    pub lambda_iso: f64,
    pub alpha: f64,
    pub zeta: f64,
    pub p_iso: f64,
    pub iso_norm: IsoNorm,
    pub l1_reduction: L1Reduction,
    pub eps_dist: EpsDist,
    pub eps_min: f64,
    pub eps_max: f64,
    /// Logit-normal location and scale for `t`.
    pub t_mu: f64,
    pub t_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_fm: 1.0,
            lambda_iso: 4.0,
            alpha: 2.0,
            zeta: 1e-2,
            p_iso: 1.0,
            iso_norm: IsoNorm::L1Normalized,
            l1_reduction: L1Reduction::Mean,
            eps_dist: EpsDist::LogNormal { median: 0.01, log_std: 0.5 },
            eps_min: 1e-4,
            eps_max: 0.1,
            t_mu: 0.0,
            t_sigma: 1.0,
        }
    }
}

impl LossConfig {
    /// Plain flow matching: no regularizer, gate closed.
    pub fn baseline() -> Self {
        Self { lambda_iso: 0.0, p_iso: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: &str| Err(ObjectiveError::InvalidConfig(m.to_string()));
        if !(self.lambda_fm >= 0.0 && self.lambda_iso >= 0.0 && self.alpha >= 0.0) {
            return bad("lambda_fm, lambda_iso and alpha must be non-negative");
        }
        if !(self.zeta > 0.0) {
            return bad("zeta must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_iso) {
            return bad("p_iso must lie in [0, 1]");
        }
        if !(self.eps_min > 0.0 && self.eps_min <= self.eps_max && self.eps_max <= 0.5) {
            return bad("need 0 < eps_min <= eps_max <= 0.5");
        }
        if !(self.t_sigma > 0.0) || !self.t_mu.is_finite() {
            return bad("t_sigma must be positive and t_mu finite");
        }
        match self.eps_dist {
            EpsDist::LogNormal { median, log_std } if median > 0.0 && log_std >= 0.0 => Ok(()),
            EpsDist::Beta { a, b, scale } if a > 0.0 && b > 0.0 && scale > 0.0 => Ok(()),
            _ => bad("invalid lookahead-step distribution parameters"),
        }
    }

    /// Whether the regularizer contributes at all when the gate opens.
    pub fn iso_active(&self) -> bool {
        self.lambda_iso > 0.0 && self.p_iso > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub x0: Points,
    pub x1: Points,
    pub labels: Option<Vec<usize>>,
    pub t: Vec<f64>,
    pub eps: Vec<f64>,
}

impl TrainingBatch {
    pub fn new(
        x0: Points,
        x1: Points,
        labels: Option<Vec<usize>>,
        t: Vec<f64>,
        eps: Vec<f64>,
    ) -> Result<Self, ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::InvalidBatch(m));
        let n = x0.len();
        if x1.len() != n || x1.dim() != x0.dim() || t.len() != n || eps.len() != n {
            return bad(format!("inconsistent batch sizes ({n} sources)"));
        }
        if labels.as_ref().is_some_and(|l| l.len() != n) {
            return bad("label count differs from batch size".into());
        }
        if n == 0 {
            return bad("empty batch".into());
        }
        if !x0.all_finite() || !x1.all_finite() {
            return bad("non-finite points".into());
        }
        if t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("times must lie in [0, 1]".into());
        }
        if eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return bad("lookahead steps must be positive".into());
        }
        Ok(Self { x0, x1, labels, t, eps })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x0.dim()
    }

    pub fn interpolated(&self) -> Points {
        let mut data = Vec::with_capacity(self.x0.data().len());
        for i in 0..self.len() {
            data.extend(interpolate(self.x0.row(i), self.x1.row(i), self.t[i]));
        }
        Points::new(self.dim(), data)
    }

    /// Regression targets `x1 - x0`.
    pub fn targets(&self) -> Points {
        let data = self.x1.data().iter().zip(self.x0.data()).map(|(b, a)| b - a).collect();
        Points::new(self.dim(), data)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Logit-normal times `sigmoid(z)`, `z ~ N(mu, sigma^2)`, kept strictly inside
/// `(0, 1)`.
pub fn sample_time<R: Rng + ?Sized>(n: usize, mu: f64, sigma: f64, rng: &mut R) -> Vec<f64> {
    assert!(sigma > 0.0, "logit-normal scale must be positive");
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sigmoid(mu + sigma * z).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
        })
        .collect()
}

/// Lookahead steps: drawn from `cfg.eps_dist`, clipped to `[eps_min, eps_max]`,
/// then shortened to `1 - t` but never below `eps_min`.
pub fn sample_epsilon<R: Rng + ?Sized>(cfg: &LossConfig, ts: &[f64], rng: &mut R) -> Vec<f64> {
    ts.iter()
        .map(|&t| {
            let raw = match cfg.eps_dist {
                EpsDist::LogNormal { median, log_std } => LogNormal::new(median.ln(), log_std)
                    .expect("validated log-normal parameters")
                    .sample(rng),
                EpsDist::Beta { a, b, scale } => scale * Beta::new(a, b).expect("validated beta parameters").sample(rng),
            };
            raw.clamp(cfg.eps_min, cfg.eps_max).min(1.0 - t).max(cfg.eps_min)
        })
        .collect()
}

/// `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// Temporal weight `(1 - t)^alpha / eps`.
pub fn iso_weight(t: f64, eps: f64, alpha: f64) -> f64 {
    (1.0 - t).powf(alpha) / eps
}

/// A velocity field that can be appended to a computation graph, with its
/// trainable parameters as graph inputs.
pub trait GraphField {
    fn dim(&self) -> usize;

    fn param_shapes(&self) -> Vec<Vec<usize>>;

    /// Current parameter values, flattened in `param_shapes` order.
    fn param_values(&self) -> Vec<f64>;

    /// Appends `v(x_i, t_i[, c_i])` for the rows of `x` (shape `[n, dim]`).
    fn build(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        x: NodeId,
        ts: &[f64],
        labels: Option<&[usize]>,
    ) -> Result<NodeId, ModelError>;
}

impl GraphField for VelocityModel {
    fn dim(&self) -> usize {
        self.config().data_dim
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().segments().iter().map(|s| s.shape.clone()).collect()
    }

    fn param_values(&self) -> Vec<f64> {
        self.params().flatten()
    }

    fn build(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        x: NodeId,
        ts: &[f64],
        labels: Option<&[usize]>,
    ) -> Result<NodeId, ModelError> {
        self.build_graph(g, params, x, ts, labels)
    }
}

/// `v(x, t) = base + slope * max(0, t - gate)` with trainable `base` and
/// `slope`. Covers constant, linear-in-time and time-gated test fields.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineTimeField {
    pub base: Vec<f64>,
    pub slope: Vec<f64>,
    pub gate: f64,
}

impl AffineTimeField {
    pub fn constant(c: Vec<f64>) -> Self {
        let d = c.len();
        Self { base: c, slope: vec![0.0; d], gate: 0.0 }
    }

    pub fn time_linear(a: Vec<f64>) -> Self {
        let d = a.len();
        Self { base: vec![0.0; d], slope: a, gate: 0.0 }
    }
}

impl GraphField for AffineTimeField {
    fn dim(&self) -> usize {
        self.base.len()
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![1, self.dim()], vec![1, self.dim()]]
    }

    fn param_values(&self) -> Vec<f64> {
        self.base.iter().chain(&self.slope).copied().collect()
    }

    fn build(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        _x: NodeId,
        ts: &[f64],
        _labels: Option<&[usize]>,
    ) -> Result<NodeId, ModelError> {
        let d = self.dim();
        let ramp: Vec<f64> = ts.iter().flat_map(|&t| std::iter::repeat_n((t - self.gate).max(0.0), d)).collect();
        let ramp = g.constant(Tensor::matrix(ts.len(), d, ramp));
        let sloped = g.mul(ramp, params[1]);
        Ok(g.add(sloped, params[0]))
    }
}

/// Returns fixed rows regardless of input; used to inject exact regression
/// targets.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedOutputField {
    pub rows: Points,
}

impl GraphField for FixedOutputField {
    fn dim(&self) -> usize {
        self.rows.dim()
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![]
    }

    fn param_values(&self) -> Vec<f64> {
        vec![]
    }

    fn build(
        &self,
        g: &mut Graph,
        _params: &[NodeId],
        _x: NodeId,
        ts: &[f64],
        _labels: Option<&[usize]>,
    ) -> Result<NodeId, ModelError> {
        if ts.len() != self.rows.len() {
            return Err(ModelError::LengthMismatch { expected: self.rows.len(), found: ts.len() });
        }
        Ok(g.constant(Tensor::matrix(self.rows.len(), self.dim(), self.rows.data().to_vec())))
    }
}

/// Which terms a loss graph contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerms {
    Fm,
    Iso,
    /// `lambda_fm * fm + gate * lambda_iso * iso`.
    Total { gate: bool },
}

/// A built loss with handles to its parts.
#[derive(Debug)]
pub struct LossGraph {
    pub graph: Graph,
    pub params: Vec<NodeId>,
    /// Parameter inputs feeding the lookahead evaluation when they are
    /// declared separately from `params`.
    pub lookahead_params: Option<Vec<NodeId>>,
    pub total: NodeId,
    pub fm: Option<NodeId>,
    pub iso: Option<NodeId>,
    /// Per-sample network evaluations the loss performs.
    pub model_calls: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub fm: Option<f64>,
    pub iso: Option<f64>,
}

impl LossGraph {
    fn all_params(&self) -> Vec<NodeId> {
        let mut all = self.params.clone();
        if let Some(l) = &self.lookahead_params {
            all.extend(l);
        }
        all
    }

    fn bind(&self, flat: &[f64]) -> Bindings {
        let mut b = Bindings::new();
        let mut off = 0;
        for id in self.all_params() {
            let shape = self.graph.shape(id).to_vec();
            let n: usize = shape.iter().product();
            b.insert(id, Tensor::new(shape, flat[off..off + n].to_vec()));
            off += n;
        }
        assert_eq!(off, flat.len(), "parameter vector length does not match the loss graph");
        b
    }

    /// Forward pass. `flat` holds `params` followed by `lookahead_params`
    /// when present.
    pub fn evaluate(&mut self, flat: &[f64]) -> Result<LossValues, ObjectiveError> {
        let b = self.bind(flat);
        self.graph.forward(&b)?;
        let get = |g: &Graph, id: NodeId| g.value(id).expect("evaluated").item();
        Ok(LossValues {
            total: get(&self.graph, self.total),
            fm: self.fm.map(|id| get(&self.graph, id)),
            iso: self.iso.map(|id| get(&self.graph, id)),
        })
    }

    /// Flat gradient of the total with respect to all parameter inputs.
    /// Requires a prior [`LossGraph::evaluate`].
    pub fn gradient(&mut self) -> Result<Vec<f64>, ObjectiveError> {
        let grads = self.graph.backward(self.total)?;
        Ok(self.all_params().iter().flat_map(|id| grads[id].data().to_vec()).collect())
    }
}

struct Built {
    total: NodeId,
    fm: Option<NodeId>,
    iso: Option<NodeId>,
    model_calls: usize,
}

fn column(n: usize, values: impl Iterator<Item = f64>) -> Tensor {
    Tensor::matrix(n, 1, values.collect())
}

fn build_into<F: GraphField + ?Sized>(
    g: &mut Graph,
    field: &F,
    params: &[NodeId],
    lookahead_params: &[NodeId],
    batch: &TrainingBatch,
    cfg: &LossConfig,
    terms: LossTerms,
) -> Result<Built, ObjectiveError> {
    if field.dim() != batch.dim() {
        return Err(ModelError::DimensionMismatch { expected: field.dim(), found: batch.dim() }.into());
    }
    let (n, d) = (batch.len(), batch.dim());
    let labels = batch.labels.as_deref();
    let (want_fm, want_iso) = match terms {
        LossTerms::Fm => (true, false),
        LossTerms::Iso => (false, true),
        LossTerms::Total { gate } => (true, gate && cfg.lambda_iso > 0.0),
    };

    let xt = g.constant(Tensor::matrix(n, d, batch.interpolated().into_data()));
    let v_curr = field.build(g, params, xt, &batch.t, labels)?;
    let mut model_calls = n;

    let fm = if want_fm {
        let u = g.constant(Tensor::matrix(n, d, batch.targets().into_data()));
        let diff = g.sub(v_curr, u);
        let sq = g.square(diff);
        let per = g.row_sum(sq);
        Some(g.mean(per))
    } else {
        None
    };

    let iso = if want_iso {
        let sv = g.stop_gradient(v_curr);
        let eps = g.constant(Tensor::matrix(n, d, batch.eps.iter().flat_map(|&e| std::iter::repeat_n(e, d)).collect()));
        let step = g.mul(eps, sv);
        let x_next = g.add(xt, step);
        let t_next: Vec<f64> = batch.t.iter().zip(&batch.eps).map(|(t, e)| (t + e).min(1.0)).collect();
        let v_next = field.build(g, lookahead_params, x_next, &t_next, labels)?;
        model_calls += n;
        let target = g.stop_gradient(v_next);
        let diff = g.sub(v_curr, target);
        let per = match cfg.iso_norm {
            IsoNorm::L1Normalized => {
                let sq = g.square(sv);
                let norm2 = g.row_sum(sq);
                let norm = g.sqrt(norm2);
                let s = g.offset(norm, cfg.zeta);
                let r = g.div(diff, s);
                let a = g.abs(r);
                let red = match cfg.l1_reduction {
                    L1Reduction::Mean => g.row_mean(a),
                    L1Reduction::Sum => g.row_sum(a),
                };
                let w = g.constant(column(n, batch.t.iter().zip(&batch.eps).map(|(&t, &e)| iso_weight(t, e, cfg.alpha))));
                g.mul(red, w)
            }
            IsoNorm::L2Squared => {
                let sq = g.square(diff);
                g.row_sum(sq)
            }
        };
        Some(g.mean(per))
    } else {
        None
    };

    let total = match (fm, iso) {
        (Some(f), Some(i)) => {
            let a = g.scale(f, cfg.lambda_fm);
            let b = g.scale(i, cfg.lambda_iso);
            g.add(a, b)
        }
        (Some(f), None) => {
            if matches!(terms, LossTerms::Total { .. }) {
                g.scale(f, cfg.lambda_fm)
            } else {
                f
            }
        }
        (None, Some(i)) => i,
        (None, None) => unreachable!("at least one term is built"),
    };
    Ok(Built { total, fm, iso, model_calls })
}

fn declare<F: GraphField + ?Sized>(g: &mut Graph, field: &F) -> Vec<NodeId> {
    field.param_shapes().iter().map(|s| g.input(s)).collect()
}

/// Builds a loss graph. With `separate_lookahead`, the lookahead evaluation
/// reads its own copy of the parameter inputs, so gradients that would only
/// reach parameters through the detached branch can be inspected directly.
pub fn build_loss<F: GraphField + ?Sized>(
    field: &F,
    batch: &TrainingBatch,
    cfg: &LossConfig,
    terms: LossTerms,
    separate_lookahead: bool,
) -> Result<LossGraph, ObjectiveError> {
    let mut g = Graph::new();
    let params = declare(&mut g, field);
    let lookahead = if separate_lookahead { Some(declare(&mut g, field)) } else { None };
    let built = build_into(&mut g, field, &params, lookahead.as_deref().unwrap_or(&params), batch, cfg, terms)?;
    g.mark_output(built.total);
    Ok(LossGraph {
        graph: g,
        params,
        lookahead_params: lookahead,
        total: built.total,
        fm: built.fm,
        iso: built.iso,
        model_calls: built.model_calls,
    })
}

/// Mean squared regression error of `v(x_t, t)` against `x1 - x0`.
pub fn fm_loss<F: GraphField + ?Sized>(field: &F, batch: &TrainingBatch) -> Result<LossGraph, ObjectiveError> {
    build_loss(field, batch, &LossConfig::baseline(), LossTerms::Fm, false)
}

/// Batch mean of the lookahead regularizer.
pub fn iso_loss<F: GraphField + ?Sized>(
    field: &F,
    batch: &TrainingBatch,
    cfg: &LossConfig,
) -> Result<LossGraph, ObjectiveError> {
    build_loss(field, batch, cfg, LossTerms::Iso, false)
}

/// Draws the step gate `g ~ Bernoulli(p_iso)`. The uniform is consumed even
/// when the outcome is fixed so that runs differing only in loss weights see
/// identical random streams.
pub fn draw_gate<R: Rng + ?Sized>(p_iso: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    u < p_iso
}

/// `lambda_fm * L_fm + g * lambda_iso * L_iso` with the gate drawn from `rng`.
pub fn total_loss<F: GraphField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    batch: &TrainingBatch,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossGraph, ObjectiveError> {
    let gate = draw_gate(cfg.p_iso, rng);
    build_loss(field, batch, cfg, LossTerms::Total { gate }, false)
}

/// Max relative error between backprop gradients and central differences of
/// the loss with detached branches held at their current values.
pub fn loss_grad_check<F: GraphField + ?Sized>(
    field: &F,
    batch: &TrainingBatch,
    cfg: &LossConfig,
    terms: LossTerms,
    step: f64,
) -> Result<f64, ObjectiveError> {
    let mut inner: Result<(), ObjectiveError> = Ok(());
    let err = grad_check(
        |g| {
            let params = declare(g, field);
            match build_into(g, field, &params, &params, batch, cfg, terms) {
                Ok(b) => (b.total, params),
                Err(e) => {
                    inner = Err(e);
                    let z = g.constant(Tensor::scalar(0.0));
                    (z, params)
                }
            }
        },
        &field.param_values(),
        step,
    );
    inner?;
    Ok(err?)
}
