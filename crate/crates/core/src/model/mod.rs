//! MLP velocity field `v(x, t[, c])`.
//!
//! Input features are `[x, time_embedding(t), one_hot(c)]`, where the one-hot
//! block has `num_classes + 1` slots (the last one is the null class used for
//! label dropout and guidance). Unconditional models have no one-hot block.
//! The output layer is zero-initialized, so a fresh model is the zero field.

mod checkpoint;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{self, Activation, Bindings, Graph, NodeId, Tensor};
use crate::points::Points;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("conditional model evaluated without a label")]
    MissingLabel,
    #[error("label {label} invalid for a model with {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("guidance requires a conditional model")]
    NotConditional,
    #[error("expected points of dimension {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{expected} values expected, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("checkpoint parameter count {found} does not match the {expected} implied by its config")]
    ParamCountMismatch { expected: usize, found: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub hidden_dim: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub time_embed_dim: usize,
    /// 0 for an unconditional model.
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden_dim: 64,
            depth: 3,
            time_embed_dim: 16,
            num_classes: 0,
            activation: Activation::Silu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.data_dim == 0 {
            return bad("data_dim must be positive");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and positive");
        }
        Ok(())
    }

    pub fn is_conditional(&self) -> bool {
        self.num_classes > 0
    }

    /// Index of the null class, present only on conditional models.
    pub fn null_class(&self) -> Option<usize> {
        self.is_conditional().then_some(self.num_classes)
    }

    fn label_slots(&self) -> usize {
        if self.is_conditional() {
            self.num_classes + 1
        } else {
            0
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_embed_dim + self.label_slots()
    }

    /// `(name, shape)` of every parameter segment, in storage order.
    pub fn segment_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(2 * self.depth + 2);
        let mut fan_in = self.input_dim();
        for i in 0..self.depth {
            out.push((format!("hidden.{i}.weight"), vec![fan_in, self.hidden_dim]));
            out.push((format!("hidden.{i}.bias"), vec![self.hidden_dim]));
            fan_in = self.hidden_dim;
        }
        out.push(("output.weight".into(), vec![self.hidden_dim, self.data_dim]));
        out.push(("output.bias".into(), vec![self.data_dim]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.segment_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    segments: Vec<Segment>,
}

impl ModelParams {
    pub fn new(segments: Vec<Segment>) -> Self {
        for s in &segments {
            assert_eq!(s.shape.iter().product::<usize>(), s.values.len(), "segment {}", s.name);
        }
        Self { segments }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self::new(
            config
                .segment_shapes()
                .into_iter()
                .map(|(name, shape)| {
                    let n = shape.iter().product();
                    Segment { name, shape, values: vec![0.0; n] }
                })
                .collect(),
        )
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.segments.iter().flat_map(|s| s.values.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.len() {
            return Err(ModelError::LengthMismatch { expected: self.len(), found: flat.len() });
        }
        let mut off = 0;
        for s in &mut self.segments {
            let n = s.values.len();
            s.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, ModelError> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn all_finite(&self) -> bool {
        self.segments.iter().all(|s| s.values.iter().all(|v| v.is_finite()))
    }

    /// Checks the segment layout against `config`.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        let shapes = config.segment_shapes();
        shapes.len() == self.segments.len()
            && shapes.iter().zip(&self.segments).all(|((n, s), seg)| *n == seg.name && *s == seg.shape)
    }
}

/// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, with a
/// zero output layer.
pub fn init_params(config: &ModelConfig, seed: u64) -> ModelParams {
    init_params_with_output(config, seed, false)
}

/// Like [`init_params`] but the output layer is also randomly initialized.
/// Gradient tests need this: with a zero output layer every hidden-layer
/// gradient is exactly zero.
pub fn init_params_dense(config: &ModelConfig, seed: u64) -> ModelParams {
    init_params_with_output(config, seed, true)
}

fn init_params_with_output(config: &ModelConfig, seed: u64, random_output: bool) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = config.segment_shapes();
    let mut segments = Vec::with_capacity(shapes.len());
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let is_output = name.starts_with("output.");
        let fan_in = if shape.len() == 2 {
            shape[0]
        } else if is_output {
            config.hidden_dim
        } else {
            // bias of hidden layer i: fan-in equals the weight rows of that layer
            let layer: usize = name.split('.').nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
            if layer == 0 {
                config.input_dim()
            } else {
                config.hidden_dim
            }
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let values = if is_output && !random_output {
            vec![0.0; n]
        } else {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        segments.push(Segment { name, shape, values });
    }
    ModelParams::new(segments)
}

/// Sinusoidal time features: interleaved `(sin(w_k t), cos(w_k t))` pairs with
/// `w_k` log-spaced over `[1, 1000]`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>, ModelError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(ModelError::TimeOutOfRange(t));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(ModelError::InvalidConfig(format!("time embedding dim {dim} must be even")));
    }
    Ok(embed_unchecked(t, dim))
}

fn embed_unchecked(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let w = if half == 1 { 1.0 } else { 1000f64.powf(k as f64 / (half - 1) as f64) };
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// Parameterized velocity field.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel {
    config: ModelConfig,
    params: ModelParams,
}

impl VelocityModel {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self, ModelError> {
        config.validate()?;
        if !params.matches(&config) {
            return Err(ModelError::ParamCountMismatch { expected: config.param_count(), found: params.len() });
        }
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn with_params(&self, params: ModelParams) -> Self {
        assert!(params.matches(&self.config));
        Self { config: self.config.clone(), params }
    }

    fn check_label(&self, label: Option<usize>) -> Result<Option<usize>, ModelError> {
        if !self.config.is_conditional() {
            return Ok(None);
        }
        let l = label.ok_or(ModelError::MissingLabel)?;
        if l > self.config.num_classes {
            return Err(ModelError::InvalidLabel { label: l, num_classes: self.config.num_classes });
        }
        Ok(Some(l))
    }

    /// Input feature rows `[x, emb(t), onehot]` for a batch.
    fn features(&self, xs: &Points, ts: &[f64], labels: Option<&[usize]>) -> Result<Vec<f64>, ModelError> {
        let c = &self.config;
        if xs.dim() != c.data_dim {
            return Err(ModelError::DimensionMismatch { expected: c.data_dim, found: xs.dim() });
        }
        let n = xs.len();
        if ts.len() != n {
            return Err(ModelError::LengthMismatch { expected: n, found: ts.len() });
        }
        if let Some(l) = labels {
            if l.len() != n {
                return Err(ModelError::LengthMismatch { expected: n, found: l.len() });
            }
        }
        let width = c.input_dim();
        let mut feat = Vec::with_capacity(n * width);
        for i in 0..n {
            let label = self.check_label(labels.map(|l| l[i]))?;
            feat.extend_from_slice(xs.row(i));
            feat.extend(time_embedding(ts[i], c.time_embed_dim)?);
            if let Some(l) = label {
                let mut one_hot = vec![0.0; c.num_classes + 1];
                one_hot[l] = 1.0;
                feat.extend(one_hot);
            }
        }
        Ok(feat)
    }

    /// Velocity at each row of `xs`, with per-row times and optional labels.
    pub fn forward_batch(&self, xs: &Points, ts: &[f64], labels: Option<&[usize]>) -> Result<Points, ModelError> {
        let c = &self.config;
        let n = xs.len();
        let mut h = self.features(xs, ts, labels)?;
        let mut width = c.input_dim();
        let segs = self.params.segments();
        for layer in 0..=c.depth {
            let (w, b) = (&segs[2 * layer], &segs[2 * layer + 1]);
            let out_w = w.shape[1];
            let mut out = Vec::with_capacity(n * out_w);
            for _ in 0..n {
                out.extend_from_slice(&b.values);
            }
            autodiff::matmul(&h, &w.values, n, width, out_w, &mut out);
            if layer < c.depth {
                for v in &mut out {
                    *v = c.activation.apply(*v);
                }
            }
            h = out;
            width = out_w;
        }
        Ok(Points::new(c.data_dim, h))
    }

    /// Single-point evaluation.
    pub fn eval_velocity(&self, x: &[f64], t: f64, label: Option<usize>) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.config.data_dim {
            return Err(ModelError::DimensionMismatch { expected: self.config.data_dim, found: x.len() });
        }
        let xs = Points::new(self.config.data_dim, x.to_vec());
        let labels = label.map(|l| vec![l]);
        Ok(self.forward_batch(&xs, &[t], labels.as_deref())?.into_data())
    }

    /// Guided velocity `v_null + scale (v_label - v_null)`; `scale == 1` returns
    /// the conditional velocity itself.
    pub fn cfg_velocity(&self, x: &[f64], t: f64, label: usize, scale: f64) -> Result<Vec<f64>, ModelError> {
        let xs = Points::new(self.config.data_dim, x.to_vec());
        Ok(self.cfg_batch(&xs, &[t], &[label], scale)?.into_data())
    }

    pub fn cfg_batch(&self, xs: &Points, ts: &[f64], labels: &[usize], scale: f64) -> Result<Points, ModelError> {
        let null = self.config.null_class().ok_or(ModelError::NotConditional)?;
        let cond = self.forward_batch(xs, ts, Some(labels))?;
        if scale == 1.0 {
            return Ok(cond);
        }
        let nulls = vec![null; labels.len()];
        let uncond = self.forward_batch(xs, ts, Some(&nulls))?;
        let data = uncond
            .data()
            .iter()
            .zip(cond.data())
            .map(|(&u, &c)| u + scale * (c - u))
            .collect();
        Ok(Points::new(xs.dim(), data))
    }

    /// Declares one input node per parameter segment.
    pub fn declare_params(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.segments().iter().map(|s| g.input(&s.shape)).collect()
    }

    pub fn bind_params(&self, nodes: &[NodeId]) -> Bindings {
        self.params
            .segments()
            .iter()
            .zip(nodes)
            .map(|(s, &id)| (id, Tensor::new(s.shape.clone(), s.values.clone())))
            .collect()
    }

    /// Appends the field evaluated at the rows of `x` to `g`. `ts` holds one
    /// time per row; times are clamped into `[0, 1]` before embedding.
    pub fn build_graph(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        x: NodeId,
        ts: &[f64],
        labels: Option<&[usize]>,
    ) -> Result<NodeId, ModelError> {
        let c = &self.config;
        let n = ts.len();
        let mut extra = Vec::with_capacity(n * (c.time_embed_dim + c.label_slots()));
        for (i, &t) in ts.iter().enumerate() {
            if !(0.0..=1.0).contains(&t) {
                return Err(ModelError::TimeOutOfRange(t));
            }
            extra.extend(embed_unchecked(t, c.time_embed_dim));
            if let Some(l) = self.check_label(labels.map(|l| l[i]))? {
                let mut one_hot = vec![0.0; c.num_classes + 1];
                one_hot[l] = 1.0;
                extra.extend(one_hot);
            }
        }
        let extra = g.constant(Tensor::matrix(n, c.time_embed_dim + c.label_slots(), extra));
        let mut h = g.concat(&[x, extra]);
        for layer in 0..=c.depth {
            h = g.affine(h, params[2 * layer], params[2 * layer + 1]);
            if layer < c.depth {
                h = g.activation(h, c.activation);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { hidden_dim: 8, depth: 2, time_embed_dim: 4, ..ModelConfig::default() }
    }

    #[test]
    fn init_is_deterministic() {
        let c = small();
        assert_eq!(init_params(&c, 7), init_params(&c, 7));
        assert_ne!(init_params(&c, 7), init_params(&c, 8));
    }

    #[test]
    fn fresh_model_is_zero_field() {
        let m = VelocityModel::init(ModelConfig::default(), 3).unwrap();
        for (x, t) in [([0.3, -2.0], 0.0), ([5.0, 1.0], 0.7), ([-1.0, 0.0], 1.0)] {
            assert_eq!(m.eval_velocity(&x, t, None).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn param_count_matches_layer_shapes() {
        // input 2 + 16 = 18; 18*64+64 + 2*(64*64+64) + 64*2+2
        let c = ModelConfig { data_dim: 2, hidden_dim: 64, depth: 3, time_embed_dim: 16, ..ModelConfig::default() };
        assert_eq!(c.param_count(), 18 * 64 + 64 + 2 * (64 * 64 + 64) + 64 * 2 + 2);
        assert_eq!(init_params(&c, 0).len(), 9666);
        let cond = ModelConfig { num_classes: 8, ..c };
        assert_eq!(cond.input_dim(), 2 + 16 + 9);
        assert_eq!(cond.param_count(), 27 * 64 + 64 + 2 * (64 * 64 + 64) + 64 * 2 + 2);
    }

    #[test]
    fn embedding_at_zero() {
        let e = time_embedding(0.0, 8).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn embedding_domain_and_range() {
        assert!(matches!(time_embedding(1.5, 8), Err(ModelError::TimeOutOfRange(_))));
        assert!(matches!(time_embedding(-0.1, 8), Err(ModelError::TimeOutOfRange(_))));
        for k in 0..=100 {
            let e = time_embedding(k as f64 / 100.0, 16).unwrap();
            assert!(e.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn embedding_is_lipschitz() {
        // |d/dt sin(w t)| <= w <= 1000, so a 1e-9 shift moves each entry by <= 1e-6.
        for &t in &[0.0, 0.25, 0.5, 0.999] {
            let a = time_embedding(t, 16).unwrap();
            let b = time_embedding(t + 1e-9, 16).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5));
        }
    }

    #[test]
    fn conditional_model_needs_label() {
        let c = ModelConfig { num_classes: 3, ..small() };
        let m = VelocityModel::init(c, 1).unwrap();
        assert!(matches!(m.eval_velocity(&[0.0, 0.0], 0.5, None), Err(ModelError::MissingLabel)));
        assert!(matches!(m.eval_velocity(&[0.0, 0.0], 0.5, Some(4)), Err(ModelError::InvalidLabel { .. })));
        assert!(m.eval_velocity(&[0.0, 0.0], 0.5, Some(3)).is_ok());
    }

    #[test]
    fn cfg_rule() {
        let c = ModelConfig { num_classes: 3, ..small() };
        let params = init_params_dense(&c, 11);
        let m = VelocityModel::new(c, params).unwrap();
        let x = [0.4, -0.2];
        let cond = m.eval_velocity(&x, 0.3, Some(1)).unwrap();
        let null = m.eval_velocity(&x, 0.3, Some(3)).unwrap();
        assert_eq!(m.cfg_velocity(&x, 0.3, 1, 1.0).unwrap(), cond);
        assert_eq!(m.cfg_velocity(&x, 0.3, 1, 0.0).unwrap(), null);
        let g2 = m.cfg_velocity(&x, 0.3, 1, 2.0).unwrap();
        for i in 0..2 {
            assert!((g2[i] - (null[i] + 2.0 * (cond[i] - null[i]))).abs() < 1e-15);
        }
        let unc = VelocityModel::init(small(), 1).unwrap();
        assert!(matches!(unc.cfg_velocity(&x, 0.3, 0, 2.0), Err(ModelError::NotConditional)));
    }

    #[test]
    fn cfg_scale_two_on_known_branches() {
        // Output bias only: v_null = (0, 0) for the null class is arranged by
        // zero weights, v_label = (1, -1) via the one-hot weight rows.
        let c = ModelConfig { data_dim: 2, hidden_dim: 1, depth: 1, time_embed_dim: 2, num_classes: 1, activation: Activation::Tanh };
        let mut p = ModelParams::zeros(&c);
        let mut flat = p.flatten();
        // hidden.0.weight is (6, 1); row 4 is the class-0 one-hot slot.
        flat[4] = 100.0; // tanh(100) == 1 for label 0, tanh(0) == 0 for null
        // hidden.0.bias at 6, output.weight (1, 2) at 7 and 8
        flat[7] = 1.0;
        flat[8] = -1.0;
        p.set_flat(&flat).unwrap();
        let m = VelocityModel::new(c, p).unwrap();
        assert_eq!(m.eval_velocity(&[0.0, 0.0], 0.0, Some(1)).unwrap(), vec![0.0, 0.0]);
        assert_eq!(m.eval_velocity(&[0.0, 0.0], 0.0, Some(0)).unwrap(), vec![1.0, -1.0]);
        assert_eq!(m.cfg_velocity(&[0.0, 0.0], 0.0, 0, 2.0).unwrap(), vec![2.0, -2.0]);
    }

    #[test]
    fn graph_and_direct_forward_agree() {
        let c = ModelConfig { num_classes: 2, ..small() };
        let m = VelocityModel::new(c.clone(), init_params_dense(&c, 5)).unwrap();
        let xs = Points::from_rows(&[[0.1, 0.2], [-1.0, 0.5], [2.0, -3.0]]);
        let ts = [0.0, 0.5, 1.0];
        let labels = [0, 2, 1];
        let direct = m.forward_batch(&xs, &ts, Some(&labels)).unwrap();
        let mut g = Graph::new();
        let pn = m.declare_params(&mut g);
        let x = g.constant(Tensor::matrix(3, 2, xs.data().to_vec()));
        let out = m.build_graph(&mut g, &pn, x, &ts, Some(&labels)).unwrap();
        g.mark_output(out);
        let v = g.forward(&m.bind_params(&pn)).unwrap();
        assert_eq!(v[0].data(), direct.data());
    }

    #[test]
    fn velocity_gradient_matches_finite_differences() {
        let c = small();
        let params = init_params_dense(&c, 9);
        let m = VelocityModel::new(c, params.clone()).unwrap();
        let err = autodiff::grad_check(
            |g| {
                let pn = m.declare_params(g);
                let x = g.constant(Tensor::matrix(2, 2, vec![0.5, -0.3, 1.2, 0.8]));
                let v = m.build_graph(g, &pn, x, &[0.2, 0.9], None).unwrap();
                let sq = g.square(v);
                (g.sum(sq), pn)
            },
            &params.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn smoothness_probe() {
        let c = ModelConfig::default();
        let m = VelocityModel::new(c.clone(), init_params_dense(&c, 2)).unwrap();
        let mut lip: f64 = 0.0;
        for i in 0..20 {
            for j in 0..5 {
                let x = [-3.0 + 0.3 * i as f64, 1.0 - 0.4 * j as f64];
                let t = 0.05 * (i % 20) as f64;
                let d = [1e-4, -5e-5];
                let a = m.eval_velocity(&x, t, None).unwrap();
                let b = m.eval_velocity(&[x[0] + d[0], x[1] + d[1]], t, None).unwrap();
                let num = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                let den = (d[0] * d[0] + d[1] * d[1]).sqrt();
                assert!(a.iter().all(|v| v.is_finite()));
                lip = lip.max(num / den);
            }
        }
        assert!(lip.is_finite() && lip < 1e3, "lipschitz estimate {lip}");
    }
}
