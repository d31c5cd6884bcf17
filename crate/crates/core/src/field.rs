//! Velocity fields evaluated on batches of points.
//!
//! Samplers and diagnostics only need `v(x, t)`, so they work against the
//! [`VelocityField`] trait. Trained models, analytic stubs and counting
//! wrappers all implement it.

use std::cell::Cell;

use crate::model::{ModelError, VelocityModel};
use crate::points::Points;

pub trait VelocityField {
    fn dim(&self) -> usize;

    /// Velocity at every row of `xs`, all at time `t`.
    fn velocity(&self, xs: &Points, t: f64) -> Result<Points, ModelError>;

    /// Network evaluations consumed by one call of [`VelocityField::velocity`].
    fn model_calls_per_eval(&self) -> usize {
        1
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn velocity(&self, xs: &Points, t: f64) -> Result<Points, ModelError> {
        (**self).velocity(xs, t)
    }

    fn model_calls_per_eval(&self) -> usize {
        (**self).model_calls_per_eval()
    }
}

fn check_dim(expected: usize, xs: &Points) -> Result<(), ModelError> {
    if xs.dim() != expected {
        return Err(ModelError::DimensionMismatch { expected, found: xs.dim() });
    }
    Ok(())
}

/// `v(x, t) = c`.
#[derive(Clone, Debug)]
pub struct ConstantField {
    pub value: Vec<f64>,
}

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn velocity(&self, xs: &Points, _t: f64) -> Result<Points, ModelError> {
        check_dim(self.dim(), xs)?;
        let data = self.value.iter().copied().cycle().take(xs.data().len()).collect();
        Ok(Points::new(xs.dim(), data))
    }
}

/// `v(x, t) = A x` with a row-major `d x d` matrix.
#[derive(Clone, Debug)]
pub struct LinearField {
    dim: usize,
    matrix: Vec<f64>,
}

impl LinearField {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Self {
        assert_eq!(matrix.len(), dim * dim, "linear field needs a square matrix");
        Self { dim, matrix }
    }

    /// `v = c x`.
    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = c;
        }
        Self::new(dim, m)
    }

    /// Quarter-turn rotation `v(x) = (-x1, x0)`.
    pub fn rotation() -> Self {
        Self::new(2, vec![0.0, -1.0, 1.0, 0.0])
    }
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, xs: &Points, _t: f64) -> Result<Points, ModelError> {
        check_dim(self.dim, xs)?;
        let d = self.dim;
        let mut out = Vec::with_capacity(xs.data().len());
        for x in xs.rows() {
            for r in 0..d {
                out.push((0..d).map(|c| self.matrix[r * d + c] * x[c]).sum());
            }
        }
        Ok(Points::new(d, out))
    }
}

/// `v(x, t) = t a`.
#[derive(Clone, Debug)]
pub struct TimeLinearField {
    pub a: Vec<f64>,
}

impl VelocityField for TimeLinearField {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn velocity(&self, xs: &Points, t: f64) -> Result<Points, ModelError> {
        check_dim(self.dim(), xs)?;
        let row: Vec<f64> = self.a.iter().map(|a| t * a).collect();
        let data = row.iter().copied().cycle().take(xs.data().len()).collect();
        Ok(Points::new(xs.dim(), data))
    }
}

/// Pointwise closure field.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> VelocityField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, xs: &Points, t: f64) -> Result<Points, ModelError> {
        check_dim(self.dim, xs)?;
        let mut out = Vec::with_capacity(xs.data().len());
        for x in xs.rows() {
            let v = (self.f)(x, t);
            assert_eq!(v.len(), self.dim, "closure returned the wrong dimension");
            out.extend(v);
        }
        Ok(Points::new(self.dim, out))
    }
}

/// Counts calls to the wrapped field.
pub struct CountingField<F> {
    inner: F,
    calls: Cell<usize>,
}

impl<F: VelocityField> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    /// Batched velocity evaluations so far.
    pub fn evals(&self) -> usize {
        self.calls.get()
    }

    /// Network evaluations so far (evaluations times calls per evaluation).
    pub fn model_calls(&self) -> usize {
        self.calls.get() * self.inner.model_calls_per_eval()
    }

    pub fn reset(&self) {
        self.calls.set(0);
    }

    pub fn into_inner(self) -> F {
        self.inner
    }
}

impl<F: VelocityField> VelocityField for CountingField<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn velocity(&self, xs: &Points, t: f64) -> Result<Points, ModelError> {
        self.calls.set(self.calls.get() + 1);
        self.inner.velocity(xs, t)
    }

    fn model_calls_per_eval(&self) -> usize {
        self.inner.model_calls_per_eval()
    }
}

/// A trained model viewed as a field, with optional labels and guidance.
#[derive(Clone, Debug)]
pub struct ModelField<'a> {
    model: &'a VelocityModel,
    labels: Option<Vec<usize>>,
    cfg_scale: f64,
}

impl<'a> ModelField<'a> {
    pub fn unconditional(model: &'a VelocityModel) -> Self {
        Self { model, labels: None, cfg_scale: 1.0 }
    }

    /// Per-row labels; `cfg_scale != 1` mixes in the null-class velocity.
    pub fn guided(model: &'a VelocityModel, labels: Vec<usize>, cfg_scale: f64) -> Result<Self, ModelError> {
        if !model.config().is_conditional() {
            return Err(ModelError::NotConditional);
        }
        Ok(Self { model, labels: Some(labels), cfg_scale })
    }

    fn is_guided(&self) -> bool {
        self.labels.is_some() && self.cfg_scale != 1.0
    }
}

impl VelocityField for ModelField<'_> {
    fn dim(&self) -> usize {
        self.model.config().data_dim
    }

    fn velocity(&self, xs: &Points, t: f64) -> Result<Points, ModelError> {
        let ts = vec![t; xs.len()];
        match &self.labels {
            Some(l) if self.is_guided() => self.model.cfg_batch(xs, &ts, l, self.cfg_scale),
            Some(l) => self.model.forward_batch(xs, &ts, Some(l)),
            None if self.model.config().is_conditional() => {
                // unlabeled sampling from a conditional model uses the null class
                let null = vec![self.model.config().num_classes; xs.len()];
                self.model.forward_batch(xs, &ts, Some(&null))
            }
            None => self.model.forward_batch(xs, &ts, None),
        }
    }

    fn model_calls_per_eval(&self) -> usize {
        if self.is_guided() {
            2
        } else {
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params_dense, ModelConfig};

    #[test]
    fn stub_fields() {
        let xs = Points::from_rows(&[[1.0, 2.0], [3.0, -1.0]]);
        let c = ConstantField { value: vec![0.5, -0.5] };
        assert_eq!(c.velocity(&xs, 0.3).unwrap().row(1), &[0.5, -0.5]);
        let r = LinearField::rotation();
        assert_eq!(r.velocity(&xs, 0.0).unwrap().row(0), &[-2.0, 1.0]);
        let s = LinearField::scaled_identity(2, 0.1);
        assert_eq!(s.velocity(&xs, 0.0).unwrap().row(1), &[0.1 * 3.0, 0.1 * -1.0]);
        let tl = TimeLinearField { a: vec![2.0, 4.0] };
        assert_eq!(tl.velocity(&xs, 0.5).unwrap().row(0), &[1.0, 2.0]);
        let f = FnField::new(2, |x: &[f64], t: f64| vec![x[0] * t, x[1]]);
        assert_eq!(f.velocity(&xs, 2.0).unwrap().row(1), &[6.0, -1.0]);
        assert!(c.velocity(&Points::zeros(1, 3), 0.0).is_err());
    }

    #[test]
    fn counting_and_cfg_cost() {
        let c = ModelConfig { hidden_dim: 4, depth: 1, time_embed_dim: 4, num_classes: 3, ..ModelConfig::default() };
        let m = VelocityModel::new(c.clone(), init_params_dense(&c, 3)).unwrap();
        let xs = Points::zeros(2, 2);
        let guided = CountingField::new(ModelField::guided(&m, vec![0, 1], 2.5).unwrap());
        guided.velocity(&xs, 0.1).unwrap();
        guided.velocity(&xs, 0.2).unwrap();
        assert_eq!((guided.evals(), guided.model_calls()), (2, 4));
        let plain = CountingField::new(ModelField::guided(&m, vec![0, 1], 1.0).unwrap());
        plain.velocity(&xs, 0.1).unwrap();
        assert_eq!(plain.model_calls(), 1);
        let unc = ModelConfig { num_classes: 0, ..c };
        let m2 = VelocityModel::init(unc, 1).unwrap();
        assert!(matches!(ModelField::guided(&m2, vec![0], 2.0), Err(ModelError::NotConditional)));
    }
}
