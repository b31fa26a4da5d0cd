//! Local objectives and the plain SGD step.
//!
//! Two model families are supported:
//!
//! * log-quadratic regression, where each sample carries a target `y` and the
//!   per-sample loss is `sum_k (y - log((A x_k - b)^2 / 2))^2` with per-client
//!   constants `(A, b)` applied elementwise to the parameter vector;
//! * multinomial logistic regression with a bias term per class.
//!
//! Batch reductions run in ascending sample order. The indexed entry points
//! sort their index list first, so a permuted batch yields bit-identical
//! results.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::vector;

/// `|A x - b|` below this is treated as the log singularity.
pub const SINGULARITY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(pub Vec<f64>);

macro_rules! vector_newtype {
    ($t:ident) => {
        impl $t {
            pub fn zeros(dim: usize) -> Self {
                $t(vec![0.0; dim])
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }

        impl Deref for $t {
            type Target = [f64];

            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $t {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl From<Vec<f64>> for $t {
            fn from(v: Vec<f64>) -> Self {
                $t(v)
            }
        }
    };
}

vector_newtype!(ParamVector);
vector_newtype!(GradVector);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Real(f64),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub target: Target,
}

impl Example {
    pub fn regression(target: f64) -> Self {
        Example {
            features: Vec::new(),
            target: Target::Real(target),
        }
    }

    pub fn labelled(features: Vec<f64>, class: usize) -> Self {
        Example {
            features,
            target: Target::Class(class),
        }
    }
}

/// Per-client constants of the regression objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConstants {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSpec {
    /// Log-quadratic regression over `dim` parameters.
    Regression { dim: usize },
    /// Multinomial logistic regression over `features`-dimensional inputs.
    Logistic { features: usize, classes: usize },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelSpec::Regression { dim } if dim == 0 => {
                Err(Error::InvalidModel("regression dimension must be >= 1".into()))
            }
            ModelSpec::Logistic { features, .. } if features == 0 => {
                Err(Error::InvalidModel("feature dimension must be >= 1".into()))
            }
            ModelSpec::Logistic { classes, .. } if classes < 2 => {
                Err(Error::InvalidModel("logistic model needs at least 2 classes".into()))
            }
            _ => Ok(()),
        }
    }

    /// Length of the flat parameter vector.
    pub fn param_len(&self) -> usize {
        match *self {
            ModelSpec::Regression { dim } => dim,
            ModelSpec::Logistic { features, classes } => classes * (features + 1),
        }
    }

    /// Mean loss over `batch`, reduced in slice order.
    pub fn loss(
        &self,
        params: &ParamVector,
        batch: &[Example],
        constants: Option<ClientConstants>,
    ) -> Result<f64> {
        self.loss_iter(params, batch.iter(), batch.len(), constants)
    }

    /// Mean loss over `examples[indices]`, reduced in ascending index order.
    pub fn loss_indexed(
        &self,
        params: &ParamVector,
        examples: &[Example],
        indices: &[usize],
        constants: Option<ClientConstants>,
    ) -> Result<f64> {
        let sorted = sorted_indices(indices);
        self.loss_iter(
            params,
            sorted.iter().map(|&i| &examples[i]),
            sorted.len(),
            constants,
        )
    }

    /// Mean analytic gradient over `batch`, reduced in slice order.
    pub fn grad(
        &self,
        params: &ParamVector,
        batch: &[Example],
        constants: Option<ClientConstants>,
    ) -> Result<GradVector> {
        self.grad_iter(params, batch.iter(), batch.len(), constants)
    }

    /// Mean analytic gradient over `examples[indices]`, reduced in ascending index order.
    pub fn grad_indexed(
        &self,
        params: &ParamVector,
        examples: &[Example],
        indices: &[usize],
        constants: Option<ClientConstants>,
    ) -> Result<GradVector> {
        let sorted = sorted_indices(indices);
        self.grad_iter(
            params,
            sorted.iter().map(|&i| &examples[i]),
            sorted.len(),
            constants,
        )
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(Error::DimensionMismatch {
                expected: self.param_len(),
                actual: params.len(),
            });
        }
        Ok(())
    }

    fn loss_iter<'a>(
        &self,
        params: &ParamVector,
        batch: impl Iterator<Item = &'a Example>,
        count: usize,
        constants: Option<ClientConstants>,
    ) -> Result<f64> {
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        self.check_params(params)?;
        let mut total = 0.0;
        match *self {
            ModelSpec::Regression { .. } => {
                let c = constants.ok_or(Error::MissingConstants)?;
                let preds = regression_predictions(params, c)?;
                for ex in batch {
                    let y = real_target(ex)?;
                    total += preds
                        .iter()
                        .map(|(h, _)| (y - h) * (y - h))
                        .sum::<f64>();
                }
            }
            ModelSpec::Logistic { features, classes } => {
                let mut logits = vec![0.0; classes];
                for ex in batch {
                    let label = class_target(ex, classes)?;
                    check_features(ex, features)?;
                    compute_logits(params, &ex.features, &mut logits);
                    total += log_sum_exp(&logits) - logits[label];
                }
            }
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(loss)
    }

    fn grad_iter<'a>(
        &self,
        params: &ParamVector,
        batch: impl Iterator<Item = &'a Example>,
        count: usize,
        constants: Option<ClientConstants>,
    ) -> Result<GradVector> {
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        self.check_params(params)?;
        let mut g = vec![0.0; self.param_len()];
        match *self {
            ModelSpec::Regression { .. } => {
                let c = constants.ok_or(Error::MissingConstants)?;
                let preds = regression_predictions(params, c)?;
                for ex in batch {
                    let y = real_target(ex)?;
                    for (gk, (h, dh)) in g.iter_mut().zip(&preds) {
                        *gk += -2.0 * (y - h) * dh;
                    }
                }
            }
            ModelSpec::Logistic { features, classes } => {
                let mut logits = vec![0.0; classes];
                let stride = features + 1;
                for ex in batch {
                    let label = class_target(ex, classes)?;
                    check_features(ex, features)?;
                    compute_logits(params, &ex.features, &mut logits);
                    let lse = log_sum_exp(&logits);
                    for (c, z) in logits.iter().enumerate() {
                        let mut err = (z - lse).exp();
                        if c == label {
                            err -= 1.0;
                        }
                        let row = &mut g[c * stride..(c + 1) * stride];
                        vector::axpy(&mut row[..features], err, &ex.features);
                        row[features] += err;
                    }
                }
            }
        }
        let inv = 1.0 / count as f64;
        g.iter_mut().for_each(|x| *x *= inv);
        if !vector::all_finite(&g) {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(GradVector(g))
    }
}

/// `params - lr * g`
pub fn sgd_step(params: &ParamVector, g: &GradVector, lr: f64) -> Result<ParamVector> {
    if params.len() != g.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: g.len(),
        });
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidModel(format!("learning rate must be positive, got {lr}")));
    }
    Ok(ParamVector(
        params.iter().zip(g.iter()).map(|(x, d)| x - lr * d).collect(),
    ))
}

fn sorted_indices(indices: &[usize]) -> Vec<usize> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted
}

/// Per coordinate: `(log((A x - b)^2 / 2), d/dx of that)`.
fn regression_predictions(params: &ParamVector, c: ClientConstants) -> Result<Vec<(f64, f64)>> {
    params
        .iter()
        .enumerate()
        .map(|(coord, &x)| {
            let r = c.a * x - c.b;
            if r.abs() < SINGULARITY_EPS {
                return Err(Error::Singularity { coord, residual: r });
            }
            Ok(((r * r / 2.0).ln(), 2.0 * c.a / r))
        })
        .collect()
}

fn real_target(ex: &Example) -> Result<f64> {
    match ex.target {
        Target::Real(y) => Ok(y),
        Target::Class(_) => Err(Error::InvalidModel(
            "regression model received a class-labelled example".into(),
        )),
    }
}

fn class_target(ex: &Example, classes: usize) -> Result<usize> {
    match ex.target {
        Target::Class(c) if c < classes => Ok(c),
        Target::Class(c) => Err(Error::InvalidModel(format!(
            "class index {c} out of range for {classes} classes"
        ))),
        Target::Real(_) => Err(Error::InvalidModel(
            "logistic model received a real-valued target".into(),
        )),
    }
}

fn check_features(ex: &Example, features: usize) -> Result<()> {
    if ex.features.len() != features {
        return Err(Error::DimensionMismatch {
            expected: features,
            actual: ex.features.len(),
        });
    }
    Ok(())
}

fn compute_logits(params: &[f64], x: &[f64], out: &mut [f64]) {
    let stride = x.len() + 1;
    for (c, z) in out.iter_mut().enumerate() {
        let row = &params[c * stride..(c + 1) * stride];
        *z = row[..x.len()].iter().zip(x).map(|(w, f)| w * f).sum::<f64>() + row[x.len()];
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
