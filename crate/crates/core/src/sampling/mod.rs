//! Client-selection strategies.
//!
//! A round first allocates a probability vector over clients
//! ([`probs`]), then draws a cohort from it ([`select`]). Every unbiased
//! strategy attaches the importance weight `w_i / (n p_i)` to each draw so
//! that the weighted cohort sum is an unbiased estimate of the
//! full-participation sum `sum_i w_i v_i`.

pub mod cluster;
pub mod probs;
pub mod select;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use cluster::{probs_cluster_is, ClusterAllocation};
pub use probs::{
    cap_inclusion, floor_probabilities, probs_data_ratio, probs_delta, probs_fedis,
    probs_practical_update, probs_uniform, Allocation, PROBABILITY_FLOOR,
};
pub use select::{sample_with_replacement, sample_without_replacement, select_power_of_choice};

/// Tolerance on `sum p = 1` when accepting an externally built vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingProbabilities(Vec<f64>);

impl SamplingProbabilities {
    /// Validates nonnegativity and `sum p = 1` within [`SIMPLEX_TOL`].
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidProbabilities("empty probability vector".into()));
        }
        if let Some(i) = p.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidProbabilities(format!(
                "p[{i}] = {} is negative or not finite",
                p[i]
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidProbabilities(format!("probabilities sum to {sum}")));
        }
        Ok(SamplingProbabilities(p))
    }

    /// Normalizes nonnegative scores onto the simplex. Returns `None` when
    /// the scores sum to zero.
    pub fn from_scores(scores: &[f64]) -> Option<Self> {
        let sum: f64 = scores.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return None;
        }
        Some(SamplingProbabilities(scores.iter().map(|s| s / sum).collect()))
    }

    pub(crate) fn from_raw(p: Vec<f64>) -> Self {
        SamplingProbabilities(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

impl std::ops::Index<usize> for SamplingProbabilities {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Cached per-client statistics from the client's last participation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClientStats {
    /// Norm of the summed local gradients.
    pub grad_sum_norm: f64,
    /// Distance of the client gradient from the (estimated) global gradient.
    pub diversity: f64,
    /// Variance of the per-step gradients across local batches.
    pub local_var: f64,
    /// `None` until the client has participated.
    pub last_round: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaSamplerConfig {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for DeltaSamplerConfig {
    fn default() -> Self {
        DeltaSamplerConfig {
            alpha1: 0.5,
            alpha2: 0.5,
        }
    }
}

impl DeltaSamplerConfig {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self> {
        if !(alpha1 >= 0.0 && alpha2 >= 0.0) || !(alpha1 + alpha2 > 0.0) {
            return Err(Error::InvalidSampling(format!(
                "alpha1/alpha2 must be nonnegative with a positive sum, got {alpha1}/{alpha2}"
            )));
        }
        Ok(DeltaSamplerConfig { alpha1, alpha2 })
    }

    /// `sqrt(alpha1 * zeta^2 + alpha2 * sigma^2)`, with `local_var = sigma^2`.
    pub fn score(&self, diversity: f64, local_var: f64) -> f64 {
        (self.alpha1 * diversity * diversity + self.alpha2 * local_var).sqrt()
    }
}

/// A drawn cohort, sorted by client id, with the multiplier applied to each
/// draw during aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub cohort: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.cohort.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cohort.is_empty()
    }

    /// Distinct client ids in ascending order.
    pub fn unique_clients(&self) -> Vec<usize> {
        let mut ids = self.cohort.clone();
        ids.dedup();
        ids
    }

    /// `sum_k weights[k] * vectors[cohort[k]]`, accumulated in cohort order.
    pub fn weighted_sum(&self, vectors: &[Vec<f64>]) -> Vec<f64> {
        let dim = vectors.first().map_or(0, |v| v.len());
        let mut acc = vec![0.0; dim];
        for (&i, &w) in self.cohort.iter().zip(&self.weights) {
            crate::vector::axpy(&mut acc, w, &vectors[i]);
        }
        acc
    }

    pub(crate) fn from_draws(mut draws: Vec<(usize, f64)>) -> Self {
        draws.sort_by_key(|&(i, _)| i);
        let (cohort, weights) = draws.into_iter().unzip();
        SelectionResult { cohort, weights }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Uniform,
    /// Multinomial by data ratio.
    Md,
    FedIs,
    Delta,
    PracIs,
    PracDelta,
    ClusterIs,
    PowerOfChoice,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Uniform,
        Strategy::Md,
        Strategy::FedIs,
        Strategy::Delta,
        Strategy::PracIs,
        Strategy::PracDelta,
        Strategy::ClusterIs,
        Strategy::PowerOfChoice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Md => "md",
            Strategy::FedIs => "fedis",
            Strategy::Delta => "delta",
            Strategy::PracIs => "prac_is",
            Strategy::PracDelta => "prac_delta",
            Strategy::ClusterIs => "cluster_is",
            Strategy::PowerOfChoice => "power_of_choice",
        }
    }

    /// Strategies whose probabilities are recomputed from a full pass over all clients.
    pub fn is_oracle(self) -> bool {
        matches!(self, Strategy::FedIs | Strategy::Delta | Strategy::ClusterIs)
    }

    /// Strategies that update cached probabilities from stale cohort statistics.
    pub fn is_practical(self) -> bool {
        matches!(self, Strategy::PracIs | Strategy::PracDelta)
    }

    pub fn is_unbiased(self) -> bool {
        self != Strategy::PowerOfChoice
    }

    pub fn valid_names() -> String {
        Strategy::ALL.iter().map(|s| s.name()).collect::<Vec<_>>().join(" | ")
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                format!("unknown strategy `{s}`; expected one of {}", Strategy::valid_names())
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Replacement {
    With,
    #[default]
    Without,
}

impl Replacement {
    pub fn name(self) -> &'static str {
        match self {
            Replacement::With => "with",
            Replacement::Without => "without",
        }
    }
}

impl fmt::Display for Replacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Replacement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "with" => Ok(Replacement::With),
            "without" => Ok(Replacement::Without),
            other => Err(format!("unknown replacement mode `{other}`; expected with | without")),
        }
    }
}
