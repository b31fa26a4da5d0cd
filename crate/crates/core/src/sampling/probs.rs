//! Probability allocators.
//!
//! Allocators return the exact formula output. The round driver then applies
//! [`floor_probabilities`] so importance weights stay bounded, and
//! [`cap_inclusion`] before drawing without replacement.

use log::warn;

use super::{ClientStats, DeltaSamplerConfig, SamplingProbabilities};
use crate::error::{Error, Result};

/// Lower bound applied to every allocation before sampling.
pub const PROBABILITY_FLOOR: f64 = 1e-8;

/// Drift beyond which a chained practical update is renormalized.
const PRACTICAL_DRIFT_TOL: f64 = 1e-9;

/// Allocator output. `fell_back` is set when the scores were degenerate and
/// a fallback (uniform, or the previous vector) was returned instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub probs: SamplingProbabilities,
    pub fell_back: bool,
}

impl Allocation {
    fn exact(probs: SamplingProbabilities) -> Self {
        Allocation { probs, fell_back: false }
    }
}

pub fn probs_uniform(m: usize) -> SamplingProbabilities {
    assert!(m >= 1, "need at least one client");
    SamplingProbabilities::from_raw(vec![1.0 / m as f64; m])
}

/// Data-ratio (MD) sampling: `p = w`.
pub fn probs_data_ratio(weights: &[f64]) -> Result<SamplingProbabilities> {
    if let Some(i) = weights.iter().position(|&w| w < 0.0) {
        return Err(Error::InvalidProbabilities(format!(
            "client {i} has negative weight {}",
            weights[i]
        )));
    }
    SamplingProbabilities::new(weights.to_vec())
}

/// Importance sampling on the norm of the summed local gradient.
pub fn probs_fedis(stats: &[ClientStats]) -> Allocation {
    let scores: Vec<f64> = stats.iter().map(|s| s.grad_sum_norm).collect();
    normalize_or_uniform(&scores, "fedis")
}

/// Diversity-plus-local-variance sampling, `p_i ∝ sqrt(a1 zeta_i^2 + a2 sigma_i^2)`.
pub fn probs_delta(stats: &[ClientStats], cfg: &DeltaSamplerConfig) -> Allocation {
    let scores: Vec<f64> = stats
        .iter()
        .map(|s| cfg.score(s.diversity, s.local_var))
        .collect();
    normalize_or_uniform(&scores, "delta")
}

fn normalize_or_uniform(scores: &[f64], who: &str) -> Allocation {
    match SamplingProbabilities::from_scores(scores) {
        Some(p) => Allocation::exact(p),
        None => {
            warn!("{who}: all scores are zero, falling back to uniform sampling");
            Allocation {
                probs: probs_uniform(scores.len()),
                fell_back: true,
            }
        }
    }
}

/// Stale-statistics update: the mass held by the cohort is redistributed
/// over the cohort in proportion to `fresh_scores`; everyone else keeps
/// their previous probability.
pub fn probs_practical_update(
    prev: &SamplingProbabilities,
    cohort: &[usize],
    fresh_scores: &[f64],
) -> Result<Allocation> {
    if cohort.len() != fresh_scores.len() {
        return Err(Error::InvalidSampling(format!(
            "{} cohort members but {} scores",
            cohort.len(),
            fresh_scores.len()
        )));
    }
    let m = prev.len();
    let mut seen = vec![false; m];
    for &i in cohort {
        if i >= m {
            return Err(Error::InvalidSampling(format!("client {i} out of range for m = {m}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidSampling(format!("client {i} appears twice in the cohort")));
        }
    }
    if let Some(s) = fresh_scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::InvalidSampling(format!("invalid score {s}")));
    }
    let score_sum: f64 = fresh_scores.iter().sum();
    if !(score_sum > 0.0) {
        warn!("practical update: all fresh scores are zero, keeping previous probabilities");
        return Ok(Allocation {
            probs: prev.clone(),
            fell_back: true,
        });
    }

    // Mass the cohort held, i.e. 1 - sum over non-members.
    let cohort_mass: f64 = cohort.iter().map(|&i| prev[i]).sum();
    let mut p = prev.as_slice().to_vec();
    for (&i, &s) in cohort.iter().zip(fresh_scores) {
        p[i] = s / score_sum * cohort_mass;
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PRACTICAL_DRIFT_TOL {
        p.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Allocation::exact(SamplingProbabilities::from_raw(p)))
}

/// Raises entries below [`PROBABILITY_FLOOR`] to the floor and rescales the
/// rest so the vector stays on the simplex.
pub fn floor_probabilities(p: &SamplingProbabilities) -> SamplingProbabilities {
    let m = p.len();
    if PROBABILITY_FLOOR * m as f64 >= 1.0 {
        return probs_uniform(m);
    }
    let low = p.as_slice().iter().filter(|&&v| v < PROBABILITY_FLOOR).count();
    if low == 0 {
        return p.clone();
    }
    let rest: f64 = p.as_slice().iter().filter(|&&v| v >= PROBABILITY_FLOOR).sum();
    let scale = (1.0 - low as f64 * PROBABILITY_FLOOR) / rest;
    SamplingProbabilities::from_raw(
        p.as_slice()
            .iter()
            .map(|&v| if v < PROBABILITY_FLOOR { PROBABILITY_FLOOR } else { v * scale })
            .collect(),
    )
}

/// Enforces `n p_i <= 1` by clamping offenders to `1/n` and handing the excess
/// to the unclamped clients in proportion to their original mass. The clamped
/// set only grows, so this terminates in at most `m` passes.
pub fn cap_inclusion(p: &SamplingProbabilities, n: usize) -> Result<SamplingProbabilities> {
    let m = p.len();
    if n == 0 || n > m {
        return Err(Error::InvalidSampling(format!(
            "cohort size {n} must be in 1..={m} for sampling without replacement"
        )));
    }
    let cap = 1.0 / n as f64;
    let orig = p.as_slice();
    let mut clamped = vec![false; m];
    let mut q = orig.to_vec();
    for _ in 0..=m {
        let n_clamped = clamped.iter().filter(|&&c| c).count();
        let free_mass = 1.0 - n_clamped as f64 * cap;
        let free_sum: f64 = (0..m).filter(|&i| !clamped[i]).map(|i| orig[i]).sum();
        let n_free = m - n_clamped;
        for i in 0..m {
            q[i] = if clamped[i] {
                cap
            } else if free_sum > 0.0 {
                orig[i] * free_mass / free_sum
            } else {
                free_mass / n_free as f64
            };
        }
        let mut changed = false;
        for i in 0..m {
            if !clamped[i] && n as f64 * q[i] > 1.0 + 1e-12 {
                clamped[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(SamplingProbabilities::from_raw(q))
}
