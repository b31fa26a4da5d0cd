//! Cohort samplers.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{SamplingProbabilities, SelectionResult};
use crate::error::{Error, Result};

/// Slack allowed on `n p_i <= 1` before a vector is rejected as uncapped.
const INCLUSION_TOL: f64 = 1e-9;

fn check_weights(p: &SamplingProbabilities, weights: &[f64]) -> Result<()> {
    if weights.len() != p.len() {
        return Err(Error::InvalidSampling(format!(
            "{} client weights for {} probabilities",
            weights.len(),
            p.len()
        )));
    }
    Ok(())
}

fn importance_weight(w: f64, n: usize, p: f64) -> f64 {
    w / (n as f64 * p)
}

/// `n` i.i.d. categorical draws from `p`. Each draw of client `i` carries
/// weight `w_i / (n p_i)`.
pub fn sample_with_replacement<R: Rng + ?Sized>(
    p: &SamplingProbabilities,
    weights: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<SelectionResult> {
    check_weights(p, weights)?;
    if n == 0 {
        return Err(Error::InvalidSampling("cohort size must be >= 1".into()));
    }
    let dist = WeightedIndex::new(p.as_slice())
        .map_err(|e| Error::InvalidProbabilities(e.to_string()))?;
    let draws = (0..n)
        .map(|_| {
            let i = dist.sample(rng);
            (i, importance_weight(weights[i], n, p[i]))
        })
        .collect();
    Ok(SelectionResult::from_draws(draws))
}

/// Systematic PPS sampling: `n` distinct clients with inclusion probability
/// exactly `n p_i`.
///
/// Clients are laid out in a random order as consecutive intervals of length
/// `n p_i` on `[0, n)`; a single uniform start `u` selects the clients whose
/// interval contains `u + k` for `k = 0..n`. `p` must already satisfy
/// `n p_i <= 1` (see [`super::cap_inclusion`]).
pub fn sample_without_replacement<R: Rng + ?Sized>(
    p: &SamplingProbabilities,
    weights: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<SelectionResult> {
    check_weights(p, weights)?;
    let m = p.len();
    if n == 0 || n > m {
        return Err(Error::InvalidSampling(format!(
            "cohort size {n} must be in 1..={m} without replacement"
        )));
    }
    if let Some(i) = (0..m).find(|&i| n as f64 * p[i] > 1.0 + INCLUSION_TOL) {
        return Err(Error::InclusionOverflow {
            client: i,
            value: n as f64 * p[i],
        });
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let start: f64 = rng.random();

    let mut draws = Vec::with_capacity(n);
    let mut cum = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        if draws.len() == n {
            break;
        }
        cum += n as f64 * p[i];
        let next = start + draws.len() as f64;
        // the final client absorbs any rounding shortfall in the running sum
        let last = pos + 1 == m;
        if next < cum || last {
            draws.push((i, importance_weight(weights[i], n, p[i])));
        }
    }
    if draws.len() != n {
        return Err(Error::InvalidSampling(format!(
            "systematic sampling produced {} of {n} clients",
            draws.len()
        )));
    }
    Ok(SelectionResult::from_draws(draws))
}

/// Power-of-choice: draw `d` candidates uniformly without replacement and
/// keep the `n` with the largest loss (ties go to the lower id). Weights are
/// the data ratios renormalized over the cohort, with no importance correction.
pub fn select_power_of_choice<R: Rng + ?Sized>(
    candidates: usize,
    n: usize,
    losses: &[f64],
    weights: &[f64],
    rng: &mut R,
) -> Result<SelectionResult> {
    let m = losses.len();
    if weights.len() != m {
        return Err(Error::InvalidSampling(format!("{} weights for {m} clients", weights.len())));
    }
    if candidates > m {
        return Err(Error::InvalidSampling(format!(
            "candidate count {candidates} exceeds client count {m}"
        )));
    }
    if n == 0 || n > candidates {
        return Err(Error::InvalidSampling(format!(
            "cohort size {n} must be in 1..={candidates}"
        )));
    }
    let mut pool = index::sample(rng, m, candidates).into_vec();
    pool.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    pool.truncate(n);
    let total: f64 = pool.iter().map(|&i| weights[i]).sum();
    let draws = pool
        .into_iter()
        .map(|i| {
            let w = if total > 0.0 { weights[i] / total } else { 1.0 / n as f64 };
            (i, w)
        })
        .collect();
    Ok(SelectionResult::from_draws(draws))
}
