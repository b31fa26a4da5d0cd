//! Cluster-based importance sampling.
//!
//! Clients are grouped by 1-D k-means on their gradient norms. Each cluster
//! gets a share of the cohort proportional to its size, and within a cluster
//! clients are drawn FedIS-style with `p ∝ norm`. The stratified estimator
//! `sum_c (1/n_c) sum_{i in S_c} (w_i / p_i^c) v_i` is unbiased; it equals the
//! usual `w_i / (n p_i)` weighting under the effective marginal
//! `p_i = (n_c / n) p_i^c`.

use rand::Rng;

use super::probs::{cap_inclusion, floor_probabilities};
use super::select::{sample_with_replacement, sample_without_replacement};
use super::{ClientStats, Replacement, SamplingProbabilities, SelectionResult};
use crate::data::apportion;
use crate::error::{Error, Result};

const KMEANS_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAllocation {
    /// Client ids per cluster, ascending.
    pub members: Vec<Vec<usize>>,
    /// Cohort slots per cluster; sums to the budget.
    pub budgets: Vec<usize>,
    /// Within-cluster probabilities, aligned with `members`.
    pub within: Vec<SamplingProbabilities>,
    /// Set when some cluster had all-zero norms and fell back to uniform.
    pub fell_back: bool,
}

impl ClusterAllocation {
    pub fn budget(&self) -> usize {
        self.budgets.iter().sum()
    }

    /// Marginal per-draw probability over all `m` clients.
    pub fn effective(&self, m: usize) -> SamplingProbabilities {
        let n = self.budget() as f64;
        let mut p = vec![0.0; m];
        for ((ids, &b), q) in self.members.iter().zip(&self.budgets).zip(&self.within) {
            for (k, &i) in ids.iter().enumerate() {
                p[i] = b as f64 / n * q[k];
            }
        }
        SamplingProbabilities::from_raw(p)
    }

    /// Floors (and, without replacement, caps) each within-cluster vector.
    pub fn prepared(&self, replacement: Replacement) -> Result<ClusterAllocation> {
        let within = self
            .within
            .iter()
            .zip(&self.budgets)
            .map(|(q, &b)| {
                let q = floor_probabilities(q);
                match replacement {
                    Replacement::With => Ok(q),
                    Replacement::Without => cap_inclusion(&q, b),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClusterAllocation { within, ..self.clone() })
    }

    /// Draws each cluster's budget and merges the draws. The weight of a
    /// draw of client `i` in cluster `c` is `w_i / (n_c p_i^c)`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        replacement: Replacement,
        weights: &[f64],
        rng: &mut R,
    ) -> Result<SelectionResult> {
        let mut draws = Vec::with_capacity(self.budget());
        for ((ids, &b), q) in self.members.iter().zip(&self.budgets).zip(&self.within) {
            let local_w: Vec<f64> = ids.iter().map(|&i| weights[i]).collect();
            let s = match replacement {
                Replacement::With => sample_with_replacement(q, &local_w, b, rng)?,
                Replacement::Without => sample_without_replacement(q, &local_w, b, rng)?,
            };
            draws.extend(s.cohort.iter().map(|&k| ids[k]).zip(s.weights));
        }
        Ok(SelectionResult::from_draws(draws))
    }
}

/// Clusters clients by `grad_sum_norm` and allocates `budget` cohort slots.
pub fn probs_cluster_is<R: Rng + ?Sized>(
    stats: &[ClientStats],
    clusters: usize,
    budget: usize,
    rng: &mut R,
) -> Result<ClusterAllocation> {
    let m = stats.len();
    if clusters == 0 || clusters > m {
        return Err(Error::InvalidSampling(format!(
            "cluster count {clusters} must be in 1..={m}"
        )));
    }
    if budget < clusters {
        return Err(Error::InvalidSampling(format!(
            "budget {budget} is smaller than cluster count {clusters}"
        )));
    }
    let norms: Vec<f64> = stats.iter().map(|s| s.grad_sum_norm).collect();
    let (centers, assignment) = kmeans_1d(&norms, clusters, rng);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
    for (i, &c) in assignment.iter().enumerate() {
        members[c].push(i);
    }
    // A cluster left empty is dropped; its points already sit in the nearest one.
    members.retain(|ids| !ids.is_empty());

    let sizes: Vec<f64> = members.iter().map(|ids| ids.len() as f64).collect();
    let budgets = allocate_budgets(&sizes, budget);

    let mut fell_back = false;
    let within = members
        .iter()
        .map(|ids| {
            let scores: Vec<f64> = ids.iter().map(|&i| norms[i]).collect();
            SamplingProbabilities::from_scores(&scores).unwrap_or_else(|| {
                fell_back = true;
                super::probs_uniform(ids.len())
            })
        })
        .collect();
    Ok(ClusterAllocation {
        members,
        budgets,
        within,
        fell_back,
    })
}

/// Proportional to cluster size, at least one slot each, largest remainder.
fn allocate_budgets(sizes: &[f64], budget: usize) -> Vec<usize> {
    let k = sizes.len();
    let extra = apportion(sizes, budget - k);
    extra.into_iter().map(|e| e + 1).collect()
}

/// Lloyd iterations on scalars with farthest-point initialisation.
///
/// The first center is a random point; each further center is the point
/// farthest from the centers chosen so far. Points equidistant from several
/// centers are spread over them round-robin by point index, so a set of
/// identical values still splits evenly.
pub fn kmeans_1d<R: Rng + ?Sized>(values: &[f64], k: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
    let n = values.len();
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let next = (0..n)
            .filter(|i| !chosen.contains(i))
            .max_by(|&a, &b| {
                let da = nearest_distance(values[a], &chosen, values);
                let db = nearest_distance(values[b], &chosen, values);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= number of points");
        chosen.push(next);
    }
    let mut centers: Vec<f64> = chosen.iter().map(|&i| values[i]).collect();
    let mut assignment = vec![0usize; n];

    for _ in 0..KMEANS_ITERATIONS {
        for (i, &v) in values.iter().enumerate() {
            let best = centers
                .iter()
                .map(|c| (v - c).abs())
                .fold(f64::INFINITY, f64::min);
            let tied: Vec<usize> = (0..k).filter(|&c| (v - centers[c]).abs() == best).collect();
            assignment[i] = tied[i % tied.len()];
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&v, &c) in values.iter().zip(&assignment) {
            sums[c] += v;
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            }
        }
    }
    (centers, assignment)
}

fn nearest_distance(v: f64, chosen: &[usize], values: &[f64]) -> f64 {
    chosen
        .iter()
        .map(|&c| (v - values[c]).abs())
        .fold(f64::INFINITY, f64::min)
}
