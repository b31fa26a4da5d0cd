//! Synthetic federated datasets.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::model::{ClientConstants, Example, Target};
use crate::rng::{self, Purpose, SERVER};

/// Parameter value that generates the regression targets.
pub const REGRESSION_TRUTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub examples: Vec<Example>,
    /// Aggregation weight `n_i / N`.
    pub weight: f64,
    pub constants: Option<ClientConstants>,
    /// Std of the gradient noise injected at every local step.
    pub noise_std: f64,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// How the nominal gradient-noise level is spread over clients.
///
/// Every profile keeps the mean of the per-client noise std equal to the
/// nominal level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseProfile {
    /// Every client gets the nominal level.
    Constant,
    /// Proportional to `i + 1`.
    Linear,
    /// Proportional to `(i + 1)^2`.
    #[default]
    Quadratic,
}

impl NoiseProfile {
    pub fn levels(self, m: usize, nominal: f64) -> Vec<f64> {
        let raw: Vec<f64> = (1..=m)
            .map(|k| {
                let k = k as f64;
                match self {
                    NoiseProfile::Constant => 1.0,
                    NoiseProfile::Linear => k,
                    NoiseProfile::Quadratic => k * k,
                }
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / m as f64;
        raw.into_iter().map(|r| nominal * r / mean).collect()
    }
}

impl std::str::FromStr for NoiseProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(NoiseProfile::Constant),
            "linear" => Ok(NoiseProfile::Linear),
            "quadratic" => Ok(NoiseProfile::Quadratic),
            other => Err(format!(
                "unknown noise profile `{other}`; expected one of constant | linear | quadratic"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSpec {
    pub clients: usize,
    pub samples_per_client: usize,
    pub a: f64,
    pub b: f64,
    pub noise: f64,
    pub noise_profile: NoiseProfile,
    /// Std of the additive target noise.
    pub label_noise: f64,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        RegressionSpec {
            clients: 20,
            samples_per_client: 1000,
            a: 10.0,
            b: 1.0,
            noise: 30.0,
            noise_profile: NoiseProfile::default(),
            label_noise: 0.01,
        }
    }
}

/// Per-client regression data `y = log((A x* - b)^2 / 2) + eps` with `x* = 1`.
pub fn gen_regression_clients(spec: &RegressionSpec, seed: u64) -> Result<Vec<ClientDataset>> {
    if spec.clients == 0 || spec.samples_per_client == 0 {
        return Err(Error::InvalidData(
            "need at least one client and one sample per client".into(),
        ));
    }
    if !(spec.noise >= 0.0) || !(spec.label_noise >= 0.0) {
        return Err(Error::InvalidData("noise levels must be nonnegative".into()));
    }
    let r = spec.a * REGRESSION_TRUTH - spec.b;
    if r.abs() < crate::model::SINGULARITY_EPS {
        return Err(Error::InvalidData(format!(
            "A*x* = b (A={}, b={}) makes the targets undefined",
            spec.a, spec.b
        )));
    }
    let clean = (r * r / 2.0).ln();
    let eps = Normal::new(0.0, spec.label_noise)
        .map_err(|e| Error::InvalidData(e.to_string()))?;
    let levels = spec.noise_profile.levels(spec.clients, spec.noise);
    let weight = 1.0 / spec.clients as f64;

    Ok(levels
        .into_iter()
        .enumerate()
        .map(|(id, noise_std)| {
            let mut rng = rng::stream(seed, 0, id as u64, Purpose::DataGen);
            let examples = (0..spec.samples_per_client)
                .map(|_| Example::regression(clean + eps.sample(&mut rng)))
                .collect();
            ClientDataset {
                id,
                examples,
                weight,
                constants: Some(ClientConstants { a: spec.a, b: spec.b }),
                noise_std,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionSpec {
    /// Per-client class proportions drawn from `Dirichlet(alpha * 1)`.
    Dirichlet { alpha: f64 },
    /// `rich_fraction` of the clients hold `rich_share` of the samples; labels
    /// are handed out in label-sorted contiguous chunks.
    Split { rich_fraction: f64, rich_share: f64 },
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PartitionSpec::Dirichlet { alpha } if !(alpha > 0.0) => {
                Err(Error::InvalidData(format!("dirichlet alpha must be > 0, got {alpha}")))
            }
            PartitionSpec::Split { rich_fraction, rich_share }
                if !(rich_fraction > 0.0 && rich_fraction < 1.0)
                    || !(rich_share > 0.0 && rich_share < 1.0) =>
            {
                Err(Error::InvalidData(
                    "split fractions must lie in the open interval (0, 1)".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Class-cluster classification data partitioned over `m` clients.
///
/// Features are `classes`-dimensional, unit-variance Gaussians centred at
/// `3 * onehot(label)`.
pub fn gen_classification_clients(
    m: usize,
    classes: usize,
    total_samples: usize,
    partition: PartitionSpec,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if classes < 2 {
        return Err(Error::InvalidData("need at least 2 classes".into()));
    }
    if m == 0 || total_samples < m {
        return Err(Error::InvalidData(format!(
            "total_samples ({total_samples}) must be >= number of clients ({m})"
        )));
    }
    partition.validate()?;
    let mut rng = rng::stream(seed, 0, SERVER, Purpose::DataGen);

    let labels_per_client: Vec<Vec<usize>> = match partition {
        PartitionSpec::Dirichlet { alpha } => {
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidData(e.to_string()))?;
            let sizes = apportion(&vec![1.0; m], total_samples);
            sizes
                .iter()
                .map(|&size| {
                    let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(&mut rng)).collect();
                    let counts = apportion(&draws, size);
                    counts
                        .iter()
                        .enumerate()
                        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
                        .collect()
                })
                .collect()
        }
        PartitionSpec::Split { rich_fraction, rich_share } => {
            let rich = ((rich_fraction * m as f64).round() as usize).clamp(1, m.saturating_sub(1).max(1));
            let rich_total = (rich_share * total_samples as f64).round() as usize;
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            let mut sizes = vec![0usize; m];
            let rich_sizes = apportion(&vec![1.0; rich], rich_total);
            let poor_sizes = apportion(&vec![1.0; m - rich], total_samples - rich_total);
            for (slot, &client) in order.iter().enumerate() {
                sizes[client] = if slot < rich {
                    rich_sizes[slot]
                } else {
                    poor_sizes[slot - rich]
                };
            }
            if let Some(client) = sizes.iter().position(|&s| s == 0) {
                return Err(Error::EmptyClient { client });
            }
            // label-sorted pool, cut into contiguous chunks in client order
            let pool: Vec<usize> = apportion(&vec![1.0; classes], total_samples)
                .iter()
                .enumerate()
                .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
                .collect();
            let mut offset = 0;
            sizes
                .iter()
                .map(|&s| {
                    let chunk = pool[offset..offset + s].to_vec();
                    offset += s;
                    chunk
                })
                .collect()
        }
    };

    labels_per_client
        .into_iter()
        .enumerate()
        .map(|(id, labels)| {
            if labels.is_empty() {
                return Err(Error::EmptyClient { client: id });
            }
            let mut crng = rng::stream(seed, 0, id as u64, Purpose::DataGen);
            let examples = labels
                .into_iter()
                .map(|label| {
                    let features = (0..classes)
                        .map(|d| {
                            let mean = if d == label { 3.0 } else { 0.0 };
                            mean + crng.sample::<f64, _>(rand_distr::StandardNormal)
                        })
                        .collect();
                    Example::labelled(features, label)
                })
                .collect::<Vec<_>>();
            Ok(ClientDataset {
                id,
                weight: examples.len() as f64 / total_samples as f64,
                examples,
                constants: None,
                noise_std: 0.0,
            })
        })
        .collect()
}

/// Largest-remainder apportionment of `total` units proportional to `shares`.
///
/// Ties in the remainders go to the lower index. All-zero shares are treated
/// as equal shares.
pub fn apportion(shares: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let quotas: Vec<f64> = if sum > 0.0 {
        shares.iter().map(|s| s / sum * total as f64).collect()
    } else {
        vec![total as f64 / shares.len() as f64; shares.len()]
    };
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = quotas[i] - quotas[i].floor();
        let rj = quotas[j] - quotas[j].floor();
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Writes one example per line: features, then the target, comma separated.
/// Reals use 17 significant digits so a re-read is bit-exact.
pub fn write_examples<W: Write>(mut out: W, examples: &[Example]) -> Result<()> {
    for ex in examples {
        let mut fields: Vec<String> = ex.features.iter().map(|v| format!("{v:.16e}")).collect();
        fields.push(match ex.target {
            Target::Real(y) => format!("{y:.16e}"),
            Target::Class(c) => c.to_string(),
        });
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Real,
    Class,
}

pub fn read_examples<R: BufRead>(input: R, kind: TargetKind) -> Result<Vec<Example>> {
    let bad = |line: usize, msg: String| Error::Parse {
        path: "<examples>".into(),
        line,
        message: msg,
    };
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields: Vec<&str> = line.split(',').collect();
        let last = fields.pop().expect("split yields at least one field");
        let features = fields
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|e| bad(i + 1, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let target = match kind {
            TargetKind::Real => Target::Real(last.trim().parse().map_err(|e: std::num::ParseFloatError| bad(i + 1, e.to_string()))?),
            TargetKind::Class => Target::Class(last.trim().parse().map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?),
        };
        out.push(Example { features, target });
    }
    Ok(out)
}
