//! Entry points behind the CLI subcommands.

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{DataConfig, ExperimentConfig};
use crate::data::{gen_classification_clients, gen_regression_clients, ClientDataset};
use crate::error::{Error, Result};
use crate::federation::Federation;
use crate::metrics::CsvSink;
use crate::model::ParamVector;
use crate::rng::{self, Purpose, SERVER};
use crate::sampling::{
    cap_inclusion, floor_probabilities, probs_cluster_is, probs_data_ratio, probs_delta, probs_fedis,
    probs_practical_update, probs_uniform, sample_with_replacement, sample_without_replacement,
    select_power_of_choice, ClientStats, DeltaSamplerConfig, Replacement, SelectionResult, Strategy,
};
use crate::vector;

/// Builds the client population for one seed.
pub fn build_clients(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ClientDataset>> {
    match &cfg.data {
        DataConfig::Regression(spec) => gen_regression_clients(spec, seed),
        DataConfig::Classification {
            clients,
            classes,
            total_samples,
            partition,
        } => gen_classification_clients(*clients, *classes, *total_samples, *partition, seed),
    }
}

pub fn csv_path(dir: &Path, strategy: Strategy, seed: u64) -> PathBuf {
    dir.join(format!("{strategy}_seed{seed}.csv"))
}

/// Runs one seed of `cfg`, streaming metrics into `<output>/<strategy>_seed<k>.csv`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, threads: usize) -> Result<PathBuf> {
    let clients = build_clients(cfg, seed)?;
    let mut fed = Federation::new(cfg.model, &clients, cfg.sampler, cfg.round, seed)?
        .with_threads(threads)?;
    fed.record_wall_time = cfg.record_wall_time;
    let state = fed.initial_state(ParamVector(vec![cfg.init; cfg.model.param_len()]))?;

    fs::create_dir_all(&cfg.output)?;
    let path = csv_path(&cfg.output, cfg.sampler.strategy, seed);
    let mut sink = CsvSink::new(BufWriter::new(File::create(&path)?))?;
    fed.run(state, cfg.rounds, |m| sink.push(m))?;
    sink.finish()?;
    Ok(path)
}

/// Runs every seed of the config file at `path`. `output` overrides the
/// config's own output directory.
pub fn cmd_run(path: &Path, output: Option<&Path>, threads: usize) -> Result<Vec<PathBuf>> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(dir) = output {
        cfg.output = dir.to_path_buf();
    }
    let mut written = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        log::info!("{}: strategy {} seed {seed}", path.display(), cfg.sampler.strategy);
        written.push(run_seed(&cfg, seed, threads)?);
    }
    Ok(written)
}

/// Runs every `*.conf` file in `dir`, in name order. With an `output`
/// override each config writes into `<output>/<file stem>/`.
pub fn cmd_sweep(dir: &Path, output: Option<&Path>, threads: usize) -> Result<Vec<PathBuf>> {
    let mut configs: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    configs.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "conf"));
    configs.sort();
    if configs.is_empty() {
        return Err(Error::config("sweep", format!("no .conf files in {}", dir.display())));
    }
    let mut written = Vec::new();
    for path in &configs {
        let out = output.map(|o| o.join(path.file_stem().unwrap_or_default()));
        written.extend(cmd_run(path, out.as_deref(), threads)?);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRow {
    pub name: &'static str,
    pub cohort: Vec<usize>,
    pub aggregate: [f64; 2],
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReport {
    pub ideal: [f64; 2],
    pub rows: Vec<ToyRow>,
}

impl ToyReport {
    /// DELTA strictly closest, FedAvg strictly farthest.
    pub fn ordering_holds(&self) -> bool {
        let d = |name: &str| self.rows.iter().find(|r| r.name == name).map(|r| r.distance);
        matches!(
            (d("DELTA"), d("FedIS"), d("FedAvg")),
            (Some(a), Some(b), Some(c)) if a < b && b < c
        )
    }
}

impl fmt::Display for ToyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ideal global gradient ({}, {})", self.ideal[0], self.ideal[1])?;
        writeln!(f, "{:<8} {:<8} {:<16} {}", "method", "cohort", "aggregate", "distance")?;
        for r in &self.rows {
            let cohort = r.cohort.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(",");
            let agg = format!("({}, {})", r.aggregate[0], r.aggregate[1]);
            writeln!(f, "{:<8} {{{cohort}}}    {agg:<16} {:.4}", r.name, r.distance)?;
        }
        let verdict = if self.ordering_holds() { "holds" } else { "VIOLATED" };
        write!(f, "D(DELTA) < D(FedIS) < D(FedAvg): {verdict}")
    }
}

/// Three clients at `(1, 1)` with gradients (2,2), (4,1), (6,-3); each
/// method keeps the two clients it ranks highest and averages them.
pub fn toy_report() -> ToyReport {
    let grads: [[f64; 2]; 3] = [[2.0, 2.0], [4.0, 1.0], [6.0, -3.0]];
    let mut ideal = [0.0; 2];
    for g in &grads {
        vector::axpy(&mut ideal, 1.0 / 3.0, g);
    }
    let stats: Vec<ClientStats> = grads
        .iter()
        .map(|g| ClientStats {
            grad_sum_norm: vector::norm(g),
            diversity: vector::distance(g, &ideal),
            ..Default::default()
        })
        .collect();
    let delta_cfg = DeltaSamplerConfig { alpha1: 1.0, alpha2: 1.0 };
    let methods = [
        ("FedAvg", probs_uniform(3)),
        ("FedIS", probs_fedis(&stats).probs),
        ("DELTA", probs_delta(&stats, &delta_cfg).probs),
    ];
    let rows = methods
        .into_iter()
        .map(|(name, p)| {
            let mut order: Vec<usize> = (0..3).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            let mut cohort = order[..2].to_vec();
            cohort.sort_unstable();
            let mut aggregate = [0.0; 2];
            for &i in &cohort {
                vector::axpy(&mut aggregate, 0.5, &grads[i]);
            }
            ToyRow {
                name,
                distance: vector::distance(&aggregate, &ideal),
                cohort,
                aggregate,
            }
        })
        .collect();
    ToyReport { ideal, rows }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnbiasedCheck {
    pub clients: usize,
    pub cohort: usize,
    pub draws: usize,
    pub strategy: Strategy,
    pub replacement: Replacement,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasedReport {
    pub check: UnbiasedCheck,
    pub exact: Vec<f64>,
    pub estimate: Vec<f64>,
    pub relative_error: f64,
}

pub const UNBIASED_TOLERANCE: f64 = 0.02;

impl UnbiasedReport {
    pub fn passed(&self) -> bool {
        self.relative_error <= UNBIASED_TOLERANCE
    }
}

impl fmt::Display for UnbiasedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.check;
        write!(
            f,
            "{} {} m={} n={} draws={} relative_error={:.3e} {}",
            c.strategy,
            c.replacement,
            c.clients,
            c.cohort,
            c.draws,
            self.relative_error,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

const CHECK_DIM: usize = 4;
const MIN_DRAWS: usize = 10_000;

/// Monte-Carlo check that the weighted cohort sum is an unbiased estimate of
/// `sum_i w_i v_i` for fixed random client vectors and weights.
pub fn check_unbiased(check: UnbiasedCheck) -> Result<UnbiasedReport> {
    let UnbiasedCheck {
        clients: m,
        cohort: n,
        draws,
        strategy,
        replacement,
        seed,
    } = check;
    if draws < MIN_DRAWS {
        return Err(Error::config("draws", format!("need at least {MIN_DRAWS}")));
    }
    if m == 0 {
        return Err(Error::config("clients", "need at least one client"));
    }
    if n == 0 || (n > m && replacement == Replacement::Without) {
        return Err(Error::config("cohort", format!("must be in 1..={m}")));
    }
    if strategy == Strategy::PowerOfChoice && n > m {
        return Err(Error::config("cohort", format!("must be in 1..={m}")));
    }

    let mut setup = rng::stream(seed, 0, SERVER, Purpose::Check);
    // a shared direction plus client deviations of very different sizes
    let shared: Vec<f64> = (0..CHECK_DIM)
        .map(|_| StandardNormal.sample(&mut setup))
        .collect();
    let vectors: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let scale = 10f64.powf(setup.random_range(-1.0..0.5));
            shared
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut setup);
                    c + scale * z
                })
                .collect()
        })
        .collect();
    let raw: Vec<f64> = (0..m).map(|_| setup.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

    let mut exact = vec![0.0; CHECK_DIM];
    for (v, &w) in vectors.iter().zip(&weights) {
        vector::axpy(&mut exact, w, v);
    }
    let stats: Vec<ClientStats> = vectors
        .iter()
        .map(|v| ClientStats {
            grad_sum_norm: vector::norm(v),
            diversity: vector::distance(v, &exact),
            local_var: setup.random_range(0.0..1.0),
            last_round: None,
        })
        .collect();
    let delta_cfg = DeltaSamplerConfig::default();

    let probs = match strategy {
        Strategy::Uniform | Strategy::PowerOfChoice => probs_uniform(m),
        Strategy::Md => probs_data_ratio(&weights)?,
        Strategy::FedIs => probs_fedis(&stats).probs,
        Strategy::Delta => probs_delta(&stats, &delta_cfg).probs,
        Strategy::PracIs | Strategy::PracDelta => {
            // a stale vector built by a few chained updates on random cohorts
            let mut p = probs_uniform(m);
            for _ in 0..5 {
                let k = n.min(m);
                let cohort = rand::seq::index::sample(&mut setup, m, k).into_vec();
                let scores: Vec<f64> = cohort
                    .iter()
                    .map(|&i| match strategy {
                        Strategy::PracIs => stats[i].grad_sum_norm,
                        _ => delta_cfg.score(stats[i].diversity, stats[i].local_var),
                    })
                    .collect();
                p = floor_probabilities(&probs_practical_update(&p, &cohort, &scores)?.probs);
            }
            p
        }
        Strategy::ClusterIs => probs_uniform(m),
    };
    let probs = floor_probabilities(&probs);

    let cluster = if strategy == Strategy::ClusterIs {
        let clusters = 2.min(n).min(m);
        Some(probs_cluster_is(&stats, clusters, n, &mut setup)?.prepared(replacement)?)
    } else {
        None
    };
    let capped = match replacement {
        Replacement::Without if cluster.is_none() => cap_inclusion(&probs, n)?,
        _ => probs.clone(),
    };
    let losses: Vec<f64> = stats.iter().map(|s| s.grad_sum_norm).collect();
    let candidates = (2 * n).min(m);

    let mut draw_rng = rng::stream(seed, 1, SERVER, Purpose::Check);
    let mut acc = vec![0.0; CHECK_DIM];
    for _ in 0..draws {
        let s: SelectionResult = match (&cluster, strategy) {
            (Some(c), _) => c.sample(replacement, &weights, &mut draw_rng)?,
            (None, Strategy::PowerOfChoice) => {
                select_power_of_choice(candidates, n, &losses, &weights, &mut draw_rng)?
            }
            (None, _) => match replacement {
                Replacement::With => sample_with_replacement(&capped, &weights, n, &mut draw_rng)?,
                Replacement::Without => sample_without_replacement(&capped, &weights, n, &mut draw_rng)?,
            },
        };
        vector::axpy(&mut acc, 1.0, &s.weighted_sum(&vectors));
    }
    let estimate = vector::scale(&acc, 1.0 / draws as f64);
    let relative_error = vector::distance(&estimate, &exact) / vector::norm(&exact);
    Ok(UnbiasedReport {
        check,
        exact,
        estimate,
        relative_error,
    })
}
