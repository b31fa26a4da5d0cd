//! Flat `key = value` experiment configs.
//!
//! One assignment per line; `#` starts a comment. Unknown or repeated keys
//! are rejected, and every validation error names the offending key.
//!
//! ```text
//! # synthetic regression, 10 of 20 clients
//! model = regression
//! noise = 30
//! strategy = delta
//! rounds = 2000
//! seeds = 1, 2, 3
//! output = out/
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{NoiseProfile, PartitionSpec, RegressionSpec};
use crate::error::{Error, Result};
use crate::federation::{RoundConfig, SamplerConfig};
use crate::model::ModelSpec;
use crate::sampling::{DeltaSamplerConfig, Replacement, Strategy};

const KEYS: &[&str] = &[
    "model",
    "dim",
    "clients",
    "samples_per_client",
    "a",
    "b",
    "noise",
    "noise_profile",
    "label_noise",
    "classes",
    "total_samples",
    "partition",
    "dirichlet_alpha",
    "split_rich_fraction",
    "split_rich_share",
    "strategy",
    "replacement",
    "alpha1",
    "alpha2",
    "clusters",
    "poc_candidates",
    "local_lr",
    "server_lr",
    "local_steps",
    "batch_size",
    "cohort_size",
    "proximal_mu",
    "momentum",
    "rounds",
    "seeds",
    "output",
    "init",
    "record_wall_time",
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Regression(RegressionSpec),
    Classification {
        clients: usize,
        classes: usize,
        total_samples: usize,
        partition: PartitionSpec,
    },
}

impl DataConfig {
    pub fn clients(&self) -> usize {
        match self {
            DataConfig::Regression(r) => r.clients,
            DataConfig::Classification { clients, .. } => *clients,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub round: RoundConfig,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Starting value for every parameter coordinate.
    pub init: f64,
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let round = RoundConfig::default();
        let mut sampler = SamplerConfig::new(Strategy::Uniform, Replacement::Without);
        sampler.candidates = 20;
        ExperimentConfig {
            model: ModelSpec::Regression { dim: 1 },
            data: DataConfig::Regression(RegressionSpec::default()),
            sampler,
            round,
            rounds: 2000,
            seeds: vec![1],
            output: PathBuf::from("out"),
            init: 2.0,
            record_wall_time: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}")))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    /// Parses config text. `origin` is only used in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(Error::config(key, "unknown key"));
            }
            if kv.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::config(key, "given more than once"));
            }
        }
        Self::from_map(&kv)
    }

    fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| kv.get(k).map(String::as_str);
        let mut cfg = ExperimentConfig::default();

        macro_rules! set {
            ($key:literal, $target:expr) => {
                if let Some(v) = get($key) {
                    $target = parse_value($key, v)?;
                }
            };
        }

        let model_kind = get("model").unwrap_or("regression");
        match model_kind {
            "regression" => {
                let mut spec = RegressionSpec::default();
                let mut dim = 1usize;
                set!("dim", dim);
                set!("clients", spec.clients);
                set!("samples_per_client", spec.samples_per_client);
                set!("a", spec.a);
                set!("b", spec.b);
                set!("noise", spec.noise);
                if let Some(v) = get("noise_profile") {
                    spec.noise_profile =
                        NoiseProfile::from_str(v).map_err(|e| Error::config("noise_profile", e))?;
                }
                set!("label_noise", spec.label_noise);
                if dim == 0 {
                    return Err(Error::config("dim", "must be at least 1"));
                }
                if spec.clients == 0 {
                    return Err(Error::config("clients", "must be at least 1"));
                }
                if spec.samples_per_client == 0 {
                    return Err(Error::config("samples_per_client", "must be at least 1"));
                }
                if !(spec.noise >= 0.0) {
                    return Err(Error::config("noise", "must be nonnegative"));
                }
                if !(spec.label_noise >= 0.0) {
                    return Err(Error::config("label_noise", "must be nonnegative"));
                }
                if (spec.a - spec.b).abs() < crate::model::SINGULARITY_EPS {
                    return Err(Error::config("b", "A * 1 = b leaves the targets undefined"));
                }
                cfg.model = ModelSpec::Regression { dim };
                cfg.data = DataConfig::Regression(spec);
            }
            "logistic" => {
                let mut clients = 20usize;
                let mut classes = 10usize;
                let mut total = 20_000usize;
                set!("clients", clients);
                set!("classes", classes);
                set!("total_samples", total);
                if classes < 2 {
                    return Err(Error::config("classes", "must be at least 2"));
                }
                if clients == 0 {
                    return Err(Error::config("clients", "must be at least 1"));
                }
                if total < clients {
                    return Err(Error::config("total_samples", "must be at least the client count"));
                }
                let partition = match get("partition").unwrap_or("dirichlet") {
                    "dirichlet" => {
                        let mut alpha = 0.5f64;
                        set!("dirichlet_alpha", alpha);
                        if !(alpha > 0.0) {
                            return Err(Error::config("dirichlet_alpha", "must be positive"));
                        }
                        PartitionSpec::Dirichlet { alpha }
                    }
                    "split" => {
                        let mut rich_fraction = 0.1f64;
                        let mut rich_share = 0.9f64;
                        set!("split_rich_fraction", rich_fraction);
                        set!("split_rich_share", rich_share);
                        if !(rich_fraction > 0.0 && rich_fraction < 1.0) {
                            return Err(Error::config("split_rich_fraction", "must lie in (0, 1)"));
                        }
                        if !(rich_share > 0.0 && rich_share < 1.0) {
                            return Err(Error::config("split_rich_share", "must lie in (0, 1)"));
                        }
                        PartitionSpec::Split { rich_fraction, rich_share }
                    }
                    other => {
                        return Err(Error::config(
                            "partition",
                            format!("unknown partition `{other}`; expected dirichlet | split"),
                        ))
                    }
                };
                cfg.model = ModelSpec::Logistic { features: classes, classes };
                cfg.data = DataConfig::Classification {
                    clients,
                    classes,
                    total_samples: total,
                    partition,
                };
                cfg.init = 0.0;
            }
            other => {
                return Err(Error::config(
                    "model",
                    format!("unknown model `{other}`; expected regression | logistic"),
                ))
            }
        }
        let m = cfg.data.clients();

        if let Some(v) = get("strategy") {
            cfg.sampler.strategy = Strategy::from_str(v).map_err(|e| Error::config("strategy", e))?;
        }
        if let Some(v) = get("replacement") {
            cfg.sampler.replacement =
                Replacement::from_str(v).map_err(|e| Error::config("replacement", e))?;
        }
        let mut alpha1 = cfg.sampler.delta.alpha1;
        let mut alpha2 = cfg.sampler.delta.alpha2;
        set!("alpha1", alpha1);
        set!("alpha2", alpha2);
        if !(alpha1 >= 0.0) {
            return Err(Error::config("alpha1", "must be nonnegative"));
        }
        if !(alpha2 >= 0.0) {
            return Err(Error::config("alpha2", "must be nonnegative"));
        }
        cfg.sampler.delta = DeltaSamplerConfig::new(alpha1, alpha2)
            .map_err(|_| Error::config("alpha2", "alpha1 + alpha2 must be positive"))?;
        set!("clusters", cfg.sampler.clusters);

        set!("local_lr", cfg.round.local_lr);
        set!("server_lr", cfg.round.server_lr);
        set!("local_steps", cfg.round.local_steps);
        set!("batch_size", cfg.round.batch_size);
        set!("cohort_size", cfg.round.cohort_size);
        set!("proximal_mu", cfg.round.proximal_mu);
        set!("momentum", cfg.round.momentum);
        cfg.round.validate(m)?;

        cfg.sampler.candidates = (2 * cfg.round.cohort_size).min(m);
        set!("poc_candidates", cfg.sampler.candidates);
        if cfg.sampler.strategy == Strategy::PowerOfChoice
            && (cfg.sampler.candidates < cfg.round.cohort_size || cfg.sampler.candidates > m)
        {
            return Err(Error::config(
                "poc_candidates",
                format!("must be in {}..={m}", cfg.round.cohort_size),
            ));
        }
        if cfg.sampler.strategy == Strategy::ClusterIs
            && (cfg.sampler.clusters == 0 || cfg.sampler.clusters > cfg.round.cohort_size)
        {
            return Err(Error::config(
                "clusters",
                format!("must be in 1..={}", cfg.round.cohort_size),
            ));
        }

        set!("rounds", cfg.rounds);
        if cfg.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if let Some(v) = get("seeds") {
            cfg.seeds = v
                .split(',')
                .map(|s| parse_value::<u64>("seeds", s.trim()))
                .collect::<Result<_>>()?;
        }
        if cfg.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if let Some(v) = get("output") {
            cfg.output = PathBuf::from(v);
        }
        set!("init", cfg.init);
        if !cfg.init.is_finite() {
            return Err(Error::config("init", "must be finite"));
        }
        set!("record_wall_time", cfg.record_wall_time);
        Ok(cfg)
    }
}
