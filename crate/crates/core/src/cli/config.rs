//! `key = value` run configuration and whitespace-separated instance files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bidding::{Behavior, BiddingConfig, Schedule};
use crate::equilibrium::MarketInstance;
use crate::prosumer::Prosumer;
use crate::scenarios::{builtin_three_prosumer, random_instance};

use super::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum InstanceSource {
    Builtin,
    File(PathBuf),
    Random { size: usize },
}

/// Everything a subcommand needs; built from a config file plus flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: Option<String>,
    pub source: InstanceSource,
    /// Overrides the source's own market sensitivity when set.
    pub a: Option<f64>,
    pub seed: u64,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub behavior: Behavior,
    pub asynchronous: bool,
    pub miss_probability: f64,
    pub max_delay: usize,
    pub initial_price: f64,
    pub out: PathBuf,
    pub sizes: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
    pub types: Option<Vec<usize>>,
    pub draws: Option<usize>,
    pub delays: Option<Vec<usize>>,
    pub a_values: Option<Vec<f64>>,
    pub prosumer: usize,
    /// Population size for random instances and the diversity experiment.
    pub size: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bidding = BiddingConfig::default();
        Self {
            experiment: None,
            source: InstanceSource::Builtin,
            a: None,
            seed: 0,
            epsilon: bidding.epsilon,
            max_iterations: bidding.max_iterations,
            behavior: bidding.behavior,
            asynchronous: false,
            miss_probability: 0.8,
            max_delay: 3,
            initial_price: bidding.initial_price,
            out: PathBuf::from("out"),
            sizes: None,
            seeds: None,
            types: None,
            draws: None,
            delays: None,
            a_values: None,
            prosumer: 0,
            size: None,
        }
    }
}

impl RunConfig {
    pub fn bidding(&self) -> BiddingConfig {
        let schedule = if self.asynchronous {
            Schedule::Asynchronous {
                miss_probability: self.miss_probability,
                max_delay: self.max_delay,
                seed: self.seed,
            }
        } else {
            Schedule::Synchronous
        };
        BiddingConfig {
            epsilon: self.epsilon,
            max_iterations: self.max_iterations,
            behavior: self.behavior,
            schedule,
            initial_price: self.initial_price,
        }
    }

    /// Builds the configured market; `a` defaults to 100 for file instances.
    pub fn instance(&self) -> Result<MarketInstance, CliError> {
        let base = match &self.source {
            InstanceSource::Builtin => builtin_three_prosumer(),
            InstanceSource::Random { size } => {
                random_instance(*size, self.a.unwrap_or(100.0), self.seed)?
            }
            InstanceSource::File(path) => read_instance(path, self.a.unwrap_or(100.0))?,
        };
        Ok(match self.a {
            Some(a) => base.with_market_sensitivity(a)?,
            None => base,
        })
    }

    /// Reads `path` and applies its keys on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, &path.display().to_string())
    }

    pub fn parse(text: &str, base_dir: &Path, origin: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
                origin: origin.to_string(),
                line: n + 1,
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim().to_string();
            if entries
                .insert(key.clone(), (n + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(CliError::Config {
                    origin: origin.to_string(),
                    line: n + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }

        let mut cfg = RunConfig::default();
        let mut instance_kind: Option<String> = None;
        let mut instance_file: Option<PathBuf> = None;
        for (key, (line, value)) in &entries {
            let err = |message: String| CliError::Config {
                origin: origin.to_string(),
                line: *line,
                message,
            };
            let bad = |what: &str| err(format!("invalid {what} `{value}` for `{key}`"));
            match key.as_str() {
                "experiment" => cfg.experiment = Some(value.clone()),
                "instance" => instance_kind = Some(value.clone()),
                "instance_file" => instance_file = Some(base_dir.join(value)),
                "size" => cfg.size = Some(value.parse().map_err(|_| bad("integer"))?),
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                "a" => cfg.a = Some(value.parse().map_err(|_| bad("number"))?),
                "epsilon" => cfg.epsilon = value.parse().map_err(|_| bad("number"))?,
                "max_iter" => cfg.max_iterations = value.parse().map_err(|_| bad("integer"))?,
                "mode" => cfg.behavior = parse_mode(value).map_err(err)?,
                "schedule" => cfg.asynchronous = parse_schedule(value).map_err(err)?,
                "miss_prob" => cfg.miss_probability = value.parse().map_err(|_| bad("number"))?,
                "max_delay" => cfg.max_delay = value.parse().map_err(|_| bad("integer"))?,
                "initial_price" => cfg.initial_price = value.parse().map_err(|_| bad("number"))?,
                "out" => cfg.out = base_dir.join(value),
                "sizes" => cfg.sizes = Some(parse_list(value).map_err(err)?),
                "seeds" => cfg.seeds = Some(parse_list(value).map_err(err)?),
                "types" => cfg.types = Some(parse_list(value).map_err(err)?),
                "draws" => cfg.draws = Some(value.parse().map_err(|_| bad("integer"))?),
                "delays" => cfg.delays = Some(parse_list(value).map_err(err)?),
                "a_values" => cfg.a_values = Some(parse_float_list(value).map_err(err)?),
                "prosumer" => cfg.prosumer = value.parse().map_err(|_| bad("integer"))?,
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }
        cfg.source = resolve_source(instance_kind.as_deref(), instance_file, cfg.size).map_err(
            |message| CliError::Config {
                origin: origin.to_string(),
                line: 0,
                message,
            },
        )?;
        Ok(cfg)
    }
}

pub(crate) fn resolve_source(
    kind: Option<&str>,
    file: Option<PathBuf>,
    size: Option<usize>,
) -> Result<InstanceSource, String> {
    match (kind, file) {
        (Some("file"), Some(path)) | (None, Some(path)) => Ok(InstanceSource::File(path)),
        (Some("file"), None) => Err("instance = file needs `instance_file`".into()),
        (Some(other), Some(_)) => Err(format!(
            "`instance = {other}` conflicts with `instance_file`"
        )),
        (Some("random"), None) => Ok(InstanceSource::Random {
            size: size.ok_or("instance = random needs `size`")?,
        }),
        (Some("builtin"), None) | (None, None) => Ok(InstanceSource::Builtin),
        (Some(other), None) => Err(format!("unknown instance source `{other}`")),
    }
}

pub fn parse_mode(value: &str) -> Result<Behavior, String> {
    match value {
        "strategic" => Ok(Behavior::Strategic),
        "price-taker" => Ok(Behavior::PriceTaker),
        _ => Err(format!(
            "mode must be strategic or price-taker, got `{value}`"
        )),
    }
}

/// `true` for asynchronous.
pub fn parse_schedule(value: &str) -> Result<bool, String> {
    match value {
        "sync" => Ok(false),
        "async" => Ok(true),
        _ => Err(format!("schedule must be sync or async, got `{value}`")),
    }
}

/// Comma-separated integers; `lo..hi` denotes an inclusive range.
pub fn parse_list<T>(value: &str) -> Result<Vec<T>, String>
where
    T: std::str::FromStr + TryFrom<u64>,
{
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once("..") {
            let lo: u64 = lo
                .trim()
                .parse()
                .map_err(|_| format!("bad range `{part}`"))?;
            let hi: u64 = hi
                .trim()
                .parse()
                .map_err(|_| format!("bad range `{part}`"))?;
            if lo > hi {
                return Err(format!("empty range `{part}`"));
            }
            for x in lo..=hi {
                out.push(T::try_from(x).map_err(|_| format!("`{x}` out of range"))?);
            }
        } else {
            out.push(part.parse().map_err(|_| format!("bad integer `{part}`"))?);
        }
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

pub fn parse_float_list(value: &str) -> Result<Vec<f64>, String> {
    let out: Vec<f64> = value
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| format!("bad number `{p}`")))
        .collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

/// One prosumer per line: `id c2 c1 u2 u1 p_min p_max d_min d_max`.
pub fn parse_instance(text: &str, a: f64, origin: &str) -> Result<MarketInstance, CliError> {
    let mut prosumers: Vec<Prosumer> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CliError::Config {
            origin: origin.to_string(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(err(format!("expected 9 fields, found {}", fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad id `{}`", fields[0])))?;
        if prosumers.iter().any(|p| p.id() == id) {
            return Err(err(format!("duplicate id {id}")));
        }
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
        }
        let pr = Prosumer::quadratic(id, [v[0], v[1], v[2], v[3]], [v[4], v[5], v[6], v[7]])
            .map_err(|e| err(e.to_string()))?;
        prosumers.push(pr);
    }
    Ok(MarketInstance::new(prosumers, a)?)
}

pub fn read_instance(path: &Path, a: f64) -> Result<MarketInstance, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    parse_instance(&text, a, &path.display().to_string())
}
