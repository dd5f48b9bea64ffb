//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by `--set key.path=value` flags, overlaid by dedicated subcommand flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use dedpc::bench::BenchConfig;
use dedpc::dpc::DpcTrainConfig;
use dedpc::grid::{ieee9, Network};
use dedpc::koopman::{DataConfig, KoopmanTrainConfig};
use dedpc::online::OnlineConfig;
use dedpc::scenario::{parse_split, Regime, ScenarioConfig};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "DEDPC_CONFIG";

/// Value of `paths.network` that selects the built-in 9-bus system.
pub const BUILTIN_NETWORK: &str = "ieee9";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Network TOML file, or `ieee9` for the built-in system.
    pub network: String,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub n: usize,
    /// `train:test`
    pub split: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KoopmanSection {
    /// Seed of the identification trajectories.
    pub data_seed: u64,
    pub data: DataConfig,
    pub train: KoopmanTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSection {
    /// Simulation workers; 0 uses the available parallelism.
    pub workers: usize,
    /// Evaluate only the first this many test instances (0: all).
    pub limit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub regime: Regime,
    pub paths: Paths,
    pub data: DataSection,
    pub scenario: ScenarioConfig,
    pub koopman: KoopmanSection,
    pub dpc: DpcTrainConfig,
    pub online: OnlineConfig,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Nominal,
            paths: Paths {
                network: BUILTIN_NETWORK.into(),
                data_dir: "data".into(),
                checkpoint_dir: "checkpoints".into(),
                report_dir: "reports".into(),
            },
            data: DataSection {
                n: 500,
                split: "400:100".into(),
                seed: 7,
            },
            scenario: ScenarioConfig::default(),
            koopman: KoopmanSection {
                data_seed: 1,
                data: DataConfig::default(),
                train: KoopmanTrainConfig::default(),
            },
            dpc: DpcTrainConfig::default(),
            online: OnlineConfig::default(),
            bench: BenchSection { workers: 0, limit: 0 },
        }
    }
}

/// Recursively copies `src` into `dst`; every key must already exist.
fn merge(dst: &mut toml::Table, src: toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in src {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (dst.get_mut(&key), value) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s, &path)?,
            (Some(slot), value) => *slot = value,
            (None, _) => bail!("unknown config key `{path}`"),
        }
    }
    Ok(())
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to a
/// bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not of the form key.path=value"))?;
    let path = path.trim();
    let mut value = parse_value(raw.trim());
    let mut table = root;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            let slot = table
                .get_mut(part)
                .with_context(|| format!("unknown config key `{path}`"))?;
            // Keep floats floats when written as integers.
            if let (toml::Value::Float(_), toml::Value::Integer(i)) = (&*slot, &value) {
                value = toml::Value::Float(*i as f64);
            }
            *slot = value;
            return Ok(());
        }
        table = match table.get_mut(part) {
            Some(toml::Value::Table(t)) => t,
            _ => bail!("unknown config key `{path}`"),
        };
    }
    bail!("empty config key")
}

fn normalize_numbers(v: &mut toml::Value, default: &toml::Value) {
    match (v, default) {
        (toml::Value::Table(t), toml::Value::Table(d)) => {
            for (k, val) in t.iter_mut() {
                if let Some(dv) = d.get(k) {
                    normalize_numbers(val, dv);
                }
            }
        }
        (toml::Value::Array(a), toml::Value::Array(d)) if !d.is_empty() => {
            for val in a.iter_mut() {
                normalize_numbers(val, &d[0]);
            }
        }
        (v @ toml::Value::Integer(_), toml::Value::Float(_)) => {
            if let toml::Value::Integer(i) = *v {
                *v = toml::Value::Float(i as f64);
            }
        }
        _ => {}
    }
}

impl RunConfig {
    /// Defaults overlaid with `file` (if any) and `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let defaults = toml::Value::try_from(RunConfig::default()).context("serializing defaults")?;
        let mut table = match &defaults {
            toml::Value::Table(t) => t.clone(),
            _ => unreachable!("config serializes to a table"),
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let mut parsed: toml::Value = toml::Value::Table(
                toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?,
            );
            normalize_numbers(&mut parsed, &defaults);
            if let toml::Value::Table(parsed) = parsed {
                merge(&mut table, parsed, "")?;
            }
        }
        for o in overrides {
            set_path(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        ensure!(s.dt > 0.0, "scenario.dt must be positive");
        ensure!(s.n_steps > 0, "scenario.n_steps must be positive");
        ensure!(
            s.n_knots >= 2 && s.n_knots <= s.n_steps,
            "scenario.n_knots must lie in [2, n_steps]"
        );
        let (train, test) = parse_split(&self.data.split, Some(self.data.n))?;
        ensure!(train > 0 && test > 0, "data.split needs training and test instances");
        let d = &self.dpc;
        ensure!(
            d.n_knots >= 2 && d.n_knots <= s.n_steps,
            "dpc.n_knots must lie in [2, scenario.n_steps]"
        );
        ensure!(d.lr > 0.0, "dpc.lr must be positive");
        ensure!(d.weight_decay >= 0.0, "dpc.weight_decay must be non-negative");
        ensure!(d.batch_size > 0 && d.epochs > 0, "dpc.batch_size and dpc.epochs must be positive");
        let w = &d.weights;
        ensure!(
            w.q_omega >= 0.0 && w.q_ramp >= 0.0 && w.q_init >= 0.0,
            "dpc.weights must be non-negative"
        );
        ensure!(d.eps_rmp > 0.0, "dpc.eps_rmp must be positive");
        ensure!(
            self.online.eps_rmp == d.eps_rmp,
            "online.eps_rmp ({}) must equal dpc.eps_rmp ({})",
            self.online.eps_rmp,
            d.eps_rmp
        );
        let o = &self.online;
        ensure!(o.lr > 0.0 && o.tol > 0.0, "online.lr and online.tol must be positive");
        ensure!(
            o.rho_init > 0.0 && o.rho_growth > 1.0 && o.rho_max >= o.rho_init,
            "online penalty schedule needs rho_init > 0, rho_growth > 1, rho_max >= rho_init"
        );
        ensure!(o.outer_iters > 0 && o.inner_iters > 0, "online iteration budgets must be positive");
        let k = &self.koopman.train;
        ensure!(k.n_latent > 0 && k.epochs > 0 && k.batch_size > 0, "koopman.train sizes must be positive");
        ensure!(k.lr > 0.0 && k.eps > 0.0, "koopman.train.lr and eps must be positive");
        ensure!(
            self.koopman.data.val_every >= 2,
            "koopman.data.val_every must be at least 2"
        );
        Ok(())
    }

    pub fn network(&self) -> Result<Network> {
        if self.paths.network == BUILTIN_NETWORK {
            Ok(ieee9())
        } else {
            Network::load(&self.paths.network).with_context(|| format!("loading network {}", self.paths.network))
        }
    }

    pub fn split(&self) -> (usize, usize) {
        parse_split(&self.data.split, Some(self.data.n)).expect("validated")
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            eps_rmp: self.dpc.eps_rmp,
            online: self.online.clone(),
            workers: self.bench.workers,
        }
    }

    /// Effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_path(&self) -> PathBuf {
        self.paths.data_dir.join(format!("{}_train.jsonl", self.regime.label()))
    }

    pub fn test_path(&self) -> PathBuf {
        self.paths.data_dir.join(format!("{}_test.jsonl", self.regime.label()))
    }

    pub fn koopman_path(&self) -> PathBuf {
        self.paths.checkpoint_dir.join("koopman.json")
    }

    pub fn policy_path(&self) -> PathBuf {
        self.paths.checkpoint_dir.join(format!("policy_{}.json", self.regime.label()))
    }

    pub fn report_path(&self) -> PathBuf {
        self.paths.report_dir.join(self.regime.label())
    }
}
