//! Random dispatch problem instances and train/test datasets.
//!
//! Each load follows a flat-ramp-flat forecast; generator inputs start from a
//! perturbed optimal set-point and the initial angles balance those inputs
//! against the initial loads.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{solve_power_flow, static_dispatch, GridError, Network};
use crate::swing::SwingState;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("no feasible draw after {0} attempts")]
    Infeasible(usize),
    #[error("split {train}+{test} does not sum to {total}")]
    BadSplit { train: usize, test: usize, total: usize },
    #[error("unknown regime {0:?} (expected NO or TO)")]
    UnknownRegime(String),
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Frequency-bound operating regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "NO")]
    Nominal,
    #[serde(rename = "TO")]
    Tight,
}

impl Regime {
    /// Symmetric bound on the frequency deviation, Hz.
    pub fn omega_bnd_hz(self) -> f64 {
        match self {
            Regime::Nominal => 0.05,
            Regime::Tight => 0.0016,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Regime::Nominal => "NO",
            Regime::Tight => "TO",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Regime {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NO" => Ok(Regime::Nominal),
            "TO" => Ok(Regime::Tight),
            _ => Err(ScenarioError::UnknownRegime(s.to_string())),
        }
    }
}

/// Sampling ranges and horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub dt: f64,
    pub n_steps: usize,
    /// Knots of the stored downsampled forecast.
    pub n_knots: usize,
    /// Relative spread of the initial load around nominal.
    pub load_spread: f64,
    pub t0_range: (f64, f64),
    pub duration_range: (f64, f64),
    /// Magnitude range of the load ramp rate, pu/s.
    pub rate_range: (f64, f64),
    pub rate_zero_prob: f64,
    /// Initial frequency deviation range, rad/s.
    pub omega0_range: (f64, f64),
    pub cost_range: (f64, f64),
    pub max_retries: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            n_steps: 6000,
            n_knots: 50,
            load_spread: 0.25,
            t0_range: (0.0, 60.0),
            duration_range: (5.0, 20.0),
            rate_range: (0.01, 0.05),
            rate_zero_prob: 0.15,
            omega0_range: (-0.01, 0.01),
            cost_range: (0.0, 1.0),
            max_retries: 20,
        }
    }
}

/// Flat-ramp-flat load forecast parameters for one load bus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadRamp {
    /// Initial value, pu (negative injection).
    pub p0: f64,
    /// Ramp start, s.
    pub t0: f64,
    /// Ramp duration, s.
    pub duration: f64,
    /// Ramp rate, pu/s.
    pub rate: f64,
}

impl LoadRamp {
    pub fn value_at(&self, t: f64) -> f64 {
        if t <= self.t0 {
            self.p0
        } else if t >= self.t0 + self.duration {
            self.p0 + self.rate * self.duration
        } else {
            self.p0 + self.rate * (t - self.t0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub id: usize,
    pub seed: u64,
    pub regime: Regime,
    pub dt: f64,
    pub n_steps: usize,
    pub loads: Vec<LoadRamp>,
    /// Generator costs followed by the slack cost.
    pub cost: Vec<f64>,
    /// Perturbation draws `s_i`.
    pub perturbation: Vec<f64>,
    pub p_opt: Vec<f64>,
    pub p_g0: Vec<f64>,
    pub x0: SwingState,
    pub p_s0: f64,
    /// Forecast sampled at fine indices `j * n_steps / n_knots`.
    pub forecast_knots: Vec<Vec<f64>>,
}

impl ProblemInstance {
    /// Full forecast, one row per load bus, `n_steps` long.
    pub fn load_forecast(&self) -> Vec<Vec<f64>> {
        self.loads
            .iter()
            .map(|l| (0..self.n_steps).map(|k| l.value_at(k as f64 * self.dt)).collect())
            .collect()
    }

    /// Initial state as a flat `(θ, ω, P_s)` vector.
    pub fn x0_vector(&self) -> Vec<f64> {
        self.x0.to_vector(self.p_s0)
    }

    pub fn omega_bnd_hz(&self) -> f64 {
        self.regime.omega_bnd_hz()
    }

    pub fn initial_loads(&self) -> Vec<f64> {
        self.loads.iter().map(|l| l.value_at(0.0)).collect()
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws one instance. All randomness comes from `seed`.
pub fn sample_instance(
    net: &Network,
    regime: Regime,
    seed: u64,
    cfg: &ScenarioConfig,
) -> Result<ProblemInstance, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_retries.max(1) {
        if let Some(inst) = draw(net, regime, seed, cfg, &mut rng) {
            return Ok(inst);
        }
    }
    Err(ScenarioError::Infeasible(cfg.max_retries.max(1)))
}

fn draw(
    net: &Network,
    regime: Regime,
    seed: u64,
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> Option<ProblemInstance> {
    let loads: Vec<LoadRamp> = net
        .load_nominal()
        .iter()
        .map(|&ln| {
            let p0 = ln * (1.0 + uniform(rng, (-cfg.load_spread, cfg.load_spread)));
            let t0 = uniform(rng, cfg.t0_range);
            let duration = uniform(rng, cfg.duration_range);
            let zero = rng.random_bool(cfg.rate_zero_prob);
            let positive = rng.random_bool(0.5);
            let magnitude = uniform(rng, cfg.rate_range);
            let rate = match (zero, positive) {
                (true, _) => 0.0,
                (false, true) => magnitude,
                (false, false) => -magnitude,
            };
            LoadRamp {
                p0,
                t0,
                duration,
                rate,
            }
        })
        .collect();
    let n_g = net.n_generators();
    let perturbation: Vec<f64> = (0..n_g).map(|_| rng.random_range(0.0..=1.0)).collect();
    let omega0: Vec<f64> = (0..n_g).map(|_| uniform(rng, cfg.omega0_range)).collect();
    let cost: Vec<f64> = (0..=n_g).map(|_| uniform(rng, cfg.cost_range)).collect();

    let l0: Vec<f64> = loads.iter().map(|l| l.p0).collect();
    let p_opt = static_dispatch(net, &l0, &cost);
    let p_n = net.generator_nominal();
    let p_g0: Vec<f64> = (0..n_g)
        .map(|g| p_opt[g] - 0.5 * (p_opt[g] - p_n[g]) * perturbation[g])
        .collect();

    let mut p = vec![0.0; net.n_buses()];
    for (&b, &v) in net.generators().iter().zip(&p_g0) {
        p[b] = v;
    }
    for (&b, &v) in net.loads().iter().zip(&l0) {
        p[b] = v;
    }
    let p_ns: Vec<f64> = net.non_slack().iter().map(|&i| p[i]).collect();
    let theta = solve_power_flow(net, &p_ns).ok()?;
    let p_s0 = net.injection_unchecked(&theta)[net.slack()];

    let stride = cfg.n_steps / cfg.n_knots.max(1);
    let forecast_knots = loads
        .iter()
        .map(|l| {
            (0..cfg.n_knots)
                .map(|j| l.value_at((j * stride) as f64 * cfg.dt))
                .collect()
        })
        .collect();

    Some(ProblemInstance {
        id: 0,
        seed,
        regime,
        dt: cfg.dt,
        n_steps: cfg.n_steps,
        loads,
        cost,
        perturbation,
        p_opt,
        p_g0,
        x0: SwingState {
            theta: net.non_slack().iter().map(|&i| theta[i]).collect(),
            omega: omega0,
            time: 0.0,
        },
        p_s0,
        forecast_knots,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<ProblemInstance>,
    pub test: Vec<ProblemInstance>,
}

/// Samples `n_train + n_test` instances from per-instance seeds derived from
/// `seed`, then splits them with a seeded shuffle. Instance ids are their
/// generation order.
pub fn make_dataset(
    net: &Network,
    regime: Regime,
    n_train: usize,
    n_test: usize,
    seed: u64,
    cfg: &ScenarioConfig,
) -> Result<Dataset, ScenarioError> {
    let total = n_train + n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..total).map(|_| rng.next_u64()).collect();
    let mut all = Vec::with_capacity(total);
    for (id, &s) in seeds.iter().enumerate() {
        let mut inst = sample_instance(net, regime, s, cfg)?;
        inst.id = id;
        all.push(inst);
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut slots: Vec<Option<ProblemInstance>> = all.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| -> Vec<ProblemInstance> {
        let mut v: Vec<ProblemInstance> = ids.iter().map(|&i| slots[i].take().expect("each id once")).collect();
        v.sort_by_key(|p| p.id);
        v
    };
    let train = take(&order[..n_train]);
    let test = take(&order[n_train..]);
    Ok(Dataset { train, test })
}

/// Parses a split such as `400:100`.
pub fn parse_split(s: &str, total: Option<usize>) -> Result<(usize, usize), ScenarioError> {
    let bad = || ScenarioError::BadSplit {
        train: 0,
        test: 0,
        total: total.unwrap_or(0),
    };
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let train: usize = a.trim().parse().map_err(|_| bad())?;
    let test: usize = b.trim().parse().map_err(|_| bad())?;
    if let Some(t) = total {
        if train + test != t {
            return Err(ScenarioError::BadSplit { train, test, total: t });
        }
    }
    Ok((train, test))
}

pub fn write_instances(path: impl AsRef<Path>, items: &[ProblemInstance]) -> Result<(), ScenarioError> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in items {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<Vec<ProblemInstance>, ScenarioError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = serde_json::from_str(&line).map_err(|source| ScenarioError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        out.push(inst);
    }
    Ok(out)
}

impl Dataset {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), ScenarioError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_instances(dir.join(TRAIN_FILE), &self.train)?;
        write_instances(dir.join(TEST_FILE), &self.test)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let dir = dir.as_ref();
        Ok(Self {
            train: read_instances(dir.join(TRAIN_FILE))?,
            test: read_instances(dir.join(TEST_FILE))?,
        })
    }
}
