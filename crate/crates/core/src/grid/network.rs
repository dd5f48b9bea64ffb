use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::GridError;

/// Generator input bounds are `P_n (1 ± GENERATOR_BOUND_FRACTION)`.
pub const GENERATOR_BOUND_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Generator,
    /// Bus with a forecast load (negative injection).
    Load,
    /// Zero-injection transit bus.
    Junction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: String,
    pub kind: BusKind,
    /// Nominal injection, per unit. Negative for loads.
    #[serde(default)]
    pub p_nominal: f64,
    pub v_mag: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub from_bus: String,
    pub to_bus: String,
    pub resistance: f64,
    pub reactance: f64,
}

/// On-disk layout of a network definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub bus: Vec<BusRecord>,
    #[serde(default)]
    pub line: Vec<LineRecord>,
}

/// Validated network with precomputed couplings and role index maps.
#[derive(Clone, Debug)]
pub struct Network {
    buses: Vec<BusRecord>,
    lines: Vec<LineRecord>,
    y_mag: DMatrix<f64>,
    /// `|V_i| |V_j| |Y_ij|`
    coupling: DMatrix<f64>,
    slack: usize,
    generators: Vec<usize>,
    loads: Vec<usize>,
    non_slack: Vec<usize>,
    algebraic: Vec<usize>,
}

impl Network {
    pub fn build(buses: Vec<BusRecord>, lines: Vec<LineRecord>) -> Result<Self, GridError> {
        let mut index = HashMap::new();
        for (i, b) in buses.iter().enumerate() {
            if index.insert(b.id.clone(), i).is_some() {
                return Err(GridError::DuplicateBus(b.id.clone()));
            }
            validate_bus(b)?;
        }
        let slacks: Vec<usize> = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Slack)
            .map(|(i, _)| i)
            .collect();
        if slacks.len() != 1 {
            return Err(GridError::SlackCount(slacks.len()));
        }
        let slack = slacks[0];

        let n = buses.len();
        let mut y_mag = DMatrix::zeros(n, n);
        for l in &lines {
            let lookup = |id: &String| {
                index.get(id).copied().ok_or_else(|| GridError::UnknownBus {
                    from: l.from_bus.clone(),
                    to: l.to_bus.clone(),
                    missing: id.clone(),
                })
            };
            let i = lookup(&l.from_bus)?;
            let j = lookup(&l.to_bus)?;
            if i == j {
                return Err(GridError::SelfLoop(l.from_bus.clone()));
            }
            if !(l.reactance > 0.0) {
                return Err(GridError::NonPositiveReactance {
                    from: l.from_bus.clone(),
                    to: l.to_bus.clone(),
                    reactance: l.reactance,
                });
            }
            let y = 1.0 / l.resistance.hypot(l.reactance);
            y_mag[(i, j)] += y;
            y_mag[(j, i)] += y;
        }

        // every bus must reach the slack
        let mut seen = vec![false; n];
        let mut stack = vec![slack];
        seen[slack] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if !seen[j] && y_mag[(i, j)] > 0.0 {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(GridError::Disconnected(buses[i].id.clone()));
        }

        let coupling = DMatrix::from_fn(n, n, |i, j| buses[i].v_mag * buses[j].v_mag * y_mag[(i, j)]);
        let of_kind = |k: BusKind| -> Vec<usize> {
            buses
                .iter()
                .enumerate()
                .filter(|(_, b)| b.kind == k)
                .map(|(i, _)| i)
                .collect()
        };
        let generators = of_kind(BusKind::Generator);
        let loads = of_kind(BusKind::Load);
        let non_slack = (0..n).filter(|&i| i != slack).collect();
        let algebraic = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(b.kind, BusKind::Load | BusKind::Junction))
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            buses,
            lines,
            y_mag,
            coupling,
            slack,
            generators,
            loads,
            non_slack,
            algebraic,
        })
    }

    pub fn from_file_records(file: NetworkFile) -> Result<Self, GridError> {
        Self::build(file.bus, file.line)
    }

    pub fn from_toml_str(s: &str) -> Result<Self, GridError> {
        let file: NetworkFile = toml::from_str(s).map_err(|e| GridError::Parse(e.to_string()))?;
        Self::from_file_records(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_file_records(&self) -> NetworkFile {
        NetworkFile {
            bus: self.buses.clone(),
            line: self.lines.clone(),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_file_records()).expect("network serializes")
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn buses(&self) -> &[BusRecord] {
        &self.buses
    }

    pub fn bus(&self, i: usize) -> &BusRecord {
        &self.buses[i]
    }

    pub fn y_mag(&self) -> &DMatrix<f64> {
        &self.y_mag
    }

    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.coupling
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    /// Generator bus indices in bus order.
    pub fn generators(&self) -> &[usize] {
        &self.generators
    }

    /// Forecast-load bus indices in bus order.
    pub fn loads(&self) -> &[usize] {
        &self.loads
    }

    /// All buses other than the slack, in bus order. This is the angle layout
    /// used by power flow and the swing state.
    pub fn non_slack(&self) -> &[usize] {
        &self.non_slack
    }

    /// Load and junction buses, whose angles are algebraic variables.
    pub fn algebraic(&self) -> &[usize] {
        &self.algebraic
    }

    pub fn n_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn n_loads(&self) -> usize {
        self.loads.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Position of bus `i` within [`Network::non_slack`].
    pub fn non_slack_slot(&self, i: usize) -> Option<usize> {
        self.non_slack.iter().position(|&j| j == i)
    }

    /// `(P_min, P_max)` per generator.
    pub fn generator_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.generators
            .iter()
            .map(|&g| {
                let p = self.buses[g].p_nominal;
                (
                    p - GENERATOR_BOUND_FRACTION * p,
                    p + GENERATOR_BOUND_FRACTION * p,
                )
            })
            .unzip()
    }

    pub fn generator_nominal(&self) -> Vec<f64> {
        self.generators.iter().map(|&g| self.buses[g].p_nominal).collect()
    }

    pub fn load_nominal(&self) -> Vec<f64> {
        self.loads.iter().map(|&l| self.buses[l].p_nominal).collect()
    }

    pub fn inertia(&self) -> Vec<f64> {
        self.generators
            .iter()
            .map(|&g| self.buses[g].inertia.expect("validated generator inertia"))
            .collect()
    }

    pub fn damping(&self) -> Vec<f64> {
        self.generators
            .iter()
            .map(|&g| self.buses[g].damping.expect("validated generator damping"))
            .collect()
    }

    /// `f_i(θ) = Σ_j |V_i||V_j||Y_ij| sin(θ_i − θ_j)` for every bus.
    pub fn power_injection(&self, theta: &[f64]) -> Result<Vec<f64>, GridError> {
        let n = self.n_buses();
        if theta.len() != n {
            return Err(GridError::DimensionMismatch {
                expected: n,
                got: theta.len(),
            });
        }
        Ok(self.injection_unchecked(theta))
    }

    pub(crate) fn injection_unchecked(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.n_buses();
        (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| self.coupling[(i, j)] * (theta[i] - theta[j]).sin())
                    .sum()
            })
            .collect()
    }

    /// Full `n x n` Jacobian `∂f_i/∂θ_j`.
    pub fn injection_jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        let n = self.n_buses();
        let mut jac = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut diag = 0.0;
            for j in 0..n {
                if i == j || self.coupling[(i, j)] == 0.0 {
                    continue;
                }
                let c = self.coupling[(i, j)] * (theta[i] - theta[j]).cos();
                jac[(i, j)] = -c;
                diag += c;
            }
            jac[(i, i)] = diag;
        }
        jac
    }

    /// Expands non-slack angles into a full bus vector with `θ_s = 0`.
    pub fn full_angles(&self, theta_non_slack: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n_buses()];
        for (&i, &t) in self.non_slack.iter().zip(theta_non_slack) {
            full[i] = t;
        }
        full
    }
}

fn validate_bus(b: &BusRecord) -> Result<(), GridError> {
    let bad = |reason: &str| {
        Err(GridError::InvalidBus {
            id: b.id.clone(),
            reason: reason.to_string(),
        })
    };
    if !(b.v_mag > 0.0) {
        return bad("voltage magnitude must be positive");
    }
    match b.kind {
        BusKind::Slack | BusKind::Generator => {
            if !b.inertia.is_some_and(|m| m > 0.0) {
                return bad("inertia must be positive");
            }
            if !b.damping.is_some_and(|d| d > 0.0) {
                return bad("damping must be positive");
            }
            if b.kind == BusKind::Generator && !(b.p_nominal > 0.0) {
                return bad("generator nominal injection must be positive");
            }
        }
        BusKind::Load => {
            if !(b.p_nominal < 0.0) {
                return bad("load nominal injection must be negative");
            }
        }
        BusKind::Junction => {
            if b.p_nominal != 0.0 {
                return bad("junction injection must be zero");
            }
        }
    }
    Ok(())
}
