//! Static grid model: bus and line records, admittance magnitudes, the
//! lossless power-injection map and the steady-state utilities built on it.

mod dispatch;
mod network;
mod power_flow;

use thiserror::Error;

pub use dispatch::static_dispatch;
pub use network::{BusKind, BusRecord, LineRecord, Network, NetworkFile, GENERATOR_BOUND_FRACTION};
pub use power_flow::{solve_power_flow, solve_power_flow_from, NEWTON_MAX_ITER, NEWTON_TOL};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("duplicate bus label {0:?}")]
    DuplicateBus(String),
    #[error("line {from}-{to} references unknown bus {missing:?}")]
    UnknownBus {
        from: String,
        to: String,
        missing: String,
    },
    #[error("line {from}-{to} has non-positive reactance {reactance}")]
    NonPositiveReactance { from: String, to: String, reactance: f64 },
    #[error("line {0}-{0} is a self-loop")]
    SelfLoop(String),
    #[error("invalid bus {id:?}: {reason}")]
    InvalidBus { id: String, reason: String },
    #[error("network must have exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("bus {0:?} is not connected to the slack bus")]
    Disconnected(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("power flow did not converge in {iterations} iterations (residual {residual:.3e}); injections may be infeasible")]
    InfeasibleInjection { iterations: usize, residual: f64 },
    #[error("failed to parse network file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The bundled 9-bus system.
pub fn ieee9() -> Network {
    Network::from_toml_str(include_str!("../../data/ieee9.toml")).expect("bundled 9-bus network is valid")
}
