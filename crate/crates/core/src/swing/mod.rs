//! Swing-equation DAE simulator.
//!
//! Generators follow `M ω̇ + D ω = P − f(θ)`, `θ̇ = ω`; load and junction
//! buses satisfy `P − f(θ) = 0`; the slack angle is pinned to zero. Steps use
//! the implicit trapezoidal rule with a full Newton solve per step.
//!
//! Inputs are held over each step: `(P_G[k], L[k])` drives the interval
//! `[t_k, t_{k+1}]`. When the load changes at `t_k`, the algebraic angles are
//! re-solved before the step so that input jumps do not degrade the order.
//! Consequently the recorded state at `t_{k+1}` balances `L[k]`.

mod eval;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, Network};

pub use eval::{evaluate_schedule, EvalMetrics};

pub const STEP_TOL: f64 = 1e-9;
pub const STEP_MAX_ITER: usize = 25;
/// Residual accepted for the load balance at initialization and after re-solves.
pub const ALGEBRAIC_TOL: f64 = 1e-10;

pub fn rad_to_hz(w: f64) -> f64 {
    w / (2.0 * std::f64::consts::PI)
}

pub fn hz_to_rad(f: f64) -> f64 {
    f * 2.0 * std::f64::consts::PI
}

#[derive(Debug, Error)]
pub enum SwingError {
    #[error("Newton failed at step {step} (t = {time:.4} s), residual {residual:.3e}")]
    StepFailure { step: usize, time: f64, residual: f64 },
    #[error("inconsistent initial state: {0}")]
    Initialization(String),
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Angles for every non-slack bus (in [`Network::non_slack`] order) and
/// generator frequency deviations in rad/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwingState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub time: f64,
}

impl SwingState {
    /// Flat state vector `(θ, ω, P_s)`.
    pub fn to_vector(&self, p_s: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.theta.len() + self.omega.len() + 1);
        x.extend_from_slice(&self.theta);
        x.extend_from_slice(&self.omega);
        x.push(p_s);
        x
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    /// `n_steps + 1` states starting at the initial condition.
    pub states: Vec<SwingState>,
    /// `P_s(t_k) = f_s(θ(t_k))` for every state.
    pub slack_power: Vec<f64>,
    /// Applied generator inputs, one row per generator, `n_steps` long.
    pub p_gen: Vec<Vec<f64>>,
    /// Applied loads, one row per load bus, `n_steps` long.
    pub p_load: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    /// Flat state `(θ, ω, P_s)` at step `k`.
    pub fn state_vector(&self, k: usize) -> Vec<f64> {
        self.states[k].to_vector(self.slack_power[k])
    }

    /// Input vector `(P_G, L)` applied over step `k`.
    pub fn input_vector(&self, k: usize) -> Vec<f64> {
        self.p_gen
            .iter()
            .chain(&self.p_load)
            .map(|row| row[k])
            .collect()
    }

    /// Frequency row of generator `g` in rad/s.
    pub fn omega_series(&self, g: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.omega[g]).collect()
    }

    /// CSV with time, non-slack angles, generator frequencies (Hz), slack
    /// power and the generator input held from each row onward. The final row
    /// has no input.
    pub fn write_csv<W: Write>(&self, net: &Network, out: W) -> Result<(), SwingError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend(net.non_slack().iter().map(|&i| format!("theta_{}", net.bus(i).id)));
        header.extend(net.generators().iter().map(|&i| format!("omega_hz_{}", net.bus(i).id)));
        header.push("p_slack".into());
        header.extend(net.generators().iter().map(|&i| format!("p_{}", net.bus(i).id)));
        w.write_record(&header)?;
        for (k, s) in self.states.iter().enumerate() {
            let mut row = vec![format!("{}", s.time)];
            row.extend(s.theta.iter().map(|v| v.to_string()));
            row.extend(s.omega.iter().map(|&v| rad_to_hz(v).to_string()));
            row.push(self.slack_power[k].to_string());
            for g in &self.p_gen {
                row.push(g.get(k).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Index bookkeeping shared by every step of a simulation.
struct Layout {
    n_bus: usize,
    /// bus index of each generator / algebraic bus
    gen_bus: Vec<usize>,
    alg_bus: Vec<usize>,
    /// position in the non-slack vector of each bus (slack maps to None)
    slot: Vec<Option<usize>>,
    /// position of each load bus inside `alg_bus`
    load_in_alg: Vec<usize>,
    m: Vec<f64>,
    d: Vec<f64>,
}

impl Layout {
    fn new(net: &Network) -> Self {
        let alg_bus = net.algebraic().to_vec();
        let load_in_alg = net
            .loads()
            .iter()
            .map(|l| alg_bus.iter().position(|a| a == l).expect("load is algebraic"))
            .collect();
        Self {
            n_bus: net.n_buses(),
            gen_bus: net.generators().to_vec(),
            alg_bus,
            slot: (0..net.n_buses()).map(|i| net.non_slack_slot(i)).collect(),
            load_in_alg,
            m: net.inertia(),
            d: net.damping(),
        }
    }

    fn full(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n_bus)
            .map(|i| self.slot[i].map_or(0.0, |s| theta[s]))
            .collect()
    }

    /// Target injection at each algebraic bus for the given loads.
    fn alg_target(&self, loads: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; self.alg_bus.len()];
        for (j, &a) in self.load_in_alg.iter().enumerate() {
            t[a] = loads[j];
        }
        t
    }
}

/// Re-solves the algebraic angles in `theta` (non-slack layout) so that the
/// load balance holds for `loads`, keeping generator angles fixed.
fn settle_algebraic(
    net: &Network,
    lay: &Layout,
    theta: &mut [f64],
    loads: &[f64],
) -> Result<(), f64> {
    let target = lay.alg_target(loads);
    let n_a = lay.alg_bus.len();
    let mut residual = f64::INFINITY;
    for _ in 0..=STEP_MAX_ITER {
        let full = lay.full(theta);
        let f = net.injection_unchecked(&full);
        let r = DVector::from_iterator(n_a, lay.alg_bus.iter().zip(&target).map(|(&i, &t)| f[i] - t));
        residual = r.amax();
        if residual <= ALGEBRAIC_TOL {
            return Ok(());
        }
        if !residual.is_finite() {
            break;
        }
        let jac_full = net.injection_jacobian(&full);
        let jac = DMatrix::from_fn(n_a, n_a, |a, b| jac_full[(lay.alg_bus[a], lay.alg_bus[b])]);
        let Some(delta) = jac.lu().solve(&r) else {
            break;
        };
        for (a, &i) in lay.alg_bus.iter().enumerate() {
            theta[lay.slot[i].expect("algebraic bus is non-slack")] -= delta[a];
        }
    }
    Err(residual)
}

fn check_rows(
    what: &'static str,
    rows: &[Vec<f64>],
    n_rows: usize,
    n_steps: usize,
) -> Result<(), SwingError> {
    if rows.len() != n_rows {
        return Err(SwingError::DimensionMismatch {
            what,
            expected: n_rows,
            got: rows.len(),
        });
    }
    for r in rows {
        if r.len() != n_steps {
            return Err(SwingError::DimensionMismatch {
                what,
                expected: n_steps,
                got: r.len(),
            });
        }
    }
    Ok(())
}

/// Integrates the swing DAE for `n_steps` steps of size `dt`.
///
/// `p_gen` and `p_load` hold one row per generator / load bus. Load angles in
/// `x0` are re-solved against `p_load[..][0]` before stepping.
pub fn simulate(
    net: &Network,
    p_gen: &[Vec<f64>],
    p_load: &[Vec<f64>],
    x0: &SwingState,
    dt: f64,
    n_steps: usize,
) -> Result<Trajectory, SwingError> {
    let n_g = net.n_generators();
    let n_l = net.n_loads();
    check_rows("generator inputs", p_gen, n_g, n_steps)?;
    check_rows("load inputs", p_load, n_l, n_steps)?;
    if x0.theta.len() != net.non_slack().len() {
        return Err(SwingError::DimensionMismatch {
            what: "initial angles",
            expected: net.non_slack().len(),
            got: x0.theta.len(),
        });
    }
    if x0.omega.len() != n_g {
        return Err(SwingError::DimensionMismatch {
            what: "initial frequencies",
            expected: n_g,
            got: x0.omega.len(),
        });
    }
    if !(dt > 0.0) || n_steps == 0 {
        return Err(SwingError::Initialization("dt must be positive and n_steps non-zero".into()));
    }
    if x0.theta.iter().chain(&x0.omega).any(|v| !v.is_finite()) {
        return Err(SwingError::Initialization("non-finite entry in x0".into()));
    }
    let lay = Layout::new(net);
    let load_at = |k: usize| -> Vec<f64> { p_load.iter().map(|r| r[k]).collect() };

    let mut theta = x0.theta.clone();
    settle_algebraic(net, &lay, &mut theta, &load_at(0)).map_err(|r| {
        SwingError::Initialization(format!("load balance could not be restored (residual {r:.3e})"))
    })?;
    let mut omega = x0.omega.clone();

    let slack = net.slack();
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut slack_power = Vec::with_capacity(n_steps + 1);
    states.push(SwingState {
        theta: theta.clone(),
        omega: omega.clone(),
        time: x0.time,
    });
    slack_power.push(net.injection_unchecked(&lay.full(&theta))[slack]);

    let stepper = Stepper::new(net, &lay, dt);
    for k in 0..n_steps {
        let time = x0.time + (k + 1) as f64 * dt;
        let loads = load_at(k);
        if k > 0 && p_load.iter().any(|r| r[k] != r[k - 1]) {
            settle_algebraic(net, &lay, &mut theta, &loads).map_err(|residual| SwingError::StepFailure {
                step: k,
                time: time - dt,
                residual,
            })?;
        }
        let p: Vec<f64> = p_gen.iter().map(|r| r[k]).collect();
        let (t_next, w_next) = stepper
            .step(&theta, &omega, &p, &loads)
            .map_err(|residual| SwingError::StepFailure {
                step: k,
                time,
                residual,
            })?;
        theta = t_next;
        omega = w_next;
        slack_power.push(net.injection_unchecked(&lay.full(&theta))[slack]);
        states.push(SwingState {
            theta: theta.clone(),
            omega: omega.clone(),
            time,
        });
    }
    Ok(Trajectory {
        dt,
        states,
        slack_power,
        p_gen: p_gen.to_vec(),
        p_load: p_load.to_vec(),
    })
}

/// One trapezoidal step. Unknowns are ordered `(θ_G, ω, θ_A)`.
struct Stepper<'a> {
    net: &'a Network,
    lay: &'a Layout,
    h: f64,
}

impl<'a> Stepper<'a> {
    fn new(net: &'a Network, lay: &'a Layout, dt: f64) -> Self {
        Self { net, lay, h: 0.5 * dt }
    }

    fn step(
        &self,
        theta: &[f64],
        omega: &[f64],
        p: &[f64],
        loads: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), f64> {
        let lay = self.lay;
        let h = self.h;
        let n_g = lay.gen_bus.len();
        let n_a = lay.alg_bus.len();
        let n = 2 * n_g + n_a;
        let target = lay.alg_target(loads);

        let f_old = self.net.injection_unchecked(&lay.full(theta));
        // explicit part of the frequency equation
        let rhs_old: Vec<f64> = (0..n_g)
            .map(|g| p[g] - lay.d[g] * omega[g] - f_old[lay.gen_bus[g]])
            .collect();

        let mut th = theta.to_vec();
        let mut w = omega.to_vec();
        for g in 0..n_g {
            th[lay.slot[lay.gen_bus[g]].unwrap()] += 2.0 * h * omega[g];
        }

        let mut residual = f64::INFINITY;
        for _ in 0..=STEP_MAX_ITER {
            let full = lay.full(&th);
            let f = self.net.injection_unchecked(&full);
            let mut r = DVector::zeros(n);
            for g in 0..n_g {
                let s = lay.slot[lay.gen_bus[g]].unwrap();
                r[g] = th[s] - theta[s] - h * (w[g] + omega[g]);
                let rhs_new = p[g] - lay.d[g] * w[g] - f[lay.gen_bus[g]];
                r[n_g + g] = lay.m[g] * (w[g] - omega[g]) - h * (rhs_old[g] + rhs_new);
            }
            for (a, &i) in lay.alg_bus.iter().enumerate() {
                r[2 * n_g + a] = f[i] - target[a];
            }
            residual = r.amax();
            if residual <= STEP_TOL {
                return Ok((th, w));
            }
            if !residual.is_finite() {
                break;
            }

            let jf = self.net.injection_jacobian(&full);
            // column of unknown for a bus angle
            let col = |bus: usize| -> Option<usize> {
                if let Some(g) = lay.gen_bus.iter().position(|&b| b == bus) {
                    Some(g)
                } else {
                    lay.alg_bus.iter().position(|&b| b == bus).map(|a| 2 * n_g + a)
                }
            };
            let mut jac = DMatrix::zeros(n, n);
            for g in 0..n_g {
                jac[(g, g)] = 1.0;
                jac[(g, n_g + g)] = -h;
                jac[(n_g + g, n_g + g)] = lay.m[g] + h * lay.d[g];
            }
            for j in 0..lay.n_bus {
                let Some(c) = col(j) else { continue };
                for g in 0..n_g {
                    jac[(n_g + g, c)] += h * jf[(lay.gen_bus[g], j)];
                }
                for (a, &i) in lay.alg_bus.iter().enumerate() {
                    jac[(2 * n_g + a, c)] += jf[(i, j)];
                }
            }
            let Some(delta) = jac.lu().solve(&r) else {
                break;
            };
            for g in 0..n_g {
                th[lay.slot[lay.gen_bus[g]].unwrap()] -= delta[g];
                w[g] -= delta[n_g + g];
            }
            for (a, &i) in lay.alg_bus.iter().enumerate() {
                th[lay.slot[i].unwrap()] -= delta[2 * n_g + a];
            }
        }
        Err(residual)
    }
}

/// Equilibrium state for constant generator inputs and loads: angles from
/// power flow, zero frequencies.
pub fn equilibrium_state(net: &Network, p_gen: &[f64], loads: &[f64]) -> Result<SwingState, SwingError> {
    let mut p = vec![0.0; net.n_buses()];
    for (&b, &v) in net.generators().iter().zip(p_gen) {
        p[b] = v;
    }
    for (&b, &v) in net.loads().iter().zip(loads) {
        p[b] = v;
    }
    let p_ns: Vec<f64> = net.non_slack().iter().map(|&i| p[i]).collect();
    let full = crate::grid::solve_power_flow(net, &p_ns)?;
    Ok(SwingState {
        theta: net.non_slack().iter().map(|&i| full[i]).collect(),
        omega: vec![0.0; net.n_generators()],
        time: 0.0,
    })
}

#[cfg(test)]
mod tests;
