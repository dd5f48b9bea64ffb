use serde::{Deserialize, Serialize};

use super::{rad_to_hz, Trajectory};

/// Cost and constraint metrics of a simulated schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// `Σ_k dt (Σ_G c_i P_i[k] + c_s |P_s(t_{k+1})|)`
    pub cost: f64,
    /// Largest excursion of any `|ω|` beyond the bound, Hz, clipped at 0.
    pub max_freq_violation_hz: f64,
    /// Largest per-step input change beyond `ε_rmp`, clipped at 0.
    pub max_ramp_violation: f64,
    pub max_abs_freq_hz: f64,
}

/// Scores a trajectory. `cost` lists the generators followed by the slack.
/// The slack term of step `k` uses the slack power that step produces.
pub fn evaluate_schedule(traj: &Trajectory, cost: &[f64], omega_bnd_hz: f64, eps_rmp: f64) -> EvalMetrics {
    let n_g = traj.p_gen.len();
    assert_eq!(cost.len(), n_g + 1, "one cost per generator plus the slack");
    let c_s = cost[n_g];
    let n = traj.n_steps();

    let mut total = 0.0;
    for k in 0..n {
        let gen: f64 = (0..n_g).map(|g| cost[g] * traj.p_gen[g][k]).sum();
        total += traj.dt * (gen + c_s * traj.slack_power[k + 1].abs());
    }

    let max_abs_freq_hz = traj
        .states
        .iter()
        .flat_map(|s| s.omega.iter())
        .fold(0.0f64, |m, &w| m.max(rad_to_hz(w).abs()));

    let max_ramp = traj
        .p_gen
        .iter()
        .flat_map(|row| row.windows(2).map(|w| (w[1] - w[0]).abs()))
        .fold(0.0f64, f64::max);

    EvalMetrics {
        cost: total,
        max_freq_violation_hz: (max_abs_freq_hz - omega_bnd_hz).max(0.0),
        max_ramp_violation: (max_ramp - eps_rmp).max(0.0),
        max_abs_freq_hz,
    }
}
