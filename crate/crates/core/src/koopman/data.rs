use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::KoopmanError;
use crate::diffcore::linear_interpolate;
use crate::grid::Network;
use crate::scenario::{sample_instance, Regime, ScenarioConfig};
use crate::swing::simulate;

/// How identification data are harvested from the swing simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_trajectories: usize,
    /// Every `val_every`-th trajectory is held out.
    pub val_every: usize,
    pub pairs_per_trajectory: usize,
    pub windows_per_trajectory: usize,
    pub window_len: usize,
    /// Knots of the random generator schedule.
    pub n_knots: usize,
    /// Largest change between consecutive knots, pu.
    pub knot_step: f64,
    /// Probability that a knot repeats its predecessor.
    pub hold_prob: f64,
    pub scenario: ScenarioConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 200,
            val_every: 10,
            pairs_per_trajectory: 200,
            windows_per_trajectory: 5,
            window_len: 100,
            n_knots: 50,
            knot_step: 0.06,
            hold_prob: 0.2,
            scenario: ScenarioConfig::default(),
        }
    }
}

/// One transition `(x_k, P_k, x_{k+1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub trajectory: usize,
    pub step: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub x_next: Vec<f64>,
}

/// A stretch of a held-out trajectory for multi-step checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutWindow {
    pub x0: Vec<f64>,
    /// One row per input channel.
    pub inputs: Vec<Vec<f64>>,
    /// True frequencies after each step, one row per generator, rad/s.
    pub omega: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub train: Vec<Transition>,
    pub validation: Vec<Transition>,
    pub windows: Vec<RolloutWindow>,
}

/// Piecewise-linear random walk starting at `start`, clipped to bounds.
fn random_schedule(
    rng: &mut impl Rng,
    start: f64,
    lo: f64,
    hi: f64,
    cfg: &DataConfig,
    n_steps: usize,
) -> Vec<f64> {
    let mut knots = Vec::with_capacity(cfg.n_knots);
    let mut cur = start;
    knots.push(cur);
    for _ in 1..cfg.n_knots {
        if !rng.random_bool(cfg.hold_prob) {
            cur = (cur + rng.random_range(-cfg.knot_step..=cfg.knot_step)).clamp(lo, hi);
        }
        knots.push(cur);
    }
    linear_interpolate(&knots, n_steps).expect("knot grid fits the horizon")
}

/// Simulates scenario-sampled instances under random ramping generator
/// schedules and harvests transitions and validation windows.
pub fn generate_transitions(
    net: &Network,
    cfg: &DataConfig,
    seed: u64,
) -> Result<TransitionDataset, KoopmanError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = net.generator_bounds();
    let n = cfg.scenario.n_steps;
    let mut out = TransitionDataset::default();
    for traj in 0..cfg.n_trajectories {
        let inst = sample_instance(net, Regime::Nominal, rng.next_u64(), &cfg.scenario)?;
        let gens: Vec<Vec<f64>> = (0..net.n_generators())
            .map(|g| random_schedule(&mut rng, inst.p_g0[g], lo[g], hi[g], cfg, n))
            .collect();
        let loads = inst.load_forecast();
        let tr = simulate(net, &gens, &loads, &inst.x0, cfg.scenario.dt, n)?;

        let held_out = cfg.val_every > 0 && traj % cfg.val_every == cfg.val_every - 1;
        let mut steps = sample(&mut rng, n, cfg.pairs_per_trajectory.min(n)).into_vec();
        steps.sort_unstable();
        let pairs = steps.into_iter().map(|k| Transition {
            trajectory: traj,
            step: k,
            x: tr.state_vector(k),
            u: tr.input_vector(k),
            x_next: tr.state_vector(k + 1),
        });
        if held_out {
            out.validation.extend(pairs);
            let len = cfg.window_len;
            if len > 0 && len < n {
                for _ in 0..cfg.windows_per_trajectory {
                    let s = rng.random_range(0..=n - len);
                    out.windows.push(RolloutWindow {
                        x0: tr.state_vector(s),
                        inputs: tr
                            .p_gen
                            .iter()
                            .chain(&tr.p_load)
                            .map(|row| row[s..s + len].to_vec())
                            .collect(),
                        omega: (0..net.n_generators())
                            .map(|g| (1..=len).map(|j| tr.states[s + j].omega[g]).collect())
                            .collect(),
                    });
                }
            }
        } else {
            out.train.extend(pairs);
        }
    }
    if out.train.is_empty() {
        return Err(KoopmanError::EmptyDataset("training transitions"));
    }
    Ok(out)
}
