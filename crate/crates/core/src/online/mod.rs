//! Online baseline: solves the dispatch problem on the Koopman surrogate per
//! instance with an augmented Lagrangian over the same tanh-bounded knot
//! parameterization the policy uses, plus an exhaustive-search oracle for
//! tiny instances.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffcore::LinearMap;
use crate::dpc::{squash, DpcError, DpcProblem, LossWeights, PreparedInstance, ResponseBasis, Schedule};
use crate::koopman::KoopmanModel;
use crate::scenario::ProblemInstance;

/// Closest a normalized knot gets to its bound; keeps `atanh` finite.
const U_EDGE: f64 = 1e-12;

/// Normalized knot `(1 + tanh z) / 2`.
fn to_unit(z: f64) -> f64 {
    0.5 * (1.0 + z.tanh())
}

fn from_unit_clamped(u: f64) -> f64 {
    (2.0 * u - 1.0).atanh()
}

fn from_unit(u: f64) -> f64 {
    from_unit_clamped(u.clamp(U_EDGE, 1.0 - U_EDGE))
}

/// Inner minimizer of the augmented Lagrangian at fixed multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InnerSolver {
    Adam,
    Lbfgs { memory: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub lr: f64,
    /// Constraint residual accepted as feasible.
    pub tol: f64,
    pub inner: InnerSolver,
    pub rho_init: f64,
    pub rho_growth: f64,
    pub rho_max: f64,
    /// Relative objective change between outer iterations treated as
    /// stationary.
    pub stationarity: f64,
    pub eps_rmp: f64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            outer_iters: 20,
            inner_iters: 500,
            lr: 1e-2,
            tol: 1e-4,
            inner: InnerSolver::Lbfgs { memory: 10 },
            rho_init: 10.0,
            rho_growth: 10.0,
            rho_max: 1e8,
            stationarity: 1e-6,
            eps_rmp: 5e-4,
        }
    }
}

/// Largest constraint violations on the surrogate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// rad/s
    pub frequency: f64,
    /// Coarse knot difference beyond the scaled ramp bound, pu.
    pub ramp: f64,
    /// `max |π_0 − P_0|`, pu.
    pub initial: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.frequency.max(self.ramp).max(self.initial)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub schedule: Schedule,
    /// Surrogate objective `Σ dt (c·P + c_s |P_s|)`.
    pub objective: f64,
    pub residuals: Residuals,
    /// Gradient evaluations.
    pub iterations: usize,
    pub outer_iterations: usize,
    pub wall_time: f64,
    pub converged: bool,
}

/// Per-instance solver bound to one response basis.
#[derive(Clone, Debug)]
pub struct OnlineSolver {
    problem: DpcProblem,
    p_min: Vec<f64>,
    p_max: Vec<f64>,
    cfg: OnlineConfig,
}

struct Multipliers {
    freq: Vec<f64>,
    ramp: Vec<f64>,
    init: Vec<f64>,
}

struct Eval {
    lagrangian: f64,
    grad: Vec<f64>,
    objective: f64,
    residuals: Residuals,
    /// Constraint values `h` (≤ 0 feasible) and equality residuals.
    h_freq: Vec<f64>,
    h_ramp: Vec<f64>,
    e_init: Vec<f64>,
}

impl OnlineSolver {
    pub fn new(basis: Arc<ResponseBasis>, p_min: Vec<f64>, p_max: Vec<f64>, cfg: OnlineConfig) -> Self {
        let problem = DpcProblem::from_basis(basis, LossWeights::default(), cfg.eps_rmp);
        Self {
            problem,
            p_min,
            p_max,
            cfg,
        }
    }

    pub fn problem(&self) -> &DpcProblem {
        &self.problem
    }

    /// Solves one instance; the wall time covers the free-response rollout
    /// and the optimization.
    pub fn solve(&self, model: &KoopmanModel, inst: &ProblemInstance) -> Result<SolveReport, DpcError> {
        let start = Instant::now();
        let prep = self.problem.prepare_plain(model, inst)?;
        let mut report = self.solve_prepared(&prep)?;
        report.wall_time = start.elapsed().as_secs_f64();
        Ok(report)
    }

    fn knots(&self, z: &[f64]) -> Vec<f64> {
        let nd = self.problem.basis.n_knots();
        z.iter()
            .enumerate()
            .map(|(i, &v)| squash(v, self.p_min[i / nd], self.p_max[i / nd]))
            .collect()
    }

    fn evaluate(&self, prep: &PreparedInstance, z: &[f64], mult: &Multipliers, rho: f64) -> Eval {
        let basis = &self.problem.basis;
        let (n_gen, nd, n) = (basis.n_gen(), basis.n_knots(), basis.n_steps());
        let pi = self.knots(z);
        let y = basis.readouts(&prep.free, &pi);
        let mut g_y = vec![0.0; y.len()];
        let mut g_pi: Vec<f64> = prep.gen_cost.data().to_vec();

        let mut objective: f64 = pi.iter().zip(prep.gen_cost.data()).map(|(p, c)| p * c).sum();
        for (gy, &v) in g_y[n_gen * n..].iter_mut().zip(&y[n_gen * n..]) {
            objective += prep.slack_cost * v.abs();
            *gy = prep.slack_cost * v.signum();
        }
        let mut lagrangian = objective;
        let mut res = Residuals::default();
        // Inequalities h ≤ 0 enter as (max(0, μ + ρh)² − μ²) / 2ρ.
        let h_freq: Vec<f64> = y[..n_gen * n].iter().map(|v| v.abs() - prep.omega_bnd).collect();
        for (i, &h) in h_freq.iter().enumerate() {
            let s = (mult.freq[i] + rho * h).max(0.0);
            lagrangian += (s * s - mult.freq[i] * mult.freq[i]) / (2.0 * rho);
            g_y[i] += s * y[i].signum();
            res.frequency = res.frequency.max(h);
        }
        let rb = self.problem.coarse_ramp_bound();
        let mut h_ramp = Vec::with_capacity(n_gen * (nd - 1));
        for gi in 0..n_gen {
            for j in 0..nd - 1 {
                let d = pi[gi * nd + j + 1] - pi[gi * nd + j];
                let h = d.abs() - rb;
                let idx = h_ramp.len();
                let s = (mult.ramp[idx] + rho * h).max(0.0);
                lagrangian += (s * s - mult.ramp[idx] * mult.ramp[idx]) / (2.0 * rho);
                g_pi[gi * nd + j + 1] += s * d.signum();
                g_pi[gi * nd + j] -= s * d.signum();
                res.ramp = res.ramp.max(h);
                h_ramp.push(h);
            }
        }
        let mut e_init = Vec::with_capacity(n_gen);
        for gi in 0..n_gen {
            let e = pi[gi * nd] - prep.p_g0[gi];
            lagrangian += mult.init[gi] * e + 0.5 * rho * e * e;
            g_pi[gi * nd] += mult.init[gi] + rho * e;
            res.initial = res.initial.max(e.abs());
            e_init.push(e);
        }
        basis.apply_transpose(&g_y, &mut g_pi);
        // Gradient in the normalized knot `u = (1 + tanh z) / 2`, which is
        // the z-gradient preconditioned by the inverse tanh Jacobian. Near
        // a bound the plain z-gradient vanishes and saturated knots could
        // not be pulled back by the multipliers.
        let grad = (0..z.len())
            .map(|i| g_pi[i] * (self.p_max[i / nd] - self.p_min[i / nd]))
            .collect();
        res.frequency = res.frequency.max(0.0);
        res.ramp = res.ramp.max(0.0);
        Eval {
            lagrangian,
            grad,
            objective,
            residuals: res,
            h_freq,
            h_ramp,
            e_init,
        }
    }

    /// Adam on the normalized knots; a step that raises the Lagrangian is
    /// rejected, halves the step size and restarts the moments.
    fn inner_adam(&self, prep: &PreparedInstance, z: &mut Vec<f64>, mult: &Multipliers, rho: f64, evals: &mut usize) -> Eval {
        let cfg = &self.cfg;
        let dim = z.len();
        let mut lr = cfg.lr;
        let mut m = vec![0.0; dim];
        let mut v = vec![0.0; dim];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut cur = self.evaluate(prep, z, mult, rho);
        *evals += 1;
        let mut t = 0;
        for _ in 0..cfg.inner_iters {
            t += 1;
            for i in 0..dim {
                m[i] = b1 * m[i] + (1.0 - b1) * cur.grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * cur.grad[i] * cur.grad[i];
            }
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let trial: Vec<f64> = (0..dim)
                .map(|i| from_unit(to_unit(z[i]) - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps)))
                .collect();
            let next = self.evaluate(prep, &trial, mult, rho);
            *evals += 1;
            if next.lagrangian <= cur.lagrangian {
                let gain = cur.lagrangian - next.lagrangian;
                *z = trial;
                cur = next;
                lr = (lr * 1.2).min(cfg.lr);
                if gain <= 1e-13 * cur.lagrangian.abs().max(1.0) && lr >= cfg.lr {
                    break;
                }
            } else {
                lr *= 0.5;
                m.iter_mut().for_each(|v| *v = 0.0);
                v.iter_mut().for_each(|v| *v = 0.0);
                t = 0;
                if lr < 1e-10 {
                    break;
                }
            }
        }
        cur
    }

    /// Limited-memory BFGS on the normalized knots, projected onto the
    /// unit box, with step halving until the Lagrangian decreases
    /// sufficiently. The first step moves the largest coordinate by `lr`.
    fn inner_lbfgs(
        &self,
        prep: &PreparedInstance,
        z: &mut Vec<f64>,
        mult: &Multipliers,
        rho: f64,
        memory: usize,
        evals: &mut usize,
    ) -> Eval {
        let cfg = &self.cfg;
        let dim = z.len();
        let mut u: Vec<f64> = z.iter().map(|&v| to_unit(v)).collect();
        let mut cur = self.evaluate(prep, z, mult, rho);
        *evals += 1;
        let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(memory);
        let dot = crate::diffcore::dot;
        for _ in 0..cfg.inner_iters {
            let g = &cur.grad;
            let g_max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if g_max == 0.0 {
                break;
            }
            let mut dir = g.clone();
            let mut alphas = Vec::with_capacity(pairs.len());
            for (s, y, r) in pairs.iter().rev() {
                let a = r * dot(s, &dir);
                dir.iter_mut().zip(y).for_each(|(d, yi)| *d -= a * yi);
                alphas.push(a);
            }
            let gamma = match pairs.back() {
                Some((s, y, _)) => dot(s, y) / dot(y, y),
                None => cfg.lr / g_max,
            };
            dir.iter_mut().for_each(|d| *d *= gamma);
            for ((s, y, r), a) in pairs.iter().zip(alphas.iter().rev()) {
                let b = r * dot(y, &dir);
                dir.iter_mut().zip(s).for_each(|(d, si)| *d += (a - b) * si);
            }
            dir.iter_mut().for_each(|d| *d = -*d);
            if dot(g, &dir) >= 0.0 {
                pairs.clear();
                dir = g.iter().map(|v| -v * cfg.lr / g_max).collect();
            }
            let mut step = 1.0;
            let accepted = loop {
                let trial_u: Vec<f64> = (0..dim)
                    .map(|i| (u[i] + step * dir[i]).clamp(U_EDGE, 1.0 - U_EDGE))
                    .collect();
                let trial_z: Vec<f64> = trial_u.iter().map(|&v| from_unit_clamped(v)).collect();
                let next = self.evaluate(prep, &trial_z, mult, rho);
                *evals += 1;
                let predicted: f64 = (0..dim).map(|i| g[i] * (trial_u[i] - u[i])).sum();
                if next.lagrangian.is_finite() && next.lagrangian <= cur.lagrangian + 1e-4 * predicted.min(0.0) {
                    break Some((trial_u, trial_z, next));
                }
                step *= 0.5;
                if step < 1e-10 {
                    break None;
                }
            };
            let Some((trial_u, trial_z, next)) = accepted else {
                if pairs.is_empty() {
                    break;
                }
                pairs.clear();
                continue;
            };
            let s: Vec<f64> = trial_u.iter().zip(&u).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = next.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                if pairs.len() == memory {
                    pairs.pop_front();
                }
                pairs.push_back((s, y, 1.0 / sy));
            }
            let gain = cur.lagrangian - next.lagrangian;
            u = trial_u;
            *z = trial_z;
            cur = next;
            if gain <= 1e-14 * cur.lagrangian.abs().max(1.0) {
                break;
            }
        }
        cur
    }

    /// Augmented-Lagrangian solve from the midpoint schedule.
    pub fn solve_prepared(&self, prep: &PreparedInstance) -> Result<SolveReport, DpcError> {
        let start = Instant::now();
        let basis = &self.problem.basis;
        let (n_gen, nd, n) = (basis.n_gen(), basis.n_knots(), basis.n_steps());
        let cfg = &self.cfg;
        let mut z = vec![0.0; n_gen * nd];
        let mut mult = Multipliers {
            freq: vec![0.0; n_gen * n],
            ramp: vec![0.0; n_gen * (nd - 1)],
            init: vec![0.0; n_gen],
        };
        let mut rho = cfg.rho_init;
        let mut evals = 0usize;
        // Outer iterates ranked by (feasible, objective or residual).
        let mut best: Option<(bool, f64, Vec<f64>, f64, Residuals)> = None;
        let mut consider = |ev: &Eval, z: &[f64]| {
            let feasible = ev.residuals.max() <= cfg.tol;
            let key = if feasible { ev.objective } else { ev.residuals.max() };
            let better = match &best {
                None => true,
                Some((bf, bk, ..)) => (feasible && !bf) || (feasible == *bf && key < *bk),
            };
            if better {
                best = Some((feasible, key, z.to_vec(), ev.objective, ev.residuals));
            }
        };
        let mut prev_residual = f64::INFINITY;
        let mut prev_objective = f64::INFINITY;
        let mut converged = false;
        let mut outer = 0;
        while outer < cfg.outer_iters {
            outer += 1;
            let cur = match cfg.inner {
                InnerSolver::Adam => self.inner_adam(prep, &mut z, &mult, rho, &mut evals),
                InnerSolver::Lbfgs { memory } => self.inner_lbfgs(prep, &mut z, &mult, rho, memory, &mut evals),
            };
            if !cur.lagrangian.is_finite() {
                return Err(DpcError::NumericFault("augmented Lagrangian".into()));
            }
            consider(&cur, &z);
            let residual = cur.residuals.max();
            log::debug!(
                "online outer {outer}: rho {rho:e}, objective {:.6}, residual {residual:.3e}",
                cur.objective
            );
            if residual <= cfg.tol
                && (prev_objective - cur.objective).abs() <= cfg.stationarity * cur.objective.abs().max(1.0)
            {
                converged = true;
                break;
            }
            for (mu, &h) in mult.freq.iter_mut().zip(&cur.h_freq) {
                *mu = (*mu + rho * h).max(0.0);
            }
            for (mu, &h) in mult.ramp.iter_mut().zip(&cur.h_ramp) {
                *mu = (*mu + rho * h).max(0.0);
            }
            for (la, &e) in mult.init.iter_mut().zip(&cur.e_init) {
                *la += rho * e;
            }
            if residual > cfg.tol && residual > 0.5 * prev_residual {
                rho = (rho * cfg.rho_growth).min(cfg.rho_max);
            }
            prev_residual = residual;
            prev_objective = cur.objective;
        }
        let (feasible, _, z_best, objective, residuals) = best.expect("at least one outer iteration");
        let coarse: Vec<Vec<f64>> = self.knots(&z_best).chunks(nd).map(<[f64]>::to_vec).collect();
        Ok(SolveReport {
            schedule: Schedule::from_coarse(coarse, &self.p_min, &self.p_max, n)?,
            objective,
            residuals,
            iterations: evals,
            outer_iterations: outer,
            wall_time: start.elapsed().as_secs_f64(),
            converged: converged && feasible,
        })
    }
}

/// Builds the response basis for `model` and solves one instance.
pub fn solve_ded_ko(
    inst: &ProblemInstance,
    model: &KoopmanModel,
    p_min: &[f64],
    p_max: &[f64],
    n_knots: usize,
    cfg: &OnlineConfig,
) -> Result<SolveReport, DpcError> {
    let basis = Arc::new(ResponseBasis::new(model, n_knots, inst.n_steps)?);
    OnlineSolver::new(basis, p_min.to_vec(), p_max.to_vec(), cfg.clone()).solve(model, inst)
}

/// Result of exhaustive search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteForce {
    pub objective: f64,
    /// Coarse knots, `n_gen x N_d` row-major.
    pub knots: Vec<f64>,
    pub evaluated: usize,
}

/// Slack granted to grid points that sit on a constraint boundary up to
/// rounding.
const FEAS_TOL: f64 = 1e-12;

/// Largest enumeration [`brute_force_toy`] accepts.
pub const MAX_ENUMERATION: u128 = 10_000_000;

/// Exhaustive search over knots on a `resolution`-point grid spanning each
/// generator's bounds; the first knot of every generator is pinned to its
/// initial set-point. Schedules violating the frequency or ramp limits on
/// the surrogate are skipped. Ties keep the lexicographically first
/// schedule (knots in row-major order, grid ascending).
pub fn brute_force_toy(
    problem: &DpcProblem,
    prep: &PreparedInstance,
    p_min: &[f64],
    p_max: &[f64],
    resolution: usize,
) -> Result<Option<BruteForce>, DpcError> {
    let basis = &problem.basis;
    let (n_gen, nd) = (basis.n_gen(), basis.n_knots());
    let free_knots = n_gen * (nd - 1);
    let size = (resolution as u128).checked_pow(free_knots as u32).unwrap_or(u128::MAX);
    if resolution < 2 || size > MAX_ENUMERATION {
        return Err(DpcError::Dimension {
            what: "enumeration size",
            expected: MAX_ENUMERATION as usize,
            got: size.min(usize::MAX as u128) as usize,
        });
    }
    let grid = |g: usize, i: usize| p_min[g] + (p_max[g] - p_min[g]) * i as f64 / (resolution - 1) as f64;
    let mut digits = vec![0usize; free_knots];
    let mut best: Option<BruteForce> = None;
    let mut evaluated = 0;
    let rb = problem.coarse_ramp_bound();
    loop {
        let mut pi = vec![0.0; n_gen * nd];
        for g in 0..n_gen {
            pi[g * nd] = prep.p_g0[g];
            for j in 1..nd {
                pi[g * nd + j] = grid(g, digits[g * (nd - 1) + j - 1]);
            }
        }
        evaluated += 1;
        let ramp_ok = pi
            .chunks(nd)
            .all(|row| row.windows(2).all(|d| (d[1] - d[0]).abs() <= rb + FEAS_TOL));
        if ramp_ok {
            let y = basis.readouts(&prep.free, &pi);
            let freq_ok = y[..n_gen * basis.n_steps()].iter().all(|v| v.abs() <= prep.omega_bnd + FEAS_TOL);
            if freq_ok {
                let objective = problem.terms(prep, &pi).cost;
                if best.as_ref().is_none_or(|b| objective < b.objective) {
                    best = Some(BruteForce {
                        objective,
                        knots: pi,
                        evaluated: 0,
                    });
                }
            }
        }
        // Odometer increment, last knot fastest.
        let mut pos = free_knots;
        loop {
            if pos == 0 {
                return Ok(best.map(|b| BruteForce { evaluated, ..b }));
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < resolution {
                break;
            }
            digits[pos] = 0;
        }
    }
}
