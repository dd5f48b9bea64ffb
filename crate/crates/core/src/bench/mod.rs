//! Benchmark harness: runs the policy and the online baseline on a test set,
//! simulates both schedules in the swing DAE and tabulates cost gaps,
//! constraint violations and timings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpc::{infer, DpcError, DpcProblem, LossWeights, Policy, ResponseBasis, Schedule};
use crate::grid::Network;
use crate::koopman::KoopmanModel;
use crate::online::{OnlineConfig, OnlineSolver};
use crate::scenario::{ProblemInstance, Regime};
use crate::swing::{evaluate_schedule, simulate, EvalMetrics};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("empty test set")]
    EmptyTestSet,
    #[error("test set mixes regimes or horizons (instance {id})")]
    Inconsistent { id: usize },
    #[error("every instance failed; first: {0}")]
    AllFailed(String),
    #[error(transparent)]
    Dpc(#[from] DpcError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Per-step ramp limit used for scoring, pu.
    pub eps_rmp: f64,
    pub online: OnlineConfig,
    /// Simulation workers; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            eps_rmp: 5e-4,
            online: OnlineConfig::default(),
            workers: 0,
        }
    }
}

/// One method on one instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    /// True-dynamics cost.
    pub cost: f64,
    pub max_freq_violation_hz: f64,
    pub max_ramp_violation: f64,
    /// Inference or solve wall time, s.
    pub time: f64,
    /// Objective on the Koopman surrogate.
    pub surrogate_objective: f64,
    /// Largest surrogate constraint residual (frequency rad/s, coarse ramp
    /// and initial offset in pu).
    pub surrogate_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: usize,
    pub seed: u64,
    pub dpc: Option<MethodOutcome>,
    pub online: Option<MethodOutcome>,
    pub online_converged: bool,
    /// `100 (dpc − online) / |online|` on true-dynamics cost.
    pub gap_pct: Option<f64>,
    /// Set when either method or its simulation failed.
    pub failure: Option<String>,
}

/// Means over the instances where both methods succeeded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub label: String,
    pub mean_cost: f64,
    /// Mean paired gap against the baseline; `None` for the baseline itself.
    pub mean_gap_pct: Option<f64>,
    pub mean_max_freq_violation_hz: f64,
    pub mean_max_ramp_violation: f64,
    pub mean_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: Regime,
    pub config: BenchConfig,
    pub n_instances: usize,
    pub n_failed: usize,
    /// Mean online time over mean inference time.
    pub speedup: f64,
    pub online: MethodSummary,
    pub dpc: MethodSummary,
    pub instances: Vec<InstanceRecord>,
}

pub const BASELINE_LABEL: &str = "DED-KO";
pub const POLICY_LABEL: &str = "DED-DPC";

struct Timed {
    dpc: Result<(Schedule, f64), String>,
    online: Result<(Schedule, f64, f64, f64, bool), String>,
    dpc_surrogate: Option<(f64, f64)>,
}

fn surrogate_residual(problem: &DpcProblem, prep: &crate::dpc::PreparedInstance, pi: &[f64]) -> f64 {
    let basis = &problem.basis;
    let (n_gen, nd, n) = (basis.n_gen(), basis.n_knots(), basis.n_steps());
    let y = basis.readouts(&prep.free, pi);
    let freq = y[..n_gen * n].iter().map(|v| v.abs() - prep.omega_bnd).fold(0.0, f64::max);
    let rb = problem.coarse_ramp_bound();
    let ramp = pi
        .chunks(nd)
        .flat_map(|row| row.windows(2).map(move |d| (d[1] - d[0]).abs() - rb))
        .fold(0.0, f64::max);
    let init = (0..n_gen).map(|g| (pi[g * nd] - prep.p_g0[g]).abs()).fold(0.0, f64::max);
    freq.max(ramp).max(init)
}

fn simulate_metrics(
    net: &Network,
    inst: &ProblemInstance,
    schedule: &Schedule,
    eps_rmp: f64,
) -> Result<EvalMetrics, String> {
    let traj = simulate(net, &schedule.fine, &inst.load_forecast(), &inst.x0, inst.dt, inst.n_steps)
        .map_err(|e| e.to_string())?;
    Ok(evaluate_schedule(&traj, &inst.cost, inst.omega_bnd_hz(), eps_rmp))
}

/// Mean of a non-empty sequence.
fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

fn summarize(label: &str, rows: &[&InstanceRecord], pick: impl Fn(&InstanceRecord) -> MethodOutcome, gap: bool) -> MethodSummary {
    MethodSummary {
        label: label.into(),
        mean_cost: mean(rows.iter().map(|r| pick(r).cost)),
        mean_gap_pct: gap.then(|| mean(rows.iter().filter_map(|r| r.gap_pct))),
        mean_max_freq_violation_hz: mean(rows.iter().map(|r| pick(r).max_freq_violation_hz)),
        mean_max_ramp_violation: mean(rows.iter().map(|r| pick(r).max_ramp_violation)),
        mean_time: mean(rows.iter().map(|r| pick(r).time)),
    }
}

/// Runs both methods on every test instance.
///
/// Inference and online solves run one at a time on the calling thread so
/// the timings are not skewed by contention; only the swing simulations are
/// spread over workers. Failed instances are recorded and left out of the
/// means.
pub fn run_benchmark(
    net: &Network,
    test: &[ProblemInstance],
    policy: &Policy,
    model: &KoopmanModel,
    cfg: &BenchConfig,
) -> Result<EvalReport, BenchError> {
    let first = test.first().ok_or(BenchError::EmptyTestSet)?;
    if let Some(bad) = test
        .iter()
        .find(|i| i.regime != first.regime || i.n_steps != first.n_steps)
    {
        return Err(BenchError::Inconsistent { id: bad.id });
    }
    let basis = Arc::new(ResponseBasis::new(model, policy.n_knots, first.n_steps)?);
    let solver = OnlineSolver::new(basis.clone(), policy.p_min.clone(), policy.p_max.clone(), cfg.online.clone());
    let problem = DpcProblem::from_basis(basis, LossWeights::default(), cfg.eps_rmp);

    let mut timed = Vec::with_capacity(test.len());
    for inst in test {
        let dpc = infer(inst, policy).map_err(|e| e.to_string());
        let online = solver
            .solve(model, inst)
            .map(|r| (r.schedule, r.wall_time, r.objective, r.residuals.max(), r.converged))
            .map_err(|e| e.to_string());
        let dpc_surrogate = match (&dpc, problem.prepare_plain(model, inst)) {
            (Ok((s, _)), Ok(prep)) => {
                let pi = s.coarse.concat();
                Some((problem.terms(&prep, &pi).cost, surrogate_residual(&problem, &prep, &pi)))
            }
            _ => None,
        };
        log::info!("benchmark: instance {} solved", inst.id);
        timed.push(Timed {
            dpc,
            online,
            dpc_surrogate,
        });
    }

    let workers = match cfg.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    }
    .min(test.len());
    let chunk = test.len().div_ceil(workers);
    let mut records: Vec<InstanceRecord> = Vec::with_capacity(test.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = test
            .chunks(chunk)
            .zip(timed.chunks(chunk))
            .map(|(insts, times)| {
                scope.spawn(move || {
                    insts
                        .iter()
                        .zip(times)
                        .map(|(inst, t)| evaluate_instance(net, inst, t, cfg.eps_rmp))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            records.extend(h.join().expect("simulation worker panicked"));
        }
    });

    let ok: Vec<&InstanceRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
    if ok.is_empty() {
        let first = records.iter().find_map(|r| r.failure.clone()).unwrap_or_default();
        return Err(BenchError::AllFailed(first));
    }
    let online = summarize(BASELINE_LABEL, &ok, |r| r.online.expect("succeeded"), false);
    let dpc = summarize(POLICY_LABEL, &ok, |r| r.dpc.expect("succeeded"), true);
    Ok(EvalReport {
        regime: first.regime,
        config: cfg.clone(),
        n_instances: records.len(),
        n_failed: records.len() - ok.len(),
        speedup: online.mean_time / dpc.mean_time,
        online,
        dpc,
        instances: records,
    })
}

fn evaluate_instance(net: &Network, inst: &ProblemInstance, t: &Timed, eps_rmp: f64) -> InstanceRecord {
    let mut record = InstanceRecord {
        id: inst.id,
        seed: inst.seed,
        dpc: None,
        online: None,
        online_converged: false,
        gap_pct: None,
        failure: None,
    };
    let mut failures = Vec::new();
    match &t.dpc {
        Ok((schedule, time)) => match (simulate_metrics(net, inst, schedule, eps_rmp), t.dpc_surrogate) {
            (Ok(m), Some((obj, res))) => {
                record.dpc = Some(MethodOutcome {
                    cost: m.cost,
                    max_freq_violation_hz: m.max_freq_violation_hz,
                    max_ramp_violation: m.max_ramp_violation,
                    time: *time,
                    surrogate_objective: obj,
                    surrogate_residual: res,
                });
            }
            (Err(e), _) => failures.push(format!("{POLICY_LABEL} simulation: {e}")),
            (Ok(_), None) => failures.push(format!("{POLICY_LABEL}: surrogate evaluation failed")),
        },
        Err(e) => failures.push(format!("{POLICY_LABEL}: {e}")),
    }
    match &t.online {
        Ok((schedule, time, obj, res, converged)) => {
            record.online_converged = *converged;
            match simulate_metrics(net, inst, schedule, eps_rmp) {
                Ok(m) => {
                    record.online = Some(MethodOutcome {
                        cost: m.cost,
                        max_freq_violation_hz: m.max_freq_violation_hz,
                        max_ramp_violation: m.max_ramp_violation,
                        time: *time,
                        surrogate_objective: *obj,
                        surrogate_residual: *res,
                    });
                }
                Err(e) => failures.push(format!("{BASELINE_LABEL} simulation: {e}")),
            }
        }
        Err(e) => failures.push(format!("{BASELINE_LABEL}: {e}")),
    }
    if let (Some(d), Some(o)) = (record.dpc, record.online) {
        record.gap_pct = Some(100.0 * (d.cost - o.cost) / o.cost.abs());
    }
    if !failures.is_empty() {
        record.failure = Some(failures.join("; "));
    }
    record
}

/// Files written by [`emit_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportPaths {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub summary: PathBuf,
}

pub const CSV_HEADER: [&str; 17] = [
    "id",
    "seed",
    "status",
    "dpc_cost",
    "online_cost",
    "gap_pct",
    "dpc_freq_violation_hz",
    "online_freq_violation_hz",
    "dpc_ramp_violation",
    "online_ramp_violation",
    "dpc_time_s",
    "online_time_s",
    "dpc_surrogate_objective",
    "online_surrogate_objective",
    "dpc_surrogate_residual",
    "online_surrogate_residual",
    "online_converged",
];

fn csv_row(r: &InstanceRecord) -> Vec<String> {
    let f = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:e}"));
    let d = |g: fn(&MethodOutcome) -> f64| f(r.dpc.as_ref().map(g));
    let o = |g: fn(&MethodOutcome) -> f64| f(r.online.as_ref().map(g));
    vec![
        r.id.to_string(),
        r.seed.to_string(),
        r.failure.clone().unwrap_or_else(|| "ok".into()),
        d(|m| m.cost),
        o(|m| m.cost),
        f(r.gap_pct),
        d(|m| m.max_freq_violation_hz),
        o(|m| m.max_freq_violation_hz),
        d(|m| m.max_ramp_violation),
        o(|m| m.max_ramp_violation),
        d(|m| m.time),
        o(|m| m.time),
        d(|m| m.surrogate_objective),
        o(|m| m.surrogate_objective),
        d(|m| m.surrogate_residual),
        o(|m| m.surrogate_residual),
        r.online_converged.to_string(),
    ]
}

/// Human-readable tables: solution time and objective change, then the
/// average maximum constraint violations.
pub fn summary_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let regime = report.regime.label();
    let rows = [&report.online, &report.dpc];
    let _ = writeln!(
        s,
        "Average solution time and change in objective ({} instances, {} failed)",
        report.n_instances, report.n_failed
    );
    let _ = writeln!(
        s,
        "{:<8}{:<10}{:>32}{:>16}",
        "Regime", "Method", format!("% increase in obj. over {BASELINE_LABEL}"), "Sol. time (s)"
    );
    for m in rows {
        let gap = m.mean_gap_pct.map_or_else(|| "NA".to_string(), |g| format!("{g:.3}"));
        let _ = writeln!(s, "{regime:<8}{:<10}{gap:>32}{:>16.3e}", m.label, m.mean_time);
    }
    let _ = writeln!(s, "Speedup ({BASELINE_LABEL} / {POLICY_LABEL}): {:.3e}", report.speedup);
    let _ = writeln!(s);
    let _ = writeln!(s, "Average maximum constraint violation over test problems");
    let _ = writeln!(
        s,
        "{:<8}{:<10}{:>26}{:>22}",
        "Regime", "Method", "freq. const. viol. (Hz)", "ramp const. viol."
    );
    for m in rows {
        let _ = writeln!(
            s,
            "{regime:<8}{:<10}{:>26.3e}{:>22.3e}",
            m.label, m.mean_max_freq_violation_hz, m.mean_max_ramp_violation
        );
    }
    s
}

/// Writes `report.json`, `instances.csv` and `summary.txt` into `dir`.
pub fn emit_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<ReportPaths, BenchError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let paths = ReportPaths {
        json: dir.join("report.json"),
        csv: dir.join("instances.csv"),
        summary: dir.join("summary.txt"),
    };
    fs::write(&paths.json, serde_json::to_string_pretty(report)?)?;
    let mut w = csv::Writer::from_path(&paths.csv)?;
    w.write_record(CSV_HEADER)?;
    for r in &report.instances {
        w.write_record(csv_row(r))?;
    }
    w.flush()?;
    fs::write(&paths.summary, summary_table(report))?;
    Ok(paths)
}

/// Reads a report written by [`emit_report`].
pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport, BenchError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
