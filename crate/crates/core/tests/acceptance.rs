//! End-to-end acceptance run: prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.
//!
//! Criteria 5 to 8 share one full-scale pipeline (surrogate fit, NO and TO
//! datasets of 400 training and 100 test instances, policy training with the
//! default configuration, benchmark against the online baseline). On a single
//! core it takes tens of minutes.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dedpc::bench::{run_benchmark, BenchConfig, EvalReport};
use dedpc::diffcore::{Graph, InterpPlan, LinearMap, Tensor, Var};
use dedpc::dpc::{
    dpc_loss, policy_forward, train_policy, DpcTrainConfig, LossWeights, Policy, PreparedInstance,
    ResponseBasis, Schedule,
};
use dedpc::grid::{ieee9, Network};
use dedpc::koopman::{
    generate_transitions, injection_dictionary, train_koopman, DataConfig, KoopmanDims, KoopmanModel,
    KoopmanTrainConfig,
};
use dedpc::online::{brute_force_toy, OnlineConfig, OnlineSolver};
use dedpc::scenario::{make_dataset, sample_instance, Dataset, Regime, ScenarioConfig};
use dedpc::swing::{equilibrium_state, simulate, Trajectory};

const EPS_RMP: f64 = 5e-4;
const N_TRAIN: usize = 400;
const N_TEST: usize = 100;
const DATA_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- criterion 1

fn hard_bounds() -> Outcome {
    let net = ieee9();
    let (p_min, p_max) = net.generator_bounds();
    let cfg = ScenarioConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0usize;
    let mut outside = 0usize;
    let mut saturated = 0usize;
    for trial in 0..1000u64 {
        let regime = if trial % 2 == 0 { Regime::Nominal } else { Regime::Tight };
        let inst = sample_instance(&net, regime, rng.random(), &cfg).expect("instance");
        let mut policy = Policy::new(&net, 50, cfg.n_steps, &mut rng);
        // Large gains drive the output layer deep into saturation.
        let gain: f64 = rng.random_range(0.1..100.0);
        for layer in &mut policy.layers {
            layer.w.data_mut().iter_mut().for_each(|w| *w *= gain);
            layer.b.data_mut().iter_mut().for_each(|b| *b *= gain);
        }
        let schedule = policy_forward(&inst, &policy).expect("forward");
        for (g, (c, f)) in schedule.coarse.iter().zip(&schedule.fine).enumerate() {
            for &v in c.iter().chain(f) {
                checked += 1;
                if !(v >= p_min[g] && v <= p_max[g]) {
                    outside += 1;
                }
                if v == p_min[g] || v == p_max[g] {
                    saturated += 1;
                }
            }
        }
    }
    outcome(
        outside == 0,
        format!("{checked} entries over 1000 policies, {outside} outside bounds ({saturated} exactly on a bound)"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn ramp_by_construction() -> Outcome {
    let net = ieee9();
    let (p_min, p_max) = net.generator_bounds();
    let (n_knots, n_steps) = (50, 6000);
    let bound = EPS_RMP * n_steps as f64 / n_knots as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    let mut worst_coarse = 0.0f64;
    for _ in 0..1000 {
        let coarse: Vec<Vec<f64>> = (0..p_min.len())
            .map(|g| {
                let mut row = Vec::with_capacity(n_knots);
                let mut v = rng.random_range(p_min[g]..=p_max[g]);
                row.push(v);
                for _ in 1..n_knots {
                    // Half of the steps sit exactly on the limit.
                    let step = if rng.random_bool(0.5) {
                        if rng.random_bool(0.5) {
                            bound
                        } else {
                            -bound
                        }
                    } else {
                        rng.random_range(-bound..=bound)
                    };
                    let mut next = v + step;
                    if next > p_max[g] || next < p_min[g] {
                        next = v - step;
                    }
                    // The rounded difference may exceed the limit by an ulp.
                    let mut shrink = 1.0;
                    while (next - v).abs() > bound {
                        shrink *= 1.0 - 1e-12;
                        next = v + (next - v) * shrink;
                    }
                    v = next;
                    row.push(v);
                }
                row
            })
            .collect();
        let coarse_step = coarse
            .iter()
            .flat_map(|r| r.windows(2).map(|w| (w[1] - w[0]).abs()))
            .fold(0.0, f64::max);
        worst_coarse = worst_coarse.max(coarse_step);
        let s = Schedule::from_coarse(coarse, &p_min, &p_max, n_steps).expect("schedule");
        worst = worst.max(s.max_fine_step());
    }
    outcome(
        worst <= EPS_RMP,
        format!("coarse bound {bound}, largest coarse step {worst_coarse:.17}, largest fine step {worst:.17e} (limit {EPS_RMP})"),
    )
}

// ---------------------------------------------------------------- criterion 3

struct Dense(Tensor);

impl LinearMap for Dense {
    fn in_len(&self) -> usize {
        self.0.shape()[1]
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![self.0.shape()[0]]
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.0.to_rows()) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    fn apply_transpose(&self, g: &[f64], gx: &mut [f64]) {
        for (gi, row) in g.iter().zip(self.0.to_rows()) {
            for (acc, a) in gx.iter_mut().zip(&row) {
                *acc += a * gi;
            }
        }
    }
}

/// Entries bounded away from zero so relu and abs are differentiable at
/// every sampled point and its finite-difference neighbours.
fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Largest relative error between the reverse-mode gradient and central
/// differences, measured against the largest gradient entry per parameter.
fn fd_error(params: &[Tensor], build: &Build) -> f64 {
    let eval = |ps: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let root = build(&mut g, &vars);
        g.value(root).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = build(&mut g, &vars);
    let grads = g.backward(root).expect("backward");
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[pi]);
        let scale = analytic.max_abs().max(1e-8);
        for e in 0..p.len() {
            let x = p.data()[e];
            let h = 1e-6 * x.abs().max(1.0);
            let mut plus = params.to_vec();
            plus[pi].data_mut()[e] = x + h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[e] = x - h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max((analytic.data()[e] - fd).abs() / scale.max(fd.abs()));
        }
    }
    worst
}

/// Contracts a non-scalar output with fixed random weights.
fn contract(g: &mut Graph, y: Var, w: &Arc<Tensor>) -> Var {
    let m = g.mul_const(y, w.clone());
    g.sum(m)
}

fn op_checks() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut out = Vec::new();
    let mut check = |name: &'static str, params: Vec<Tensor>, build: Box<Build>| {
        out.push((name, fd_error(&params, &*build)));
    };
    let w34 = Arc::new(rand_tensor(&mut rng, &[3, 4]));
    let w43 = Arc::new(rand_tensor(&mut rng, &[4, 3]));
    let w35 = Arc::new(rand_tensor(&mut rng, &[3, 5]));
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let c = Arc::new(rand_tensor(&mut rng, &[3, 4]));
    let bias = rand_tensor(&mut rng, &[4]);
    let m45 = rand_tensor(&mut rng, &[4, 5]);

    macro_rules! unary {
        ($name:literal, $f:expr) => {{
            let w = w34.clone();
            check($name, vec![a.clone()], Box::new(move |g, v| {
                let y = $f(g, v[0]);
                contract(g, y, &w)
            }));
        }};
    }
    macro_rules! binary {
        ($name:literal, $f:expr) => {{
            let w = w34.clone();
            check($name, vec![a.clone(), b.clone()], Box::new(move |g, v| {
                let y = $f(g, v[0], v[1]);
                contract(g, y, &w)
            }));
        }};
    }
    binary!("add", |g: &mut Graph, x, y| g.add(x, y));
    binary!("sub", |g: &mut Graph, x, y| g.sub(x, y));
    binary!("mul", |g: &mut Graph, x, y| g.mul(x, y));
    unary!("scale", |g: &mut Graph, x| g.scale(x, -1.7));
    unary!("add_scalar", |g: &mut Graph, x| {
        let y = g.add_scalar(x, 0.3);
        g.square(y)
    });
    {
        let cc = c.clone();
        unary!("mul_const", |g: &mut Graph, x| g.mul_const(x, cc.clone()));
    }
    {
        let cc = c.clone();
        unary!("add_const", |g: &mut Graph, x| {
            let y = g.add_const(x, &cc);
            g.square(y)
        });
    }
    unary!("relu", |g: &mut Graph, x| g.relu(x));
    unary!("tanh", |g: &mut Graph, x| g.tanh(x));
    unary!("abs", |g: &mut Graph, x| g.abs(x));
    unary!("square", |g: &mut Graph, x| g.square(x));
    check("sum", vec![a.clone()], Box::new(|g, v| {
        let s = g.sum(v[0]);
        g.square(s)
    }));
    check("squared_norm", vec![a.clone()], Box::new(|g, v| g.squared_norm(v[0])));
    {
        let w = w35.clone();
        check("matmul", vec![a.clone(), m45.clone()], Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1]);
            contract(g, y, &w)
        }));
    }
    {
        let w = w43.clone();
        unary!("transpose", |g: &mut Graph, x| {
            let y = g.transpose(x);
            let m = g.mul_const(y, w.clone());
            g.transpose(m)
        });
    }
    {
        let w = w34.clone();
        check("add_row_bias", vec![a.clone(), bias.clone()], Box::new(move |g, v| {
            let y = g.add_row_bias(v[0], v[1]);
            let y = g.square(y);
            contract(g, y, &w)
        }));
    }
    {
        let w = Arc::new(rand_tensor(&mut rng, &[12]));
        check("reshape", vec![a.clone()], Box::new(move |g, v| {
            let y = g.reshape(v[0], vec![12]);
            contract(g, y, &w)
        }));
    }
    {
        let w = Arc::new(rand_tensor(&mut rng, &[3, 2]));
        check("slice_cols", vec![a.clone()], Box::new(move |g, v| {
            let y = g.slice_cols(v[0], 1, 3);
            contract(g, y, &w)
        }));
    }
    {
        let w = Arc::new(rand_tensor(&mut rng, &[4, 4]));
        check("select_rows", vec![a.clone()], Box::new(move |g, v| {
            let y = g.select_rows(v[0], &[2, 0, 2, 1]);
            contract(g, y, &w)
        }));
    }
    {
        let w = Arc::new(rand_tensor(&mut rng, &[3, 9]));
        let other = rand_tensor(&mut rng, &[3, 5]);
        check("concat_cols", vec![a.clone(), other], Box::new(move |g, v| {
            let y = g.concat_cols(&[v[0], v[1]]);
            contract(g, y, &w)
        }));
    }
    {
        let w = w34.clone();
        check("scale_shift_rows", vec![a.clone()], Box::new(move |g, v| {
            let y = g.scale_shift_rows(v[0], &[2.0, -1.0, 0.5], &[0.1, 0.2, 0.3]);
            let y = g.square(y);
            contract(g, y, &w)
        }));
    }
    for width in [3, 5, 10] {
        let w = Arc::new(rand_tensor(&mut rng, &[4, 12]));
        let params = vec![
            rand_tensor(&mut rng, &[3, 12]),
            rand_tensor(&mut rng, &[4, 3, width]),
            rand_tensor(&mut rng, &[4]),
        ];
        check("conv1d", params, Box::new(move |g, v| {
            let y = g.conv1d(v[0], v[1], v[2]);
            contract(g, y, &w)
        }));
    }
    {
        let plan = Arc::new(InterpPlan::new(6, 23).expect("plan"));
        let w = Arc::new(rand_tensor(&mut rng, &[2, 23]));
        check("interpolate", vec![rand_tensor(&mut rng, &[2, 6])], Box::new(move |g, v| {
            let y = g.interpolate(v[0], plan.clone());
            contract(g, y, &w)
        }));
    }
    {
        let mut k = rand_tensor(&mut rng, &[4, 4]);
        k.data_mut().iter_mut().for_each(|v| *v *= 0.4);
        let k = Arc::new(k);
        let bm = Arc::new(rand_tensor(&mut rng, &[4, 2]));
        let w = Arc::new(rand_tensor(&mut rng, &[4, 9]));
        let params = vec![rand_tensor(&mut rng, &[4]), rand_tensor(&mut rng, &[2, 8])];
        check("affine_recurrence", params, Box::new(move |g, v| {
            let y = g.affine_recurrence(v[0], v[1], k.clone(), bm.clone());
            contract(g, y, &w)
        }));
    }
    {
        let map: Arc<dyn LinearMap> = Arc::new(Dense(rand_tensor(&mut rng, &[5, 3])));
        let w = Arc::new(rand_tensor(&mut rng, &[5]));
        check("linear", vec![rand_tensor(&mut rng, &[3])], Box::new(move |g, v| {
            let y = g.linear(v[0], map.clone());
            contract(g, y, &w)
        }));
    }
    check("spectral_norm", vec![rand_tensor(&mut rng, &[4, 4])], Box::new(|g, v| g.spectral_norm(v[0])));
    out
}

/// Small stable surrogate with random couplings for the 9-bus layout.
fn tiny_model(seed: u64) -> KoopmanModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = KoopmanDims {
        n_x: 11,
        n_u: 5,
        n_gen: 2,
        n_latent: 3,
        hidden: vec![6],
    };
    let mut m = KoopmanModel::new(dims, &mut rng);
    let n = m.n_psi();
    let k = (0..n * n)
        .map(|i| if i % (n + 1) == 0 { 0.9 } else { rng.random_range(-0.03..0.03) })
        .collect();
    m.k = Tensor::new(vec![n, n], k);
    m.b = Tensor::new(vec![n, 5], (0..n * 5).map(|_| rng.random_range(-0.5..0.5)).collect());
    m
}

fn full_loss_error() -> f64 {
    let net = ieee9();
    let (n_steps, n_knots) = (20, 5);
    let cfg = ScenarioConfig {
        n_steps,
        n_knots,
        ..ScenarioConfig::default()
    };
    let model = tiny_model(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut policy = Policy::new(&net, n_knots, n_steps, &mut rng);
    // The tight regime makes the frequency and ramp penalties active.
    let insts: Vec<_> = (0..3)
        .map(|s| sample_instance(&net, Regime::Tight, 100 + s, &cfg).expect("instance"))
        .collect();
    policy.fit_normalization(&insts);
    let w = LossWeights::default();
    let (_, grads) = dpc_loss(&insts, &policy, &model, w, EPS_RMP).expect("loss");
    let base = policy.clone();
    let mut worst = 0.0f64;
    for (pi, g) in grads.iter().enumerate() {
        let scale = g.max_abs().max(1e-8);
        for e in 0..g.len() {
            let perturbed = |delta: f64| {
                let mut p = base.clone();
                let layer = &mut p.layers[pi / 2];
                let t = if pi % 2 == 0 { &mut layer.w } else { &mut layer.b };
                t.data_mut()[e] += delta;
                dpc_loss(&insts, &p, &model, w, EPS_RMP).expect("loss").0
            };
            let x = {
                let layer = &base.layers[pi / 2];
                if pi % 2 == 0 {
                    layer.w.data()[e]
                } else {
                    layer.b.data()[e]
                }
            };
            let h = 1e-6 * x.abs().max(1.0);
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            worst = worst.max((fd - g.data()[e]).abs() / scale.max(fd.abs()));
        }
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let ops = op_checks();
    let (worst_name, worst_op) = ops
        .iter()
        .copied()
        .fold(("", 0.0f64), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    let loss = full_loss_error();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_op <= 1e-5 && loss <= 1e-4 && secs < 60.0,
        format!(
            "{} op checks, worst {worst_name} rel err {worst_op:.2e} (limit 1e-5); full loss rel err {loss:.2e} (limit 1e-4); {secs:.1} s",
            ops.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn rows(values: &[f64], n: usize) -> Vec<Vec<f64>> {
    values.iter().map(|&v| vec![v; n]).collect()
}

fn step_load_run(net: &Network, dt: f64, t_end: f64) -> Trajectory {
    let (p, l) = (net.generator_nominal(), net.load_nominal());
    let x0 = equilibrium_state(net, &p, &l).expect("equilibrium");
    let n = (t_end / dt).round() as usize;
    let jump = (1.0 / dt).round() as usize;
    let mut loads = rows(&l, n);
    for v in loads[0].iter_mut().skip(jump) {
        *v -= 0.1;
    }
    simulate(net, &rows(&p, n), &loads, &x0, dt, n).expect("simulate")
}

fn final_angle_gap(a: &Trajectory, b: &Trajectory) -> f64 {
    let (x, y) = (a.states.last().unwrap(), b.states.last().unwrap());
    x.theta.iter().zip(&y.theta).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn simulator_fidelity() -> Outcome {
    let net = ieee9();
    let (p, l) = (net.generator_nominal(), net.load_nominal());
    let x0 = equilibrium_state(&net, &p, &l).expect("equilibrium");
    let n = 6000;
    let start = Instant::now();
    let held = simulate(&net, &rows(&p, n), &rows(&l, n), &x0, 0.01, n).expect("simulate");
    let secs = start.elapsed().as_secs_f64();
    let drift = held
        .states
        .iter()
        .flat_map(|s| s.omega.iter())
        .fold(0.0f64, |m, w| m.max(w.abs()));

    let t_end = 3.0;
    let reference = step_load_run(&net, 0.001, t_end);
    let e1 = final_angle_gap(&step_load_run(&net, 0.01, t_end), &reference);
    let e2 = final_angle_gap(&step_load_run(&net, 0.005, t_end), &reference);
    let ratio = e1 / e2;
    outcome(
        drift <= 1e-6 && (3.5..=4.5).contains(&ratio) && secs < 30.0,
        format!("equilibrium drift {drift:.2e} rad/s over 60 s; error ratio {ratio:.3} ({e1:.2e}/{e2:.2e}); 60 s trajectory in {secs:.2} s"),
    )
}

// ---------------------------------------------------------------- criteria 5 to 8

struct Pipeline {
    model: KoopmanModel,
    quality: dedpc::koopman::ModelQuality,
    fit_secs: f64,
    nominal: EvalReport,
    tight: EvalReport,
}

fn regime_run(net: &Network, model: &KoopmanModel, regime: Regime) -> EvalReport {
    let data = make_dataset(net, regime, N_TRAIN, N_TEST, DATA_SEED, &ScenarioConfig::default()).expect("dataset");
    let start = Instant::now();
    let (policy, history) = train_policy(net, &data.train, model, &DpcTrainConfig::default()).expect("train policy");
    eprintln!(
        "  {regime}: policy trained in {:.0} s ({} epochs, best {})",
        start.elapsed().as_secs_f64(),
        history.epoch_loss.len(),
        history.best_epoch
    );
    let start = Instant::now();
    let report = run_benchmark(net, &data.test, &policy, model, &BenchConfig::default()).expect("benchmark");
    eprintln!("  {regime}: benchmark in {:.0} s", start.elapsed().as_secs_f64());
    report
}

fn pipeline() -> Pipeline {
    let net = ieee9();
    let start = Instant::now();
    let data = generate_transitions(&net, &DataConfig::default(), 1).expect("identification data");
    let (model, report) = train_koopman(
        &data,
        net.n_generators(),
        &injection_dictionary(&net),
        &KoopmanTrainConfig::default(),
    )
    .expect("koopman fit");
    let fit_secs = start.elapsed().as_secs_f64();
    eprintln!("  surrogate fitted in {fit_secs:.0} s");
    let nominal = regime_run(&net, &model, Regime::Nominal);
    let tight = regime_run(&net, &model, Regime::Tight);
    Pipeline {
        model,
        quality: report.quality,
        fit_secs,
        nominal,
        tight,
    }
}

fn koopman_quality(p: &Pipeline) -> Outcome {
    let q = &p.quality;
    outcome(
        q.val_one_step_loss <= 1e-2 && q.rollout_rms_hz <= 0.01 && q.spectral_radius < 1.0,
        format!(
            "held-out one-step loss {:.2e}, 100-step RMS {:.2e} Hz, spectral radius {:.6} (fit {:.0} s, {} observables)",
            q.val_one_step_loss,
            q.rollout_rms_hz,
            q.spectral_radius,
            p.fit_secs,
            p.model.n_psi()
        ),
    )
}

fn cost_gap_of_means(r: &EvalReport) -> f64 {
    100.0 * (r.dpc.mean_cost - r.online.mean_cost) / r.online.mean_cost.abs()
}

fn nominal_quality(p: &Pipeline) -> Outcome {
    let r = &p.nominal;
    let gap = r.dpc.mean_gap_pct.unwrap_or(f64::INFINITY);
    outcome(
        r.n_failed == 0
            && r.n_instances == N_TEST
            && gap <= 5.0
            && r.dpc.mean_max_freq_violation_hz == 0.0
            && r.dpc.mean_max_ramp_violation <= 1e-3,
        format!(
            "{} instances ({} failed): mean gap {gap:.2}% (gap of means {:.2}%), mean max freq violation {:.2e} Hz, mean max ramp violation {:.2e}",
            r.n_instances,
            r.n_failed,
            cost_gap_of_means(r),
            r.dpc.mean_max_freq_violation_hz,
            r.dpc.mean_max_ramp_violation
        ),
    )
}

fn tight_stress(p: &Pipeline) -> Outcome {
    let r = &p.tight;
    let gap = r.dpc.mean_gap_pct.unwrap_or(f64::INFINITY);
    outcome(
        r.n_failed == 0 && gap <= 10.0 && r.dpc.mean_max_freq_violation_hz <= 0.005,
        format!(
            "{} instances ({} failed): mean gap {gap:.2}% (gap of means {:.2}%), mean max freq violation {:.2e} Hz (baseline {:.2e} Hz)",
            r.n_instances,
            r.n_failed,
            cost_gap_of_means(r),
            r.dpc.mean_max_freq_violation_hz,
            r.online.mean_max_freq_violation_hz
        ),
    )
}

fn speedup(p: &Pipeline) -> Outcome {
    let mut ratios = Vec::new();
    let mut worst_inference = 0.0f64;
    for r in [&p.nominal, &p.tight] {
        for i in &r.instances {
            if let (Some(d), Some(o)) = (i.dpc, i.online) {
                ratios.push(o.time / d.time);
                worst_inference = worst_inference.max(d.time);
            }
        }
    }
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_inference = (p.nominal.dpc.mean_time + p.tight.dpc.mean_time) / 2.0;
    outcome(
        !ratios.is_empty() && min_ratio >= 100.0 && worst_inference <= 0.01,
        format!(
            "{} paired instances: smallest per-instance speedup {min_ratio:.0}x, mean speedup NO {:.0}x TO {:.0}x; inference mean {mean_inference:.2e} s, worst {worst_inference:.2e} s",
            ratios.len(),
            p.nominal.speedup,
            p.tight.speedup
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

/// One generator and one load on a 12-step horizon with 4 knots: ω relaxes
/// towards half the generator output and the slack covers the remaining load.
fn toy_solver(eps_rmp: f64) -> OnlineSolver {
    let dims = KoopmanDims {
        n_x: 3,
        n_u: 2,
        n_gen: 1,
        n_latent: 1,
        hidden: vec![],
    };
    let mut m = KoopmanModel::new(dims, &mut ChaCha8Rng::seed_from_u64(0));
    m.k = Tensor::new(vec![3, 3], vec![0.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.9]);
    m.b = Tensor::new(vec![3, 2], vec![0.5, 0.0, -1.0, 1.0, 0.0, 0.0]);
    let basis = Arc::new(ResponseBasis::new(&m, 4, 12).expect("basis"));
    OnlineSolver::new(
        basis,
        vec![0.0],
        vec![1.0],
        OnlineConfig {
            eps_rmp,
            ..OnlineConfig::default()
        },
    )
}

fn toy_instance(load: f64, p_g0: f64, knot_cost: Vec<f64>) -> PreparedInstance {
    let n = 12;
    let mut free = Vec::with_capacity(2 * n);
    let mut omega = 0.5 * p_g0;
    for _ in 0..n {
        omega *= 0.6;
        free.push(omega);
    }
    free.extend(std::iter::repeat_n(load, n));
    PreparedInstance {
        features: Tensor::zeros(&[0]),
        free: Tensor::new(vec![2, n], free),
        gen_cost: Arc::new(Tensor::new(vec![1, knot_cost.len()], knot_cost)),
        slack_cost: 1.0,
        p_g0: vec![p_g0],
        omega_bnd: 10.0,
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let resolution = 101;
    let mut worst = 0.0f64;
    let mut unconverged = 0usize;
    let count = 24;
    for _ in 0..count {
        // Grid-aligned start, ramp limit and bounds put every vertex of the
        // feasible set on the 0.01 grid.
        let p_g0 = rng.random_range(0..=100) as f64 / 100.0;
        let coarse_bound = rng.random_range(5..=40) as f64 / 100.0;
        let eps_rmp = coarse_bound * 4.0 / 12.0;
        let knot_cost: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..6.0)).collect();
        let load = rng.random_range(1.0..2.0);
        let solver = toy_solver(eps_rmp);
        let prep = toy_instance(load, p_g0, knot_cost);
        let brute = brute_force_toy(solver.problem(), &prep, &[0.0], &[1.0], resolution)
            .expect("enumeration")
            .expect("feasible grid point");
        let report = solver.solve_prepared(&prep).expect("solve");
        if !report.converged {
            unconverged += 1;
        }
        worst = worst.max((report.objective - brute.objective).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-3 && secs < 300.0,
        format!("{count} toy instances on a {resolution}-point grid: worst objective gap {worst:.2e}, {unconverged} unconverged, {secs:.1} s"),
    )
}

// ---------------------------------------------------------------- criterion 10

struct Artifacts {
    dataset: String,
    model: String,
    policy: String,
    report: String,
}

fn small_run() -> Artifacts {
    let net = ieee9();
    let scenario = ScenarioConfig {
        n_steps: 300,
        n_knots: 10,
        ..ScenarioConfig::default()
    };
    let data: Dataset = make_dataset(&net, Regime::Tight, 24, 4, 5, &scenario).expect("dataset");
    let dcfg = DataConfig {
        n_trajectories: 12,
        val_every: 4,
        pairs_per_trajectory: 40,
        windows_per_trajectory: 2,
        window_len: 30,
        n_knots: 10,
        scenario: scenario.clone(),
        ..DataConfig::default()
    };
    let tdata = generate_transitions(&net, &dcfg, 3).expect("identification data");
    let kcfg = KoopmanTrainConfig {
        n_latent: 6,
        hidden: vec![16],
        epochs: 5,
        batch_size: 32,
        ..KoopmanTrainConfig::default()
    };
    let (model, _) = train_koopman(&tdata, net.n_generators(), &injection_dictionary(&net), &kcfg).expect("fit");
    let pcfg = DpcTrainConfig {
        n_knots: 10,
        epochs: 5,
        ..DpcTrainConfig::default()
    };
    let (policy, _) = train_policy(&net, &data.train, &model, &pcfg).expect("train policy");
    let bcfg = BenchConfig {
        workers: 2,
        ..BenchConfig::default()
    };
    let mut report = run_benchmark(&net, &data.test, &policy, &model, &bcfg).expect("benchmark");
    // Wall-clock measurements are the only non-reproducible fields.
    report.speedup = 0.0;
    report.dpc.mean_time = 0.0;
    report.online.mean_time = 0.0;
    for i in &mut report.instances {
        for m in [&mut i.dpc, &mut i.online].into_iter().flatten() {
            m.time = 0.0;
        }
    }
    Artifacts {
        dataset: serde_json::to_string(&(&data.train, &data.test)).expect("serialize"),
        model: model.to_json(),
        policy: policy.to_json(),
        report: serde_json::to_string(&report).expect("serialize"),
    }
}

fn determinism() -> Outcome {
    let (a, b) = (small_run(), small_run());
    let same = [
        ("dataset", a.dataset == b.dataset),
        ("model", a.model == b.model),
        ("policy", a.policy == b.policy),
        ("report", a.report == b.report),
    ];
    let differing: Vec<&str> = same.iter().filter(|(_, s)| !s).map(|(n, _)| *n).collect();
    let full_a = make_dataset(&ieee9(), Regime::Nominal, N_TRAIN, N_TEST, DATA_SEED, &ScenarioConfig::default());
    let full_b = make_dataset(&ieee9(), Regime::Nominal, N_TRAIN, N_TEST, DATA_SEED, &ScenarioConfig::default());
    let full_same = serde_json::to_string(&full_a.expect("dataset").test).ok()
        == serde_json::to_string(&full_b.expect("dataset").test).ok();
    outcome(
        differing.is_empty() && full_same,
        if differing.is_empty() {
            format!(
                "two runs identical: dataset, surrogate, policy and report (excluding wall-clock times); full-size dataset identical: {full_same}"
            )
        } else {
            format!("differing artifacts: {differing:?}")
        },
    )
}

/// Numeric arguments select criteria (`-- 1 3 9`); anything else, such as
/// flags forwarded by the test runner, is ignored. No selection runs all.
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=10).collect()
    } else {
        picked
    }
}

fn main() {
    let want = selected();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut run = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        if !want.contains(&id) {
            return;
        }
        let start = Instant::now();
        let o = f();
        eprintln!("  criterion {id} took {:.1} s", start.elapsed().as_secs_f64());
        println!("criterion {id} ({name}): {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, o));
    };
    run(1, "hard bounds", &hard_bounds);
    run(2, "ramp by construction", &ramp_by_construction);
    run(3, "gradient correctness", &gradient_correctness);
    run(4, "simulator fidelity", &simulator_fidelity);
    run(9, "oracle equivalence", &oracle_equivalence);
    run(10, "determinism", &determinism);
    if (5..=8).any(|id| want.contains(&id)) {
        eprintln!("  running the full pipeline");
        let p = pipeline();
        run(5, "Koopman quality", &|| koopman_quality(&p));
        run(6, "NO dispatch quality", &|| nominal_quality(&p));
        run(7, "TO stress", &|| tight_stress(&p));
        run(8, "speedup", &|| speedup(&p));
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "summary: {} of {} criteria pass{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
